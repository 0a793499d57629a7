// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages as functions of (config, data, checkpoint).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nkb_core::factworld::{
    build_vocab, generate_world, read_corpus, read_qa, read_world, render_qa, render_statements,
    write_corpus, write_qa, write_world, Partition, QaPair, Statement, Vocab, World,
};
use nkb_core::model::Seq2SeqModel;
use nkb_core::probes::{
    active_keys, build_trigger_matrix, category_histogram, entity_fraction, mean_cohesion,
    pattern_cohesion, rank_slots, top_scoring_report, top_triggering, KeyReport, SlotRanking,
    TriggerMatrix, ValueReport,
};
use nkb_core::rng::{derive_seed, rng_for};
use nkb_core::surgery::{
    build_edit_cases, read_edit_specs, sweep_lambda, wrong_answer_specs, EditCase, EditSpec,
    SweepResult,
};
use nkb_core::training::{
    copy_task, evaluate_em, finetune, inject_knowledge, pretrain_base, proxy_lm_eval, train_phase,
    Checkpoint, EmReport, Example, MetricRecord, ParamGroup, PhaseReport, Sample, PROXY_MAX_LEN,
};
use nkb_core::{Error, Result};

use crate::config::LabConfig;

pub const WORLD_FILE: &str = "world.tsv";
pub const BASE_CORPUS_FILE: &str = "corpus-base.tsv";
pub const NEW_CORPUS_FILE: &str = "corpus-new.tsv";
pub const BASE_QA_FILE: &str = "qa-base.tsv";
pub const NEW_QA_FILE: &str = "qa-new.tsv";
pub const WITHHELD_QA_FILE: &str = "qa-withheld.tsv";
pub const DATA_FILES: [&str; 6] = [
    WORLD_FILE,
    BASE_CORPUS_FILE,
    NEW_CORPUS_FILE,
    BASE_QA_FILE,
    NEW_QA_FILE,
    WITHHELD_QA_FILE,
];

/// Checkpoint meta key naming the corpora a model has been trained on.
pub const CORPUS_META: &str = "corpus";

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))
}

/// A generated world with its corpora and question sets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabData {
    pub world: World,
    pub vocab: Vocab,
    pub base: Vec<Statement>,
    pub new: Vec<Statement>,
    pub base_qa: Vec<QaPair>,
    pub new_qa: Vec<QaPair>,
    pub withheld_qa: Vec<QaPair>,
}

impl LabData {
    pub fn generate(cfg: &LabConfig) -> Result<Self> {
        let world = generate_world(&cfg.world)?;
        Ok(Self {
            vocab: build_vocab(&world),
            base: render_statements(&world, Partition::Base),
            new: render_statements(&world, Partition::New),
            base_qa: render_qa(&world, Partition::Base),
            new_qa: render_qa(&world, Partition::New),
            withheld_qa: render_qa(&world, Partition::Withheld),
            world,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = create(&dir.join(WORLD_FILE))?;
        write_world(&mut w, &self.world)?;
        w.flush()?;
        for (name, corpus) in [(BASE_CORPUS_FILE, &self.base), (NEW_CORPUS_FILE, &self.new)] {
            let mut w = create(&dir.join(name))?;
            write_corpus(&mut w, corpus)?;
            w.flush()?;
        }
        for (name, qa) in [
            (BASE_QA_FILE, &self.base_qa),
            (NEW_QA_FILE, &self.new_qa),
            (WITHHELD_QA_FILE, &self.withheld_qa),
        ] {
            let mut w = create(&dir.join(name))?;
            write_qa(&mut w, qa)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let world = read_world(open(&dir.join(WORLD_FILE))?)?;
        Ok(Self {
            vocab: build_vocab(&world),
            base: read_corpus(open(&dir.join(BASE_CORPUS_FILE))?)?,
            new: read_corpus(open(&dir.join(NEW_CORPUS_FILE))?)?,
            base_qa: read_qa(open(&dir.join(BASE_QA_FILE))?)?,
            new_qa: read_qa(open(&dir.join(NEW_QA_FILE))?)?,
            withheld_qa: read_qa(open(&dir.join(WITHHELD_QA_FILE))?)?,
            world,
        })
    }

    /// Base questions used for fine-tuning and the held-out rest.
    pub fn base_split(&self, qa_train: usize) -> Result<(&[QaPair], &[QaPair])> {
        if qa_train > self.base_qa.len() {
            return Err(Error::config(format!(
                "finetune.qa_train {qa_train} exceeds the {} base questions",
                self.base_qa.len()
            )));
        }
        Ok(self.base_qa.split_at(qa_train))
    }

    /// Statements behind a `corpus` meta value such as `base+new`.
    pub fn corpus(&self, spec: &str) -> Result<Vec<&Statement>> {
        let mut out = Vec::new();
        for part in spec.split('+') {
            match part {
                "base" => out.extend(&self.base),
                "new" => out.extend(&self.new),
                _ => return Err(Error::format(format!("unknown corpus `{part}` in checkpoint meta"))),
            }
        }
        Ok(out)
    }

    /// Every question with a provenance fact id, for probing and edit specs.
    pub fn all_questions(&self) -> Vec<QaPair> {
        self.base_qa
            .iter()
            .chain(&self.new_qa)
            .chain(&self.withheld_qa)
            .cloned()
            .collect()
    }

    /// Questions the trigger matrix is built over.
    pub fn probe_questions(&self) -> Vec<QaPair> {
        self.base_qa.iter().chain(&self.new_qa).cloned().collect()
    }
}

fn set_meta(ckpt: &mut Checkpoint<f64>, key: &str, value: &str) {
    ckpt.meta.retain(|(k, _)| k != key);
    ckpt.meta.push((key.to_string(), value.to_string()));
}

/// A fresh checkpoint, or `resume` when it was left by an unfinished
/// pretraining run.
pub fn pretrain_start(cfg: &LabConfig, data: &LabData, resume: Option<Checkpoint<f64>>) -> Result<Checkpoint<f64>> {
    if let Some(ckpt) = resume {
        if ckpt.meta("phase") != Some("pretrain") {
            return Err(Error::contract("pretraining can only resume a pretraining checkpoint"));
        }
        return Ok(ckpt);
    }
    let model = Seq2SeqModel::new(cfg.model_for(data.vocab.len()), &mut rng_for(cfg.seed, "init"))?;
    let mut ckpt = Checkpoint::new(model);
    set_meta(&mut ckpt, CORPUS_META, "base");
    Ok(ckpt)
}

pub fn run_pretrain(
    cfg: &LabConfig,
    data: &LabData,
    ckpt: &mut Checkpoint<f64>,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    pretrain_base(ckpt, &data.vocab, &data.base, &cfg.pretrain, metrics)
}

/// Mounts the bank on a base checkpoint; an unfinished injection resumes.
pub fn inject_start(cfg: &LabConfig, base: Checkpoint<f64>) -> Result<Checkpoint<f64>> {
    if base.meta("phase") == Some("inject") && (base.step as usize) < cfg.inject.train.max_steps {
        return Ok(base);
    }
    let mut model = base.model;
    if !model.is_mounted() {
        model.mount_nkb(cfg.nkb_site, cfg.nkb_dim, cfg.nkb_init, &mut rng_for(cfg.seed, "mount"))?;
    }
    let mut ckpt = Checkpoint::new(model);
    set_meta(&mut ckpt, CORPUS_META, "base+new");
    Ok(ckpt)
}

/// New statements `new_repeat` times, then the base corpus when mixed in.
pub fn injection_corpus(cfg: &LabConfig, data: &LabData) -> Vec<Statement> {
    let mut out = Vec::new();
    for _ in 0..cfg.inject.new_repeat {
        out.extend(data.new.iter().cloned());
    }
    if cfg.inject.mix_base {
        out.extend(data.base.iter().cloned());
    }
    out
}

pub fn run_inject(
    cfg: &LabConfig,
    data: &LabData,
    ckpt: &mut Checkpoint<f64>,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    let groups = ParamGroup::split(&ckpt.model, true, false);
    inject_knowledge(ckpt, &data.vocab, &injection_corpus(cfg, data), &cfg.inject.train, &groups, metrics)
}

/// Starts phase `phase` from `source`, keeping its corpus record; a
/// checkpoint already in that phase resumes.
pub fn continue_start(source: Checkpoint<f64>, phase: &str) -> Checkpoint<f64> {
    if source.meta("phase") == Some(phase) {
        return source;
    }
    let corpus = source.meta(CORPUS_META).unwrap_or("base").to_string();
    let mut ckpt = Checkpoint::new(source.model);
    set_meta(&mut ckpt, CORPUS_META, &corpus);
    ckpt
}

/// QA training pairs plus, with replay on, masked-span samples of every
/// corpus the checkpoint has been trained on.
pub fn finetune_samples(cfg: &LabConfig, data: &LabData, ckpt: &Checkpoint<f64>) -> Result<Vec<Sample>> {
    let (train, _) = data.base_split(cfg.finetune.qa_train)?;
    let mut samples = Vec::new();
    for p in train {
        samples.push(Sample::Fixed(Example::from_qa(&data.vocab, p)?));
    }
    if cfg.finetune.replay {
        for s in data.corpus(ckpt.meta(CORPUS_META).unwrap_or("base"))? {
            samples.push(Sample::ssm(&data.vocab, s)?);
        }
    }
    Ok(samples)
}

pub fn run_finetune(
    cfg: &LabConfig,
    data: &LabData,
    ckpt: &mut Checkpoint<f64>,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    let samples = finetune_samples(cfg, data, ckpt)?;
    let groups = ParamGroup::split(&ckpt.model, false, false);
    train_phase(ckpt, samples, &groups, &cfg.finetune.train, "finetune", metrics)
}

pub fn run_proxy_finetune(
    cfg: &LabConfig,
    ckpt: &mut Checkpoint<f64>,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    let examples = copy_task(
        cfg.proxy.task,
        cfg.proxy.train_examples,
        PROXY_MAX_LEN,
        ckpt.model.config.vocab_size,
        derive_seed(cfg.seed, "proxy-train"),
    );
    finetune(ckpt, examples, &cfg.proxy.train, "proxy", metrics)
}

pub fn proxy_accuracy(cfg: &LabConfig, model: &Seq2SeqModel<f64>) -> Result<f64> {
    proxy_lm_eval(
        model,
        cfg.proxy.task,
        cfg.proxy.eval_examples,
        model.config.vocab_size,
        derive_seed(cfg.seed, "proxy-eval"),
        cfg.threads,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitScore {
    pub split: &'static str,
    pub correct: usize,
    pub total: usize,
}

impl SplitScore {
    pub fn em(&self) -> f64 {
        100.0 * self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mounted: bool,
    pub scores: Vec<SplitScore>,
    pub proxy: f64,
    /// `(split, fact id, gold, prediction, hit)` per question.
    pub predictions: Vec<(&'static str, usize, String, String, bool)>,
}

impl EvalReport {
    pub fn em(&self, split: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.split == split).map(SplitScore::em)
    }

    pub fn write_predictions<W: Write>(&self, mut out: W) -> Result<()> {
        for (split, id, gold, pred, hit) in &self.predictions {
            writeln!(out, "{split}\t{id}\t{gold}\t{pred}\t{hit}")?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mounted = {}", self.mounted)?;
        for s in &self.scores {
            writeln!(f, "em.{} = {:.2} ({}/{})", s.split, s.em(), s.correct, s.total)?;
        }
        writeln!(f, "proxy = {:.2}", self.proxy)
    }
}

/// Exact match on every question split plus proxy accuracy.
pub fn evaluate(cfg: &LabConfig, data: &LabData, model: &Seq2SeqModel<f64>) -> Result<EvalReport> {
    let (train, held) = data.base_split(cfg.finetune.qa_train)?;
    let mut scores = Vec::new();
    let mut predictions = Vec::new();
    let mut add = |split: &'static str, pairs: &[QaPair], r: &EmReport| {
        scores.push(SplitScore {
            split,
            correct: r.hits.iter().filter(|h| **h).count(),
            total: pairs.len(),
        });
        for ((p, pred), hit) in pairs.iter().zip(&r.predictions).zip(&r.hits) {
            predictions.push((split, p.fact_id, p.answer.join(" "), pred.join(" "), *hit));
        }
    };
    let base = evaluate_em(model, &data.vocab, &data.base_qa, cfg.threads)?;
    add("base", &data.base_qa, &base);
    let n = train.len();
    let mut subsets = vec![("base_train", 0, n)];
    if !held.is_empty() {
        subsets.push(("base_heldout", n, n + held.len()));
    }
    let mut sub_scores: Vec<SplitScore> = subsets
        .into_iter()
        .map(|(split, lo, hi)| SplitScore {
            split,
            correct: base.hits[lo..hi].iter().filter(|h| **h).count(),
            total: hi - lo,
        })
        .collect();
    for (split, pairs) in [("new", &data.new_qa), ("withheld", &data.withheld_qa)] {
        if !pairs.is_empty() {
            let r = evaluate_em(model, &data.vocab, pairs, cfg.threads)?;
            add(split, pairs, &r);
        }
    }
    drop(add);
    scores.splice(1..1, sub_scores.drain(..));
    Ok(EvalReport {
        mounted: model.is_mounted(),
        scores,
        proxy: proxy_accuracy(cfg, model)?,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueProbe {
    pub ranking: SlotRanking,
    pub reports: Vec<ValueReport>,
}

impl ValueProbe {
    pub fn entity_fraction(&self) -> f64 {
        entity_fraction(&self.reports)
    }

    pub fn histogram(&self) -> BTreeMap<&'static str, usize> {
        category_histogram(&self.reports)
    }
}

impl fmt::Display for ValueProbe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "slots_reported = {}", self.reports.len())?;
        writeln!(f, "entity_fraction = {:.4}", self.entity_fraction())?;
        for (cat, n) in self.histogram() {
            writeln!(f, "category.{cat} = {n}")?;
        }
        for r in &self.reports {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

pub fn trigger_matrix(cfg: &LabConfig, data: &LabData, model: &Seq2SeqModel<f64>) -> Result<TriggerMatrix> {
    build_trigger_matrix(model, &data.vocab, &data.probe_questions(), cfg.threads)
}

/// Value projections of the `probe.top_n` slots under the configured ranking.
pub fn probe_values(cfg: &LabConfig, data: &LabData, model: &Seq2SeqModel<f64>) -> Result<ValueProbe> {
    let matrix = trigger_matrix(cfg, data, model)?;
    let mut slots = rank_slots(&matrix, cfg.probe.ranking);
    if cfg.probe.top_n > 0 {
        slots.truncate(cfg.probe.top_n);
    }
    Ok(ValueProbe {
        ranking: cfg.probe.ranking,
        reports: top_scoring_report(model, &data.vocab, &data.world, cfg.probe.k, &slots)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyProbe {
    pub m: usize,
    pub keys: Vec<(KeyReport, f64)>,
    pub mean_cohesion: f64,
    pub shuffled_cohesion: f64,
}

impl fmt::Display for KeyProbe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "active_keys = {}", self.keys.len())?;
        writeln!(f, "mean_cohesion = {:.4}", self.mean_cohesion)?;
        writeln!(f, "shuffled_cohesion = {:.4}", self.shuffled_cohesion)?;
        for (r, c) in &self.keys {
            writeln!(f, "{r} cohesion={c:.4}")?;
        }
        Ok(())
    }
}

/// Top-triggering questions of every active key, with relation cohesion and
/// the column-shuffled control.
pub fn probe_keys(cfg: &LabConfig, data: &LabData, model: &Seq2SeqModel<f64>) -> Result<KeyProbe> {
    let matrix = trigger_matrix(cfg, data, model)?;
    let m = cfg.probe.m;
    let keys = active_keys(&matrix, m);
    let mut reports = Vec::with_capacity(keys.len());
    for &k in &keys {
        let r = top_triggering(&matrix, k, m)?;
        let c = pattern_cohesion(&r, &data.world)?;
        reports.push((r, c));
    }
    let shuffled = matrix.column_shuffled(derive_seed(cfg.seed, "shuffle-control"));
    Ok(KeyProbe {
        m,
        mean_cohesion: mean_cohesion(&matrix, &data.world, &keys, m)?,
        shuffled_cohesion: mean_cohesion(&shuffled, &data.world, &keys, m)?,
        keys: reports,
    })
}

/// Specs from the configured file, or every withheld question the model
/// answers wrongly with a single token.
pub fn edit_specs(cfg: &LabConfig, data: &LabData, model: &Seq2SeqModel<f64>) -> Result<Vec<EditSpec>> {
    match &cfg.surgery.specs {
        Some(path) => read_edit_specs(open(path)?),
        None => wrong_answer_specs(model, &data.vocab, &data.withheld_qa, cfg.threads),
    }
}

pub fn edit_cases(data: &LabData, model: &Seq2SeqModel<f64>, specs: &[EditSpec]) -> Result<Vec<EditCase>> {
    build_edit_cases(model, &data.vocab, &data.all_questions(), specs)
}

/// Control questions for surgery: the base questions.
pub fn control_pool(data: &LabData) -> Result<Vec<Vec<usize>>> {
    data.base_qa.iter().map(|p| data.vocab.encode(&p.question)).collect()
}

pub fn sweep(cfg: &LabConfig, data: &LabData, model: &Seq2SeqModel<f64>, cases: &[EditCase]) -> Result<SweepResult> {
    sweep_lambda(
        model,
        cases,
        &cfg.surgery.lambdas,
        &control_pool(data)?,
        cfg.surgery.controls,
        derive_seed(cfg.seed, "controls"),
        cfg.threads,
    )
}
