// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommands over a run directory. Each writes a manifest before doing any
//! work, then its outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use nkb_core::surgery::{apply_surgery, evaluate_update, sample_controls, write_edit_specs};
use nkb_core::training::{load_checkpoint, save_checkpoint, Checkpoint, MetricRecord, PhaseReport};
use nkb_core::rng::derive_seed;
use nkb_core::{Error, Result};

use crate::config::LabConfig;
use crate::lab::{self, create, LabData, DATA_FILES};

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const INJECT_CKPT: &str = "inject.ckpt";
pub const MANIFEST_VERSION: u32 = 1;

/// Where a command runs and how it reports progress.
pub struct Lab {
    pub cfg: LabConfig,
    pub out: PathBuf,
    /// Echo every n-th metric record to stderr; 0 is silent.
    pub echo_every: usize,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Paths inside the run directory are recorded relative to it.
fn display_rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

impl Lab {
    pub fn new(cfg: LabConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        std::fs::create_dir_all(&out).map_err(|e| Error::data(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self {
            cfg,
            out,
            echo_every: 0,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_inputs(&self) -> Vec<PathBuf> {
        DATA_FILES.iter().map(|f| self.path(f)).collect()
    }

    /// Records the command, resolved config, input digests and outputs.
    pub fn write_manifest(&self, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let mut w = create(&self.path(&format!("manifest-{command}.txt")))?;
        writeln!(w, "nkb-run-manifest version={MANIFEST_VERSION}")?;
        writeln!(w, "subcommand = {command}")?;
        writeln!(w, "artifact_version = {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "master_seed = {}", self.cfg.seed)?;
        for p in inputs {
            writeln!(w, "input {} sha256={}", display_rel(&self.out, p), sha256_file(p)?)?;
        }
        for p in outputs {
            writeln!(w, "output {}", display_rel(&self.out, p))?;
        }
        writeln!(w, "[config]")?;
        write!(w, "{}", self.cfg.resolved())?;
        w.flush()?;
        Ok(())
    }

    fn load_data(&self) -> Result<LabData> {
        LabData::load(&self.out)
    }

    fn metrics_sink(&self) -> (Vec<MetricRecord>, usize) {
        (Vec::new(), self.echo_every)
    }

    fn write_metrics(&self, name: &str, records: &[MetricRecord]) -> Result<PathBuf> {
        let path = self.path(&format!("metrics-{name}.txt"));
        let mut w = create(&path)?;
        for r in records {
            writeln!(w, "{r}")?;
        }
        w.flush()?;
        Ok(path)
    }

    /// Runs a training phase, then saves the checkpoint and metrics even when
    /// the phase stopped early on divergence.
    fn train(
        &self,
        mut ckpt: Checkpoint<f64>,
        out: &Path,
        metrics_name: &str,
        run: impl FnOnce(&mut Checkpoint<f64>, &mut dyn FnMut(&MetricRecord)) -> Result<PhaseReport>,
    ) -> Result<PhaseReport> {
        let (mut records, every) = self.metrics_sink();
        let result = run(&mut ckpt, &mut |m: &MetricRecord| {
            if every > 0 && m.step % every == 0 {
                eprintln!("{m}");
            }
            records.push(m.clone());
        });
        save_checkpoint(out, &ckpt)?;
        self.write_metrics(metrics_name, &records)?;
        result
    }

    pub fn gen_data(&self) -> Result<LabData> {
        self.write_manifest("gen-data", &[], &self.data_inputs())?;
        let data = LabData::generate(&self.cfg)?;
        data.write(&self.out)?;
        Ok(data)
    }

    /// Pretrains from scratch, or resumes `resume`.
    pub fn pretrain(&self, resume: Option<&Path>) -> Result<(PathBuf, PhaseReport)> {
        let out = self.path(PRETRAIN_CKPT);
        let mut inputs = self.data_inputs();
        inputs.extend(resume.map(Path::to_path_buf));
        self.write_manifest("pretrain", &inputs, &[out.clone(), self.path("metrics-pretrain.txt")])?;
        let data = self.load_data()?;
        let resume = resume.map(load_checkpoint::<f64>).transpose()?;
        let ckpt = lab::pretrain_start(&self.cfg, &data, resume)?;
        let report = self.train(ckpt, &out, "pretrain", |c, m| lab::run_pretrain(&self.cfg, &data, c, m))?;
        Ok((out, report))
    }

    pub fn inject(&self, base: &Path) -> Result<(PathBuf, PhaseReport)> {
        let out = self.path(INJECT_CKPT);
        let mut inputs = self.data_inputs();
        inputs.push(base.to_path_buf());
        self.write_manifest("inject", &inputs, &[out.clone(), self.path("metrics-inject.txt")])?;
        let data = self.load_data()?;
        let ckpt = lab::inject_start(&self.cfg, load_checkpoint(base)?)?;
        let report = self.train(ckpt, &out, "inject", |c, m| lab::run_inject(&self.cfg, &data, c, m))?;
        Ok((out, report))
    }

    /// QA fine-tuning of `source` into `finetune-<stem>.ckpt`.
    pub fn finetune(&self, source: &Path) -> Result<(PathBuf, PhaseReport)> {
        let name = format!("finetune-{}", stem(source));
        let out = self.path(&format!("{name}.ckpt"));
        let mut inputs = self.data_inputs();
        inputs.push(source.to_path_buf());
        self.write_manifest("finetune", &inputs, &[out.clone(), self.path(&format!("metrics-{name}.txt"))])?;
        let data = self.load_data()?;
        let ckpt = lab::continue_start(load_checkpoint(source)?, "finetune");
        let report = self.train(ckpt, &out, &name, |c, m| lab::run_finetune(&self.cfg, &data, c, m))?;
        Ok((out, report))
    }

    /// Proxy-task fine-tuning of `source` into `proxy-<stem>.ckpt`.
    pub fn proxy_finetune(&self, source: &Path) -> Result<(PathBuf, PhaseReport)> {
        let name = format!("proxy-{}", stem(source));
        let out = self.path(&format!("{name}.ckpt"));
        self.write_manifest(
            "proxy-finetune",
            &[source.to_path_buf()],
            &[out.clone(), self.path(&format!("metrics-{name}.txt"))],
        )?;
        let ckpt = lab::continue_start(load_checkpoint(source)?, "proxy");
        let report = self.train(ckpt, &out, &name, |c, m| lab::run_proxy_finetune(&self.cfg, c, m))?;
        Ok((out, report))
    }

    pub fn eval(&self, ckpt: &Path) -> Result<lab::EvalReport> {
        let name = stem(ckpt);
        let report_path = self.path(&format!("eval-{name}.txt"));
        let pred_path = self.path(&format!("predictions-{name}.tsv"));
        let mut inputs = self.data_inputs();
        inputs.push(ckpt.to_path_buf());
        self.write_manifest("eval", &inputs, &[report_path.clone(), pred_path.clone()])?;
        let data = self.load_data()?;
        let model = load_checkpoint::<f64>(ckpt)?.model;
        let report = lab::evaluate(&self.cfg, &data, &model)?;
        let mut w = create(&report_path)?;
        write!(w, "checkpoint = {}\n{report}", display_rel(&self.out, ckpt))?;
        w.flush()?;
        let mut w = create(&pred_path)?;
        report.write_predictions(&mut w)?;
        w.flush()?;
        Ok(report)
    }

    fn mounted_model(&self, ckpt: &Path) -> Result<nkb_core::Seq2SeqModel> {
        let model = load_checkpoint::<f64>(ckpt)?.model;
        if !model.is_mounted() {
            return Err(Error::contract(format!(
                "{} has no knowledge bank to probe or edit",
                ckpt.display()
            )));
        }
        Ok(model)
    }

    pub fn probe_values(&self, ckpt: &Path) -> Result<lab::ValueProbe> {
        let out = self.path("probe-values.txt");
        let mut inputs = self.data_inputs();
        inputs.push(ckpt.to_path_buf());
        self.write_manifest("probe-values", &inputs, &[out.clone()])?;
        let data = self.load_data()?;
        let model = self.mounted_model(ckpt)?;
        let probe = lab::probe_values(&self.cfg, &data, &model)?;
        let mut w = create(&out)?;
        write!(w, "{probe}")?;
        w.flush()?;
        Ok(probe)
    }

    pub fn probe_keys(&self, ckpt: &Path) -> Result<lab::KeyProbe> {
        let out = self.path("probe-keys.txt");
        let mut inputs = self.data_inputs();
        inputs.push(ckpt.to_path_buf());
        self.write_manifest("probe-keys", &inputs, &[out.clone()])?;
        let data = self.load_data()?;
        let model = self.mounted_model(ckpt)?;
        let probe = lab::probe_keys(&self.cfg, &data, &model)?;
        let mut w = create(&out)?;
        write!(w, "{probe}")?;
        w.flush()?;
        Ok(probe)
    }

    fn spec_inputs(&self, ckpt: &Path) -> Vec<PathBuf> {
        let mut inputs = self.data_inputs();
        inputs.push(ckpt.to_path_buf());
        inputs.extend(self.cfg.surgery.specs.clone());
        inputs
    }

    /// Applies every edit at `surgery.lambda`. Each edit is scored on its own
    /// copy; `edited.ckpt` carries all of them applied in order.
    pub fn edit(&self, ckpt: &Path) -> Result<PathBuf> {
        let report_path = self.path("edit-report.tsv");
        let specs_path = self.path("edits.tsv");
        let out = self.path("edited.ckpt");
        self.write_manifest(
            "edit",
            &self.spec_inputs(ckpt),
            &[specs_path.clone(), report_path.clone(), out.clone()],
        )?;
        let data = self.load_data()?;
        let model = self.mounted_model(ckpt)?;
        let specs = lab::edit_specs(&self.cfg, &data, &model)?;
        let cases = lab::edit_cases(&data, &model, &specs)?;
        let pool = lab::control_pool(&data)?;
        let answers = nkb_core::par::map_chunks(&pool, 64, self.cfg.threads, |c| {
            Ok(model
                .greedy_decode_prompted(c, &nkb_core::training::QA_PROMPT, nkb_core::factworld::MAX_ANSWER_TOKENS + 1)?
                .into_iter()
                .map(|d| d.tokens)
                .collect())
        })?;
        let seed = derive_seed(self.cfg.seed, "controls");
        let mut w = create(&report_path)?;
        writeln!(w, "edit\tquestion_id\tslot\tlambda\toriginal\ttarget\tsuccess\tdestroyed\tcontrols")?;
        let mut edited = model.clone();
        for case in &cases {
            let controls = sample_controls(&pool, &case.question, self.cfg.surgery.controls, seed, case.id);
            let qs: Vec<Vec<usize>> = controls.iter().map(|&i| pool[i].clone()).collect();
            let before: Vec<Vec<usize>> = controls.iter().map(|&i| answers[i].clone()).collect();
            let op = case.op(self.cfg.surgery.lambda);
            let o = evaluate_update(&model, &op, &case.question, &qs, &before)?;
            let word = |t: usize| data.vocab.word(t).unwrap_or("?").to_string();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                case.id,
                case.fact_id,
                case.slot,
                op.lambda,
                word(case.original),
                word(case.target),
                o.success,
                o.destroyed,
                o.controls
            )?;
            apply_surgery(&mut edited, &op)?;
        }
        w.flush()?;
        let mut s = create(&specs_path)?;
        write_edit_specs(&mut s, &specs)?;
        s.flush()?;
        save_checkpoint(&out, &Checkpoint::new(edited))?;
        Ok(out)
    }

    pub fn sweep(&self, ckpt: &Path) -> Result<nkb_core::surgery::SweepResult> {
        let table = self.path("sweep.txt");
        let outcomes = self.path("sweep-outcomes.tsv");
        let specs_path = self.path("edits.tsv");
        self.write_manifest(
            "sweep",
            &self.spec_inputs(ckpt),
            &[specs_path.clone(), table.clone(), outcomes.clone()],
        )?;
        let data = self.load_data()?;
        let model = self.mounted_model(ckpt)?;
        let specs = lab::edit_specs(&self.cfg, &data, &model)?;
        let cases = lab::edit_cases(&data, &model, &specs)?;
        let result = lab::sweep(&self.cfg, &data, &model, &cases)?;
        let mut s = create(&specs_path)?;
        write_edit_specs(&mut s, &specs)?;
        s.flush()?;
        let mut w = create(&table)?;
        writeln!(w, "edits = {}", cases.len())?;
        write!(w, "{result}")?;
        w.flush()?;
        let mut w = create(&outcomes)?;
        writeln!(w, "edit\tquestion_id\tslot\tlambda\tsuccess\tdestroyed\tcontrols")?;
        for (id, lambda, o) in &result.outcomes {
            let c = &cases[*id];
            writeln!(w, "{id}\t{}\t{}\t{lambda}\t{}\t{}\t{}", c.fact_id, c.slot, o.success, o.destroyed, o.controls)?;
        }
        w.flush()?;
        Ok(result)
    }

    /// gen-data, pretrain, inject, QA and proxy fine-tuning of both the base
    /// and the injected model, evaluation, probes and the surgery sweep.
    pub fn run_all(&self) -> Result<PipelineOutputs> {
        self.gen_data()?;
        let (pre, _) = self.pretrain(None)?;
        let (inj, _) = self.inject(&pre)?;
        let (base_ft, _) = self.finetune(&pre)?;
        let (nkb_ft, _) = self.finetune(&inj)?;
        let (base_proxy, _) = self.proxy_finetune(&pre)?;
        let (nkb_proxy, _) = self.proxy_finetune(&inj)?;
        for c in [&pre, &base_ft, &nkb_ft, &base_proxy, &nkb_proxy] {
            self.eval(c)?;
        }
        self.probe_values(&nkb_ft)?;
        self.probe_keys(&nkb_ft)?;
        self.sweep(&nkb_ft)?;
        Ok(PipelineOutputs {
            pretrain: pre,
            inject: inj,
            base_finetune: base_ft,
            nkb_finetune: nkb_ft,
            base_proxy,
            nkb_proxy,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutputs {
    pub pretrain: PathBuf,
    pub inject: PathBuf,
    pub base_finetune: PathBuf,
    pub nkb_finetune: PathBuf,
    pub base_proxy: PathBuf,
    pub nkb_proxy: PathBuf,
}
