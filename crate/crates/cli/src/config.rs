// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lab-wide configuration resolved from a flat `key = value` file.

use std::path::PathBuf;
use std::str::FromStr;

use nkb_core::config::Settings;
use nkb_core::factworld::WorldConfig;
use nkb_core::model::{ModelConfig, NkbInit, NkbSite};
use nkb_core::probes::SlotRanking;
use nkb_core::rng::derive_seed;
use nkb_core::surgery::{DEFAULT_CONTROLS, LAMBDA_GRID};
use nkb_core::training::{ProxyTask, Schedule, TrainConfig};
use nkb_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct InjectConfig {
    pub train: TrainConfig,
    /// Copies of each new-fact statement in the injection corpus.
    pub new_repeat: usize,
    /// Add the base corpus to the injection corpus.
    pub mix_base: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Base QA pairs used for training; the rest are held out.
    pub qa_train: usize,
    /// Mix masked-span replay of every corpus the model has seen into the QA
    /// training set.
    pub replay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyConfig {
    pub task: ProxyTask,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Tokens listed per value vector.
    pub k: usize,
    /// Slots reported; 0 means all.
    pub top_n: usize,
    /// Questions listed per key.
    pub m: usize,
    pub ranking: SlotRanking,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryConfig {
    pub lambdas: Vec<f64>,
    pub controls: usize,
    /// Step size used by `edit`.
    pub lambda: f64,
    /// Edit spec file; when absent, edits are every withheld question the
    /// model answers wrongly with a single token.
    pub specs: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub seed: u64,
    pub threads: usize,
    pub world: WorldConfig,
    /// Vocabulary size is filled in from the generated data.
    pub model: ModelConfig,
    pub nkb_dim: usize,
    pub nkb_site: NkbSite,
    pub nkb_init: NkbInit,
    pub pretrain: TrainConfig,
    pub inject: InjectConfig,
    pub finetune: FinetuneConfig,
    pub proxy: ProxyConfig,
    pub probe: ProbeConfig,
    pub surgery: SurgeryConfig,
}

fn train(max_steps: usize, warmup_steps: usize, peak_lr: f64, dropout: f64) -> TrainConfig {
    TrainConfig {
        max_steps,
        warmup_steps,
        peak_lr,
        dropout,
        ..TrainConfig::default()
    }
}

impl LabConfig {
    /// Desk defaults under master seed `seed`.
    pub fn desk(seed: u64) -> Self {
        let model = ModelConfig::desk(0);
        let mut cfg = Self {
            seed,
            threads: 1,
            world: WorldConfig {
                seed,
                ..WorldConfig::default()
            },
            nkb_site: model.nkb_site,
            model,
            nkb_dim: 64,
            nkb_init: NkbInit::default(),
            pretrain: train(6000, 100, 3e-3, 0.0),
            inject: InjectConfig {
                train: train(8000, 50, 3e-3, 0.0),
                new_repeat: 3,
                mix_base: true,
            },
            finetune: FinetuneConfig {
                train: train(3000, 50, 1e-3, 0.1),
                qa_train: 450,
                replay: true,
            },
            proxy: ProxyConfig {
                task: ProxyTask::Copy,
                train_examples: 40000,
                eval_examples: 1000,
                train: TrainConfig {
                    schedule: Schedule::LinearWithWarmup,
                    ..train(4000, 50, 2e-3, 0.0)
                },
            },
            probe: ProbeConfig {
                k: 5,
                top_n: 50,
                m: 5,
                ranking: SlotRanking::Usage,
            },
            surgery: SurgeryConfig {
                lambdas: LAMBDA_GRID.to_vec(),
                controls: DEFAULT_CONTROLS,
                lambda: 0.07,
                specs: None,
            },
        };
        cfg.derive_phase_seeds();
        cfg
    }

    fn derive_phase_seeds(&mut self) {
        let s = self.seed;
        self.pretrain.seed = derive_seed(s, "pretrain");
        self.inject.train.seed = derive_seed(s, "inject");
        self.finetune.train.seed = derive_seed(s, "finetune");
        self.proxy.train.seed = derive_seed(s, "proxy");
    }

    /// Reads every key of `settings` over the desk defaults. The master seed
    /// comes from `seed_flag` or the `seed` key and is required; phase seeds
    /// derive from it unless set explicitly. Unknown keys are errors.
    pub fn from_settings(mut s: Settings, seed_flag: Option<u64>) -> Result<Self> {
        let file_seed: Option<u64> = s.take("seed")?;
        let seed = match seed_flag.or(file_seed) {
            Some(v) => v,
            None => return Err(Error::config("missing required key `seed`")),
        };
        let mut c = Self::desk(seed);
        s.take_into("threads", &mut c.threads)?;
        if c.threads == 0 {
            return Err(Error::config("threads must be positive"));
        }

        let w = &mut c.world;
        s.take_into("world.seed", &mut w.seed)?;
        s.take_into("world.entities_per_category", &mut w.entities_per_category)?;
        s.take_into("world.n_relations", &mut w.n_relations)?;
        s.take_into("world.n_base_facts", &mut w.n_base_facts)?;
        s.take_into("world.n_new_facts", &mut w.n_new_facts)?;
        s.take_into("world.n_withheld_facts", &mut w.n_withheld_facts)?;

        let model_keys = s.section("model");
        if model_keys.iter().any(|(k, _)| k == "vocab_size" || k == "nkb_dim" || k == "nkb_site") {
            return Err(Error::config(
                "model.vocab_size comes from the data and the bank is set with nkb.*",
            ));
        }
        let mut kv: Vec<(&str, &str)> = model_keys.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        kv.push(("vocab_size", "5"));
        let layers = match model_keys.iter().find(|(k, _)| k == "num_layers") {
            Some((_, v)) => v
                .parse::<usize>()
                .map_err(|_| Error::config(format!("key `model.num_layers`: cannot parse {v:?}")))?,
            None => c.model.num_layers,
        };
        // Placeholder site inside the requested stack; the real one is `nkb.site`.
        let site = NkbSite::last_decoder(layers.max(1)).to_string();
        kv.push(("nkb_site", &site));
        c.model = ModelConfig::from_kv(kv)?;
        c.model.vocab_size = 0;
        c.nkb_site = NkbSite::last_decoder(c.model.num_layers);
        s.mark_section_used("model");

        s.take_into("nkb.dim", &mut c.nkb_dim)?;
        if let Some(site) = s.take_raw("nkb.site") {
            c.nkb_site = NkbSite::parse(&site)
                .ok_or_else(|| Error::config(format!("key `nkb.site`: cannot parse {site:?}")))?;
        }
        s.take_into("nkb.key_std", &mut c.nkb_init.key_std)?;
        s.take_into("nkb.value_std", &mut c.nkb_init.value_std)?;
        if c.nkb_dim == 0 {
            return Err(Error::config("nkb.dim must be positive"));
        }

        c.pretrain.apply_settings(&mut s, "pretrain")?;
        c.inject.train.apply_settings(&mut s, "inject")?;
        s.take_into("inject.new_repeat", &mut c.inject.new_repeat)?;
        s.take_into("inject.mix_base", &mut c.inject.mix_base)?;
        c.finetune.train.apply_settings(&mut s, "finetune")?;
        s.take_into("finetune.qa_train", &mut c.finetune.qa_train)?;
        s.take_into("finetune.replay", &mut c.finetune.replay)?;
        if c.finetune.qa_train == 0 {
            return Err(Error::config("finetune.qa_train must be positive"));
        }
        if c.inject.new_repeat == 0 {
            return Err(Error::config("inject.new_repeat must be positive"));
        }

        s.take_into("proxy.task", &mut c.proxy.task)?;
        s.take_into("proxy.train_examples", &mut c.proxy.train_examples)?;
        s.take_into("proxy.eval_examples", &mut c.proxy.eval_examples)?;
        c.proxy.train.apply_settings(&mut s, "proxy.finetune")?;

        s.take_into("probe.k", &mut c.probe.k)?;
        s.take_into("probe.top_n", &mut c.probe.top_n)?;
        s.take_into("probe.m", &mut c.probe.m)?;
        if let Some(r) = s.take_raw("probe.ranking") {
            c.probe.ranking = parse_ranking(&r, c.seed)?;
        }

        if let Some(l) = s.take_raw("surgery.lambdas") {
            c.surgery.lambdas = parse_list(&l, "surgery.lambdas")?;
            if c.surgery.lambdas.is_empty() {
                return Err(Error::config("surgery.lambdas must not be empty"));
            }
        }
        s.take_into("surgery.controls", &mut c.surgery.controls)?;
        s.take_into("surgery.lambda", &mut c.surgery.lambda)?;
        if let Some(p) = s.take_raw("surgery.specs") {
            c.surgery.specs = Some(PathBuf::from(p));
        }
        s.finish()?;
        Ok(c)
    }

    /// Every setting with defaults materialized, as `key = value` text that
    /// [`Self::from_settings`] reads back to an equal config.
    pub fn resolved(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("threads".into(), self.threads.to_string()),
            ("world.seed".into(), self.world.seed.to_string()),
            (
                "world.entities_per_category".into(),
                self.world.entities_per_category.to_string(),
            ),
            ("world.n_relations".into(), self.world.n_relations.to_string()),
            ("world.n_base_facts".into(), self.world.n_base_facts.to_string()),
            ("world.n_new_facts".into(), self.world.n_new_facts.to_string()),
            ("world.n_withheld_facts".into(), self.world.n_withheld_facts.to_string()),
        ];
        for (k, v) in self.model.to_kv() {
            if !matches!(k.as_str(), "vocab_size" | "nkb_dim" | "nkb_site" | "ffn_dim") {
                kv.push((format!("model.{k}"), v));
            }
        }
        kv.push(("nkb.dim".into(), self.nkb_dim.to_string()));
        kv.push(("nkb.site".into(), self.nkb_site.to_string()));
        kv.push(("nkb.key_std".into(), format!("{:?}", self.nkb_init.key_std)));
        kv.push(("nkb.value_std".into(), format!("{:?}", self.nkb_init.value_std)));
        kv.extend(self.pretrain.to_kv("pretrain"));
        kv.extend(self.inject.train.to_kv("inject"));
        kv.push(("inject.new_repeat".into(), self.inject.new_repeat.to_string()));
        kv.push(("inject.mix_base".into(), self.inject.mix_base.to_string()));
        kv.extend(self.finetune.train.to_kv("finetune"));
        kv.push(("finetune.qa_train".into(), self.finetune.qa_train.to_string()));
        kv.push(("finetune.replay".into(), self.finetune.replay.to_string()));
        kv.push(("proxy.task".into(), self.proxy.task.to_string()));
        kv.push(("proxy.train_examples".into(), self.proxy.train_examples.to_string()));
        kv.push(("proxy.eval_examples".into(), self.proxy.eval_examples.to_string()));
        kv.extend(self.proxy.train.to_kv("proxy.finetune"));
        kv.push(("probe.k".into(), self.probe.k.to_string()));
        kv.push(("probe.top_n".into(), self.probe.top_n.to_string()));
        kv.push(("probe.m".into(), self.probe.m.to_string()));
        kv.push((
            "probe.ranking".into(),
            match self.probe.ranking {
                SlotRanking::Usage => "usage".to_string(),
                SlotRanking::Random(s) => format!("random:{s}"),
            },
        ));
        let lambdas: Vec<String> = self.surgery.lambdas.iter().map(|l| l.to_string()).collect();
        kv.push(("surgery.lambdas".into(), lambdas.join(",")));
        kv.push(("surgery.controls".into(), self.surgery.controls.to_string()));
        kv.push(("surgery.lambda".into(), self.surgery.lambda.to_string()));
        if let Some(p) = &self.surgery.specs {
            kv.push(("surgery.specs".into(), p.display().to_string()));
        }
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Model config for a vocabulary of `vocab_size` tokens, bank unmounted.
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            nkb_dim: 0,
            nkb_site: self.nkb_site,
            ..self.model.clone()
        }
    }
}

fn parse_ranking(s: &str, seed: u64) -> Result<SlotRanking> {
    match s {
        "usage" => Ok(SlotRanking::Usage),
        "random" => Ok(SlotRanking::Random(derive_seed(seed, "probe"))),
        _ => match s.strip_prefix("random:").map(u64::from_str) {
            Some(Ok(v)) => Ok(SlotRanking::Random(v)),
            _ => Err(Error::config(format!(
                "key `probe.ranking`: expected usage, random or random:<seed>, got {s:?}"
            ))),
        },
    }
}

fn parse_list(s: &str, key: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("key `{key}`: cannot parse {x:?}")))
        })
        .collect()
}
