// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nkb_core::training::{load_checkpoint, param_hashes, MetricRecord};

const TINY: &str = "\
world.entities_per_category = 12
world.n_relations = 4
world.n_base_facts = 30
world.n_new_facts = 8
world.n_withheld_facts = 4
model.num_layers = 1
model.model_dim = 16
model.num_heads = 2
nkb.dim = 8
pretrain.max_steps = 150
pretrain.warmup_steps = 10
pretrain.batch_size = 8
inject.max_steps = 100
inject.warmup_steps = 10
inject.batch_size = 8
finetune.max_steps = 200
finetune.warmup_steps = 10
finetune.batch_size = 8
finetune.qa_train = 25
proxy.train_examples = 40
proxy.eval_examples = 20
proxy.finetune.max_steps = 4
proxy.finetune.warmup_steps = 1
proxy.finetune.batch_size = 8
probe.top_n = 5
surgery.controls = 3
";

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("lab.cfg");
        std::fs::write(&config, format!("{TINY}{extra}")).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn nkb(&self, args: &[&str]) -> Output {
        let out = self.out();
        Command::new(env!("CARGO_BIN_EXE_nkb"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.nkb(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn path(&self, name: &str) -> String {
        self.out().join(name).display().to_string()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

/// Metric files carry wall-clock times; everything else must match exactly.
fn without_wall_time(name: &str, bytes: &[u8]) -> Vec<u8> {
    if !name.starts_with("metrics-") {
        return bytes.to_vec();
    }
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| l.split(' ').filter(|f| !f.starts_with("wall_time=")).collect::<Vec<_>>().join(" ") + "\n")
        .collect::<String>()
        .into_bytes()
}

#[test]
fn gen_data_is_reproducible() {
    let a = Run::new("seed = 5\n");
    let b = Run::new("seed = 5\n");
    a.ok(&["gen-data"]);
    b.ok(&["gen-data"]);
    let (fa, fb) = (files(&a.out()), files(&b.out()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        if name.starts_with("manifest") {
            continue;
        }
        assert_eq!(bytes, &fb[name], "{name}");
    }
}

#[test]
fn missing_seed_is_a_usage_error_naming_the_key() {
    let r = Run::new("");
    let o = r.nkb(&["gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn seed_flag_satisfies_the_requirement() {
    let r = Run::new("");
    let o = r.nkb(&["gen-data", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let r = Run::new("seed = 1\npretrain.max_stepz = 3\n");
    let o = r.nkb(&["gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("max_stepz"), "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_data_error() {
    let r = Run::new("seed = 1\n");
    let o = r.nkb(&["pretrain"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn default_world_has_six_hundred_facts() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nkb"))
        .args(["gen-data", "--seed", "0", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let count = |f: &str| {
        std::fs::read_to_string(dir.path().join(f))
            .unwrap()
            .lines()
            .filter(|l| !l.is_empty())
            .count()
    };
    assert_eq!(count("qa-base.tsv") + count("qa-new.tsv"), 600);
}

#[test]
fn divergence_exits_with_code_three_and_keeps_a_checkpoint() {
    let r = Run::new("seed = 2\npretrain.peak_lr = 1e200\npretrain.clip_norm = 1e300\n");
    r.ok(&["gen-data"]);
    let o = r.nkb(&["pretrain"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let ckpt = load_checkpoint::<f64>(Path::new(&r.path("pretrain.ckpt"))).unwrap();
    assert!(ckpt.model.named_params().iter().all(|(_, t)| t.is_finite()));
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let whole = Run::new("seed = 4\n");
    whole.ok(&["gen-data"]);
    whole.ok(&["pretrain"]);

    let split = Run::new("seed = 4\npretrain.max_steps = 60\n");
    split.ok(&["gen-data"]);
    split.ok(&["pretrain"]);
    let first = split.out().join("first.ckpt");
    std::fs::rename(split.path("pretrain.ckpt"), &first).unwrap();
    std::fs::write(&split.config, format!("{TINY}seed = 4\n")).unwrap();
    split.ok(&["pretrain", "--checkpoint", first.to_str().unwrap()]);

    assert_eq!(
        std::fs::read(whole.path("pretrain.ckpt")).unwrap(),
        std::fs::read(split.path("pretrain.ckpt")).unwrap()
    );
}

#[test]
fn probing_an_unmounted_checkpoint_is_refused() {
    let r = Run::new("seed = 6\n");
    r.ok(&["gen-data"]);
    r.ok(&["pretrain"]);
    let o = r.nkb(&["probe-values", "--checkpoint", &r.path("pretrain.ckpt")]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("knowledge bank"), "{}", stderr(&o));
}

#[test]
fn staged_pipeline_reports() {
    let r = Run::new("seed = 7\n");
    r.ok(&["gen-data"]);
    r.ok(&["pretrain"]);
    r.ok(&["inject"]);

    // Only the bank differs between the base and the injected checkpoint.
    let base = load_checkpoint::<f64>(Path::new(&r.path("pretrain.ckpt"))).unwrap();
    let inj = load_checkpoint::<f64>(Path::new(&r.path("inject.ckpt"))).unwrap();
    let before: BTreeMap<_, _> = param_hashes(&base.model).into_iter().collect();
    for (name, hash) in param_hashes(&inj.model) {
        match before.get(&name) {
            Some(h) => assert_eq!(h, &hash, "{name} changed"),
            None => assert!(name.starts_with("nkb.")),
        }
    }

    r.ok(&["finetune", "--checkpoint", &r.path("inject.ckpt")]);
    let ft = r.path("finetune-inject.ckpt");
    let eval = r.ok(&["eval", "--checkpoint", &ft]);
    assert!(eval.contains("new"), "{eval}");

    let values = std::fs::read_to_string({
        r.ok(&["probe-values", "--checkpoint", &ft]);
        r.path("probe-values.txt")
    })
    .unwrap();
    assert_eq!(values.lines().filter(|l| l.starts_with("slot=")).count(), 5);

    r.ok(&["probe-keys", "--checkpoint", &ft]);
    r.ok(&["sweep", "--checkpoint", &ft]);
    let sweep = std::fs::read_to_string(r.path("sweep.txt")).unwrap();
    let rows: Vec<&str> = sweep.lines().filter(|l| l.starts_with("0.")).collect();
    assert_eq!(rows.len(), 5, "{sweep}");

    for name in ["pretrain", "inject", "finetune-inject"] {
        let text = std::fs::read_to_string(r.path(&format!("metrics-{name}.txt"))).unwrap();
        assert!(!text.is_empty());
        for line in text.lines() {
            assert!(MetricRecord::parse(line).is_some(), "{line}");
        }
    }

    let manifest = std::fs::read_to_string(r.path("manifest-inject.txt")).unwrap();
    assert!(manifest.contains("subcommand = inject"));
    assert!(manifest.contains("input pretrain.ckpt sha256="));
    assert!(manifest.contains("master_seed = 7"));
    assert!(!manifest.contains(&r.out().display().to_string()));
}

#[test]
fn run_all_is_deterministic() {
    let a = Run::new("seed = 8\n");
    let b = Run::new("seed = 8\n");
    a.ok(&["run-all"]);
    b.ok(&["run-all", "--threads", "2"]);
    let (fa, fb) = (files(&a.out()), files(&b.out()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        if name.starts_with("manifest") {
            // Differ only in the thread count.
            continue;
        }
        assert_eq!(without_wall_time(name, bytes), without_wall_time(name, &fb[name]), "{name}");
    }
}
