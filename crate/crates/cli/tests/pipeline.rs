//! End-to-end pipeline smoke tests against the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_xted")
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn xted")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny-budget configuration: small model, short schedule, few episodes.
const TINY_CONFIG: &str = r#"
seed = 11

[env.source]
gravity_mult = 2.0

[collect]
episodes = 20

[schedule]
k_steps = 20
beta_min = 1e-3
beta_max = 0.15

[model]
horizon = 10
embed_multiplier = 2
n_s = 1
n_a = 1
n_r = 1
cond_dim = 16
mlp_ratio = 1

[train]
epochs = 5
batch_size = 32
conditional = true

[edit]
kappa = 0.5

[generate]
windows = 8

[bc]
grad_steps = 200

[eval]
episodes = 4
seeds = 2
"#;

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("xted.toml");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }
}

fn payload(path: &Path) -> Vec<u8> {
    xted_core::io::Dataset::payload_bytes(path).unwrap()
}

#[test]
fn full_pipeline_smoke_under_two_minutes() {
    let fx = Fixture::new();
    let t0 = Instant::now();

    let target = fx.path("target.xted");
    let source = fx.path("source.xted");
    let ckpt = fx.path("model.ckpt");
    let edited = fx.path("edited.xted");
    let generated = fx.path("generated.xted");
    let s4rl = fx.path("s4rl.xted");

    let out = run(
        &["--config", fx.cfg(), "collect", "--domain", "target", "--out", target.to_str().unwrap()],
        &[],
    );
    assert_ok(&out, "collect target");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2000 transitions"), "{stdout}");

    assert_ok(
        &run(
            &["--config", fx.cfg(), "collect", "--domain", "source", "--out", source.to_str().unwrap()],
            &[],
        ),
        "collect source",
    );

    assert_ok(
        &run(
            &["--config", fx.cfg(), "train", "--data", target.to_str().unwrap(), "--out", ckpt.to_str().unwrap()],
            &[],
        ),
        "train",
    );
    assert!(ckpt.exists());
    assert!(fx.path("model.metrics.csv").exists());
    let metrics = std::fs::read_to_string(fx.path("model.metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,loss,wall_ms"));
    assert_eq!(metrics.lines().count(), 1 + 5);

    assert_ok(
        &run(
            &[
                "--config", fx.cfg(), "edit",
                "--data", source.to_str().unwrap(),
                "--ckpt", ckpt.to_str().unwrap(),
                "--out", edited.to_str().unwrap(),
            ],
            &[],
        ),
        "edit",
    );

    assert_ok(
        &run(
            &[
                "--config", fx.cfg(), "generate",
                "--ckpt", ckpt.to_str().unwrap(),
                "--data", target.to_str().unwrap(),
                "--out", generated.to_str().unwrap(),
            ],
            &[],
        ),
        "generate",
    );

    assert_ok(
        &run(
            &["--config", fx.cfg(), "s4rl", "--data", target.to_str().unwrap(), "--out", s4rl.to_str().unwrap()],
            &[],
        ),
        "s4rl",
    );

    // four BC arms on equal budgets, then eval and report
    let arms: [(&str, Vec<&PathBuf>); 4] = [
        ("tgt", vec![&target]),
        ("tgt+src", vec![&target, &source]),
        ("tgt+s4rl", vec![&target, &s4rl]),
        ("tgt+edited_src", vec![&target, &edited]),
    ];
    let mut eval_csvs = Vec::new();
    for (arm, datas) in &arms {
        let policy = fx.path(&format!("policy_{arm}.bin"));
        let mut args = vec!["--config", fx.cfg(), "bc"];
        for d in datas {
            args.push("--data");
            args.push(d.to_str().unwrap());
        }
        args.push("--out");
        args.push(policy.to_str().unwrap());
        assert_ok(&run(&args, &[]), &format!("bc {arm}"));

        let eval_csv = fx.path(&format!("eval_{arm}.csv"));
        assert_ok(
            &run(
                &[
                    "--config", fx.cfg(), "eval",
                    "--policy", policy.to_str().unwrap(),
                    "--arm", arm,
                    "--out", eval_csv.to_str().unwrap(),
                ],
                &[],
            ),
            &format!("eval {arm}"),
        );
        eval_csvs.push(eval_csv);
    }

    let report = fx.path("report.csv");
    let mut args = vec!["--config", fx.cfg(), "report"];
    for e in &eval_csvs {
        args.push("--inputs");
        args.push(e.to_str().unwrap());
    }
    args.push("--out");
    args.push(report.to_str().unwrap());
    assert_ok(&run(&args, &[]), "report");

    // report recomputation: delta of tgt vs itself is 0
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "arm,seed,mean_return,std_return,delta_pct");
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 5);
        if f[0] == "tgt" {
            let d: f64 = f[4].parse().unwrap();
            assert_eq!(d, 0.0);
        }
    }
    assert!(fx.path("report.long.csv").exists());
    let long = std::fs::read_to_string(fx.path("report.long.csv")).unwrap();
    assert!(long.starts_with("arm,seed,metric,value"));

    // manifests exist beside outputs
    assert!(fx.path("model.ckpt.manifest.json").exists());
    assert!(fx.path("report.csv.manifest.json").exists());

    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "pipeline took {:.1}s, budget 120s",
        elapsed.as_secs_f64()
    );
    println!("pipeline smoke finished in {:.1}s", elapsed.as_secs_f64());
}

#[test]
fn collect_is_idempotent_in_payload_scope() {
    let fx = Fixture::new();
    let a = fx.path("a.xted");
    let b = fx.path("b.xted");
    for out in [&a, &b] {
        assert_ok(
            &run(
                &["--config", fx.cfg(), "collect", "--domain", "target", "--out", out.to_str().unwrap()],
                &[],
            ),
            "collect",
        );
    }
    assert_eq!(payload(&a), payload(&b));
}

#[test]
fn xted_seed_env_overrides_config_seed() {
    let fx = Fixture::new();
    let a = fx.path("a.xted");
    let b = fx.path("b.xted");
    assert_ok(
        &run(
            &["--config", fx.cfg(), "collect", "--domain", "target", "--out", a.to_str().unwrap()],
            &[("XTED_SEED", "999")],
        ),
        "collect seeded",
    );
    assert_ok(
        &run(
            &["--config", fx.cfg(), "collect", "--domain", "target", "--out", b.to_str().unwrap()],
            &[],
        ),
        "collect default",
    );
    assert_ne!(payload(&a), payload(&b));
}

#[test]
fn kappa_zero_edit_passes_payload_through() {
    let fx = Fixture::new();
    let zero_cfg = fx.path("zero.toml");
    std::fs::write(
        &zero_cfg,
        TINY_CONFIG.replace("kappa = 0.5", "kappa = 0.0"),
    )
    .unwrap();

    let target = fx.path("target.xted");
    let ckpt = fx.path("model.ckpt");
    let source = fx.path("source.xted");
    let edited = fx.path("edited.xted");
    for (domain, out) in [("target", &target), ("source", &source)] {
        assert_ok(
            &run(
                &["--config", fx.cfg(), "collect", "--domain", domain, "--out", out.to_str().unwrap()],
                &[],
            ),
            "collect",
        );
    }
    assert_ok(
        &run(
            &["--config", fx.cfg(), "train", "--data", target.to_str().unwrap(), "--out", ckpt.to_str().unwrap()],
            &[],
        ),
        "train",
    );
    assert_ok(
        &run(
            &[
                "--config", zero_cfg.to_str().unwrap(), "edit",
                "--data", source.to_str().unwrap(),
                "--ckpt", ckpt.to_str().unwrap(),
                "--out", edited.to_str().unwrap(),
            ],
            &[],
        ),
        "edit kappa 0",
    );
    assert_eq!(payload(&source), payload(&edited));
}

#[test]
fn exit_codes_reflect_error_classes() {
    let fx = Fixture::new();
    // unknown domain → config error (2)
    let out = run(
        &["--config", fx.cfg(), "collect", "--domain", "nowhere", "--out", fx.path("x.xted").to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // missing input file → I/O error (3)
    let out = run(
        &["--config", fx.cfg(), "train", "--data", fx.path("missing.xted").to_str().unwrap(), "--out", fx.path("m.ckpt").to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // unknown config key → config error (2)
    let bad = fx.path("bad.toml");
    std::fs::write(&bad, "seed = 1\nmystery = 4\n").unwrap();
    let out = run(
        &["--config", bad.to_str().unwrap(), "collect", "--domain", "target", "--out", fx.path("y.xted").to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_refuses_mixed_provenance_without_force() {
    let fx = Fixture::new();
    let other_cfg = fx.path("other.toml");
    std::fs::write(&other_cfg, TINY_CONFIG.replace("seed = 11", "seed = 12")).unwrap();

    // two eval-like CSVs from different runs: fabricate via bc+eval on tiny data
    let target = fx.path("target.xted");
    assert_ok(
        &run(
            &["--config", fx.cfg(), "collect", "--domain", "target", "--out", target.to_str().unwrap()],
            &[],
        ),
        "collect",
    );
    let policy = fx.path("p.bin");
    assert_ok(
        &run(
            &["--config", fx.cfg(), "bc", "--data", target.to_str().unwrap(), "--out", policy.to_str().unwrap()],
            &[],
        ),
        "bc",
    );
    let e1 = fx.path("e1.csv");
    let e2 = fx.path("e2.csv");
    assert_ok(
        &run(
            &["--config", fx.cfg(), "eval", "--policy", policy.to_str().unwrap(), "--arm", "tgt", "--out", e1.to_str().unwrap()],
            &[],
        ),
        "eval 1",
    );
    assert_ok(
        &run(
            &["--config", other_cfg.to_str().unwrap(), "eval", "--policy", policy.to_str().unwrap(), "--arm", "tgt+src", "--out", e2.to_str().unwrap()],
            &[],
        ),
        "eval 2",
    );

    let report = fx.path("r.csv");
    let out = run(
        &[
            "--config", fx.cfg(), "report",
            "--inputs", e1.to_str().unwrap(),
            "--inputs", e2.to_str().unwrap(),
            "--out", report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(
        &[
            "--config", fx.cfg(), "report",
            "--inputs", e1.to_str().unwrap(),
            "--inputs", e2.to_str().unwrap(),
            "--out", report.to_str().unwrap(),
            "--force",
        ],
        &[],
    );
    assert_ok(&out, "forced report");
}

#[test]
fn train_twice_yields_bit_identical_checkpoints() {
    let fx = Fixture::new();
    let target = fx.path("target.xted");
    assert_ok(
        &run(
            &["--config", fx.cfg(), "collect", "--domain", "target", "--out", target.to_str().unwrap()],
            &[],
        ),
        "collect",
    );
    let c1 = fx.path("m1.ckpt");
    let c2 = fx.path("m2.ckpt");
    for c in [&c1, &c2] {
        assert_ok(
            &run(
                &["--config", fx.cfg(), "train", "--data", target.to_str().unwrap(), "--out", c.to_str().unwrap()],
                &[],
            ),
            "train",
        );
    }
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
}
