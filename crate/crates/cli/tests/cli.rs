use std::path::Path;
use std::process::{Command, Output};

use catflow_cli::commands::{cmd_train, resolve_config, Overrides};
use catflow_cli::manifest::RunManifest;
use tempfile::TempDir;

fn catflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catflow")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

const TOY: &str = r#"
seed = 0

[dataset]
generator = "table"
classes = [2, 2, 2]
probs = [0.15, 0.10, 0.08, 0.12, 0.10, 0.10, 0.10, 0.25]
n_graphs = 400
held_out = 0

[model]
n_layers = 2
mlp_hidden = 32
time_embedding_dim = 8

[optimizer]
lr = 1e-3

[train]
total_steps = 500
batch_size = 64
"#;

const SMALL_GRAPHS: &str = r#"
[dataset]
n_graphs = 12
held_out = 8

[model]
n_layers = 1
hidden_node = 8
hidden_edge = 4
hidden_global = 8
n_heads = 2
time_embedding_dim = 4

[train]
total_steps = 6
batch_size = 4
checkpoint_every = 3

[integrator]
n_steps = 10
"#;

#[test]
fn generate_is_deterministic_and_sized() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[dataset]\nn_graphs = 100\nheld_out = 10\n");
    for out in ["a", "b"] {
        let o = catflow(&[
            "generate",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            &path(tmp.path(), out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(read(&a, "dataset.jsonl"), read(&b, "dataset.jsonl"));
    assert_eq!(read(&a, "held_out.jsonl"), read(&b, "held_out.jsonl"));
    let lines = String::from_utf8(read(&a, "dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 100);
    let ma = RunManifest::load(&a.join("manifest.json")).unwrap();
    let mb = RunManifest::load(&b.join("manifest.json")).unwrap();
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.seed, 7);
}

#[test]
fn rerunning_a_manifest_config_reproduces_outputs() {
    let tmp = TempDir::new().unwrap();
    let first = path(tmp.path(), "first");
    assert_eq!(code(&catflow(&["generate", "--seed", "3", "--out", &first])), 0);
    let m = RunManifest::load(&tmp.path().join("first/manifest.json")).unwrap();
    // The archived config names the first directory; redirect the rerun.
    let cfg = write(tmp.path(), "replay.toml", &m.config);
    let second = path(tmp.path(), "second");
    assert_eq!(code(&catflow(&["generate", "--config", &cfg, "--out", &second])), 0);
    let m2 = RunManifest::load(&tmp.path().join("second/manifest.json")).unwrap();
    assert_eq!(m.outputs, m2.outputs);
    assert_ne!(m.input_hash, m2.input_hash, "output_dir is part of the resolved config");
}

#[test]
fn invalid_configs_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = path(tmp.path(), "o");
    let bad = write(tmp.path(), "bad.toml", "[dataset]\ngenerator = \"erdos\"\n");
    let o = catflow(&["generate", "--config", &bad, "--out", &out]);
    assert_eq!(code(&o), 1);
    for name in ["community_small", "grid", "table", "file"] {
        assert!(stderr(&o).contains(name), "{}", stderr(&o));
    }
    let unknown = write(tmp.path(), "unknown.toml", "[model]\nwidth = 3\n");
    assert_eq!(code(&catflow(&["generate", "--config", &unknown, "--out", &out])), 1);
    let zero = write(tmp.path(), "zero.toml", "[model]\nn_layers = 0\n");
    assert_eq!(code(&catflow(&["train", "--config", &zero, "--out", &out])), 1);
    assert_eq!(
        code(&catflow(&["generate", "--config", &path(tmp.path(), "missing.toml")])),
        2
    );
    assert_eq!(code(&catflow(&["frobnicate"])), 1);
    assert!(!tmp.path().join("o").exists());
}

fn loss_column(dir: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(dir.join("loss.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["step", "t_mean", "loss", "lr", "clamps"]);
    r.records().map(|row| row.unwrap()[2].parse().unwrap()).collect()
}

#[test]
fn toy_training_starts_at_log_k_and_improves() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "toy.toml", TOY);
    let out = path(tmp.path(), "run");
    let o = catflow(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let losses = loss_column(&tmp.path().join("run"));
    assert_eq!(losses.len(), 500);
    assert!((losses[0] - 3.0 * 2f64.ln()).abs() < 1e-12);
    let tail: f64 = losses[450..].iter().sum::<f64>() / 50.0;
    assert!(tail < losses[0] - 0.1, "{} -> {tail}", losses[0]);
    assert!(tmp.path().join("run/checkpoint.bin").exists());
    assert!(tmp.path().join("run/config.toml").exists());
}

#[test]
fn resumed_training_matches_the_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.toml", SMALL_GRAPHS);
    let a = path(tmp.path(), "a");
    assert_eq!(code(&catflow(&["train", "--config", &cfg, "--out", &a])), 0);
    let a_dir = tmp.path().join("a");
    let full_log = read(&a_dir, "loss.csv");
    let full_ckpt = read(&a_dir, "checkpoint.bin");

    // Resume into a fresh directory.
    let b = path(tmp.path(), "b");
    let mid = path(&a_dir, "checkpoint-00000003.bin");
    let o = catflow(&["train", "--config", &cfg, "--out", &b, "--checkpoint", &mid]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b_dir = tmp.path().join("b");
    assert_eq!(read(&b_dir, "checkpoint.bin"), full_ckpt);
    assert_eq!(loss_column(&b_dir), loss_column(&a_dir)[3..]);

    // Resuming in place rewrites the log to exactly the straight run's.
    assert_eq!(
        code(&catflow(&[
            "train",
            "--config",
            &cfg,
            "--out",
            &a,
            "--checkpoint",
            &mid
        ])),
        0
    );
    assert_eq!(read(&a_dir, "loss.csv"), full_log);
    assert_eq!(read(&a_dir, "checkpoint.bin"), full_ckpt);
}

#[test]
fn diverging_run_keeps_the_last_good_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let text =
        format!("{SMALL_GRAPHS}\n[optimizer]\nlr = 1e300\n").replace("checkpoint_every = 3", "checkpoint_every = 1");
    let mut cfg = catflow_cli::config::RunConfig::from_toml(&text).unwrap();
    cfg.train.total_steps = 50;
    cfg.output_dir = Some(tmp.path().join("run"));
    let err = cmd_train(&cfg, None).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    let dir = tmp.path().join("run");
    assert!(!dir.join("checkpoint.bin").exists());
    let last_good = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("checkpoint-"))
        .count();
    assert!(last_good >= 1);
    assert!(dir.join("loss.csv").exists());
}

#[test]
fn sampling_is_reproducible_for_every_objective() {
    let tmp = TempDir::new().unwrap();
    for objective in ["catflow", "fm_baseline"] {
        let cfg = write(
            tmp.path(),
            "g.toml",
            &format!("objective = \"{objective}\"\n{SMALL_GRAPHS}"),
        );
        let run = path(tmp.path(), objective);
        assert_eq!(code(&catflow(&["train", "--config", &cfg, "--out", &run])), 0);
        let ckpt = path(&tmp.path().join(objective), "checkpoint.bin");
        let mut files = Vec::new();
        for (i, seed) in ["5", "5", "6"].iter().enumerate() {
            let out = path(tmp.path(), &format!("{objective}-s{i}"));
            let o = catflow(&[
                "sample",
                "--checkpoint",
                &ckpt,
                "--n",
                "7",
                "--seed",
                seed,
                "--out",
                &out,
            ]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            files.push(std::fs::read_to_string(tmp.path().join(format!("{objective}-s{i}/samples.jsonl"))).unwrap());
            assert!(tmp.path().join(format!("{objective}-s{i}/manifest.json")).exists());
        }
        assert_eq!(files[0], files[1]);
        assert_ne!(files[0], files[2]);
        assert_eq!(files[0].lines().count(), 7);
    }
    let missing = path(tmp.path(), "nope.bin");
    assert_eq!(
        code(&catflow(&[
            "sample",
            "--checkpoint",
            &missing,
            "--out",
            &path(tmp.path(), "x")
        ])),
        2
    );
}

#[test]
fn eval_of_a_set_against_itself() {
    let tmp = TempDir::new().unwrap();
    let data = path(tmp.path(), "data");
    assert_eq!(code(&catflow(&["generate", "--seed", "2", "--out", &data])), 0);
    let reference = path(&tmp.path().join("data"), "held_out.jsonl");
    let report = path(tmp.path(), "report");
    let o = catflow(&[
        "eval",
        "--reference",
        &reference,
        "--samples",
        &reference,
        "--out",
        &report,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);
    let mut r = csv::Reader::from_path(tmp.path().join("report/metrics.csv")).unwrap();
    let rows: Vec<(String, f64)> = r
        .records()
        .map(|row| {
            let row = row.unwrap();
            (row[0].to_string(), row[1].parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["degree", "clustering", "orbit", "uniqueness"]);
    for (_, v) in &rows[..3] {
        assert!(v.abs() < 1e-12);
    }
    let jsonl = std::fs::read_to_string(tmp.path().join("report/metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 4);

    let missing = path(tmp.path(), "missing.jsonl");
    let o = catflow(&["eval", "--reference", &reference, "--samples", &missing]);
    assert_ne!(code(&o), 0);
}

#[test]
fn verify_reports_every_check_and_flags_faults() {
    let o = catflow(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for name in [
        "mean_field_velocity",
        "gaussian_vfm_equals_fm",
        "loss_relation",
        "equivariance_marginals",
        "grad_graph_head",
        "oracle_ode",
    ] {
        assert!(text.contains(name), "{text}");
    }
    assert!(text.lines().all(|l| l.starts_with("PASS") && l.contains("measured")));

    let o = catflow(&["verify", "--inject-fault", "gaussian_vfm"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("FAIL")).count(), 1);
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("FAIL") && l.contains("gaussian_vfm_equals_fm")));
    assert_eq!(code(&catflow(&["verify", "--inject-fault", "everything"])), 1);
}

#[test]
fn ablation_grid_has_twelve_deterministic_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "ab.toml",
        &format!("{SMALL_GRAPHS}\n[ablate]\nsteps = 2\nn_samples = 3\n"),
    );
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = path(tmp.path(), run);
        let o = catflow(&["ablate", "--config", &cfg, "--out", &out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tables.push(std::fs::read_to_string(tmp.path().join(run).join("ablation.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let mut lines = tables[0].lines();
    assert_eq!(lines.next(), Some("data_fraction,n_layers,objective,score"));
    assert_eq!(lines.count(), 12);
}

#[test]
fn overrides_take_precedence() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "g.toml", SMALL_GRAPHS);
    let ov = Overrides {
        seed: Some(9),
        steps: Some(2),
        ..Overrides::default()
    };
    let resolved = resolve_config(Some(Path::new(&cfg)), &ov).unwrap();
    assert_eq!((resolved.seed, resolved.train.total_steps), (9, 2));
    let defaults = resolve_config(None, &Overrides::default()).unwrap();
    assert_eq!(defaults.train.total_steps, 100_000);
    assert_eq!(defaults.optimizer.lr, 2e-4);
    assert_eq!(defaults.optimizer.weight_decay, 1e-12);
    assert_eq!(defaults.train.ema_decay, 0.999);
    let toy = resolve_config(
        Some(Path::new(&write(
            tmp.path(),
            "t.toml",
            "[dataset]\ngenerator = \"table\"\nclasses = [2]\nprobs = [0.5, 0.5]\n",
        ))),
        &Overrides::default(),
    )
    .unwrap();
    assert_eq!(toy.train.total_steps, 20_000);
    assert_eq!(
        catflow_cli::config::RunConfig::from_toml(&resolved.to_toml()).unwrap(),
        resolved
    );
}
