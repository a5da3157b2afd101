use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metadg::cli::{checkpoint_dir, RunConfig, LOSS_HISTORY_HEADER};
use metadg::datagen::{dataset_digest, synth_domains, SynthSpec};
use metadg::metalearn::{load_checkpoint, load_f32_params, save_checkpoint, MetaConfig, Variant};
use metadg::nets::Network;
use metadg::protocol::AblationPlan;
use metadg::verify::fixtures::micro_net_config;
use tempfile::TempDir;

fn metadg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metadg")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn micro_spec(side: usize, per_class: usize) -> SynthSpec {
    let mut spec = SynthSpec::default();
    spec.image_shape = [3, side, side];
    spec.depth_shape = [side / 2, side / 2];
    for d in &mut spec.domains {
        d.n_real = per_class;
        d.n_fake = per_class;
    }
    spec
}

fn micro_config(dir: &Path, iters: u64, variant: Variant) -> RunConfig {
    RunConfig {
        net: micro_net_config(3),
        meta: MetaConfig { alpha: 0.02, batch_per_domain: 4, iters, variant, seed: 11, ..MetaConfig::default() },
        dataset: None,
        synth: Some(micro_spec(8, 20)),
        out: Some(dir.join("run")),
        leave_out: Some("kiosk".into()),
        checkpoint_every: 10,
        ablation: AblationPlan::default(),
    }
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn history_column(run: &Path, col: usize) -> Vec<String> {
    let text = fs::read_to_string(run.join("loss_history.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOSS_HISTORY_HEADER));
    lines.map(|l| l.split(',').nth(col).unwrap().to_string()).collect()
}

fn metric(dir: &Path, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    v[key].as_f64().unwrap()
}

#[test]
fn synth_writes_identical_datasets_for_the_same_spec() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, serde_json::to_string(&micro_spec(8, 6)).unwrap()).unwrap();
    for out in ["a", "b"] {
        assert_ok(&metadg(&["synth", "--config", "spec.json", "--out", out], tmp.path()));
    }
    let (a, b) = (files_under(&tmp.path().join("a")), files_under(&tmp.path().join("b")));
    assert_eq!(a.len(), 1 + 4 * 3);
    assert_eq!(a, b);
}

#[test]
fn default_synth_writes_four_domains() {
    let tmp = TempDir::new().unwrap();
    let out = metadg(&["synth", "--out", "data"], tmp.path());
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    for name in ["studio", "office", "outdoor", "kiosk"] {
        assert!(stdout.contains(name));
        assert!(tmp.path().join("data").join(name).join("inputs.f32").exists());
    }
}

#[test]
fn malformed_json_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.json"), "{ \"meta\": ").unwrap();
    for cmd in ["synth", "train", "ablate"] {
        let args: Vec<&str> = match cmd {
            "synth" => vec![cmd, "--config", "bad.json", "--out", "x"],
            _ => vec![cmd, "--config", "bad.json"],
        };
        assert_eq!(metadg(&args, tmp.path()).status.code(), Some(2), "{cmd}");
    }
    let mut cfg = serde_json::to_value(micro_config(tmp.path(), 0, Variant::Finegrained)).unwrap();
    cfg["meta"]["alpah"] = 0.1.into();
    fs::write(tmp.path().join("typo.json"), cfg.to_string()).unwrap();
    let out = metadg(&["train", "--config", "typo.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));
    assert_eq!(metadg(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn unknown_leave_out_domain_fails() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig { leave_out: Some("nowhere".into()), ..micro_config(tmp.path(), 0, Variant::Finegrained) };
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ne!(metadg(&["train", "--config", path.to_str().unwrap()], tmp.path()).status.code(), Some(0));
}

#[test]
fn zero_iterations_checkpoint_init_params() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(tmp.path(), 0, Variant::Finegrained);
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ok(&metadg(&["train", "--config", path.to_str().unwrap()], tmp.path()));
    let run = tmp.path().join("run");
    let init = Network::new(cfg.net.clone()).unwrap().init_params();
    let ckpt = load_checkpoint(run.join("checkpoint")).unwrap();
    assert_eq!(ckpt.state.params, init);
    assert_eq!(ckpt.state.iter, 0);
    let f32s = load_f32_params(run.join("checkpoint")).unwrap();
    for (name, v) in &init.merged() {
        let expect: Vec<f64> = v.data().iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(f32s.require(name).unwrap().data(), &expect[..], "{name}");
    }
    assert!(history_column(&run, 0).is_empty());
    let echo = RunConfig::load(run.join("config.json")).unwrap();
    assert_eq!(echo, cfg);
}

#[test]
fn erm_runs_without_inner_updates() {
    let tmp = TempDir::new().unwrap();
    for (variant, expect) in [(Variant::Erm, "0"), (Variant::Finegrained, "2"), (Variant::Aggregated, "1")] {
        let dir = tmp.path().join(variant.to_string());
        fs::create_dir_all(&dir).unwrap();
        let path = write_config(&dir, "c.json", &micro_config(&dir, 5, variant));
        assert_ok(&metadg(&["train", "--config", path.to_str().unwrap()], &dir));
        let counts = history_column(&dir.join("run"), 4);
        assert_eq!(counts.len(), 5);
        assert!(counts.iter().all(|c| c == expect), "{variant}: {counts:?}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let full = micro_config(tmp.path(), 20, Variant::Finegrained);
    let full_path = write_config(tmp.path(), "full.json", &full);
    assert_ok(&metadg(&["train", "--config", full_path.to_str().unwrap(), "--out", "full"], tmp.path()));

    let half = MetaConfig { iters: 12, ..full.meta.clone() };
    let half_path = write_config(tmp.path(), "half.json", &RunConfig { meta: half, ..full.clone() });
    assert_ok(&metadg(&["train", "--config", half_path.to_str().unwrap(), "--out", "split"], tmp.path()));
    assert_ok(&metadg(
        &["train", "--config", full_path.to_str().unwrap(), "--out", "split", "--checkpoint", "split/checkpoint"],
        tmp.path(),
    ));

    let (a, b) = (tmp.path().join("full"), tmp.path().join("split"));
    for file in ["params.f64", "params.f32", "moments.f64"] {
        assert_eq!(
            fs::read(a.join("checkpoint").join(file)).unwrap(),
            fs::read(b.join("checkpoint").join(file)).unwrap(),
            "{file}"
        );
    }
    assert_eq!(load_checkpoint(a.join("checkpoint")).unwrap(), load_checkpoint(b.join("checkpoint")).unwrap());
    assert_eq!(fs::read(a.join("loss_history.csv")).unwrap(), fs::read(b.join("loss_history.csv")).unwrap());
    assert_eq!(
        load_checkpoint(checkpoint_dir(&a, 10)).unwrap().state,
        load_checkpoint(checkpoint_dir(&b, 10)).unwrap().state
    );
}

#[test]
fn resume_rejects_a_different_configuration() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(tmp.path(), 3, Variant::Finegrained);
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ok(&metadg(&["train", "--config", path.to_str().unwrap()], tmp.path()));
    let other = RunConfig { meta: MetaConfig { alpha: 0.5, iters: 6, ..cfg.meta.clone() }, ..cfg };
    let other_path = write_config(tmp.path(), "other.json", &other);
    let out =
        metadg(&["train", "--config", other_path.to_str().unwrap(), "--checkpoint", "run/checkpoint"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_with_zero_classifier_scores_one_half() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(tmp.path(), 0, Variant::Finegrained);
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ok(&metadg(&["train", "--config", path.to_str().unwrap()], tmp.path()));
    let mut ckpt = load_checkpoint(tmp.path().join("run/checkpoint")).unwrap();
    for name in ["M.fc.weight", "M.fc.bias"] {
        ckpt.state.params.m.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    save_checkpoint(&ckpt, tmp.path().join("zero")).unwrap();
    let out = metadg(
        &["eval", "--checkpoint", "zero", "--config", path.to_str().unwrap(), "--out", "eval", "--attention"],
        tmp.path(),
    );
    assert_ok(&out);
    let eval = tmp.path().join("eval");
    assert_eq!(metric(&eval, "auc"), 0.5);
    assert_eq!(metric(&eval, "n_real"), 20.0);
    let roc = fs::read_to_string(eval.join("roc.csv")).unwrap();
    assert_eq!(roc.lines().next(), Some("threshold,fpr,tpr"));
    assert_eq!(roc.lines().count(), 1 + 2);
    let maps: Vec<PathBuf> = fs::read_dir(eval.join("attention")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(maps.len(), 40);
    assert_eq!(maps.iter().filter(|p| p.to_string_lossy().ends_with("_real.pgm")).count(), 20);
    let one = fs::read_to_string(&maps[0]).unwrap();
    assert!(one.starts_with("P2\n4 4\n255\n"));
}

#[test]
fn trained_checkpoint_beats_untrained_on_a_source_domain() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig { checkpoint_every: 100, ..micro_config(tmp.path(), 200, Variant::Finegrained) };
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ok(&metadg(&["train", "--config", path.to_str().unwrap()], tmp.path()));
    assert!(checkpoint_dir(&tmp.path().join("run"), 100).join("params.f32").exists());
    let init =
        RunConfig { meta: MetaConfig { iters: 0, ..cfg.meta.clone() }, out: Some(tmp.path().join("init")), ..cfg };
    let init_path = write_config(tmp.path(), "init.json", &init);
    assert_ok(&metadg(&["train", "--config", init_path.to_str().unwrap()], tmp.path()));

    let p = path.to_str().unwrap();
    for (ckpt, out) in [("init/checkpoint", "e0"), ("run/checkpoint", "e1")] {
        assert_ok(&metadg(
            &["eval", "--checkpoint", ckpt, "--config", p, "--domain", "office", "--out", out],
            tmp.path(),
        ));
    }
    let (before, after) = (metric(&tmp.path().join("e0"), "auc"), metric(&tmp.path().join("e1"), "auc"));
    assert!(after > before, "trained {after} vs untrained {before}");
}

#[test]
fn eval_rejects_data_of_another_shape() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(tmp.path(), 0, Variant::Finegrained);
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ok(&metadg(&["train", "--config", path.to_str().unwrap()], tmp.path()));
    let wide = RunConfig { synth: Some(micro_spec(16, 20)), ..cfg };
    let wide_path = write_config(tmp.path(), "wide.json", &wide);
    let out = metadg(&["eval", "--checkpoint", "run/checkpoint", "--config", wide_path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("preset expects input"));
}

#[test]
fn ablate_reports_every_variant_on_identical_data() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(tmp.path(), 4, Variant::Finegrained);
    cfg.out = Some(tmp.path().join("abl"));
    cfg.meta.alpha = 0.0;
    cfg.ablation = AblationPlan { leave_out: vec!["studio".into(), "kiosk".into()], ..AblationPlan::default() };
    let path = write_config(tmp.path(), "c.json", &cfg);
    assert_ok(&metadg(&["ablate", "--config", path.to_str().unwrap(), "--seeds", "2"], tmp.path()));

    let csv = fs::read_to_string(tmp.path().join("abl/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5 * 2 + 5);
    for v in Variant::ALL {
        for d in ["studio", "kiosk", "all"] {
            assert_eq!(rows.iter().filter(|r| r[0] == v.to_string() && r[1] == d).count(), 1, "{v} {d}");
        }
    }
    // a zero inner step makes the second-order and first-order variants identical
    let of = |v: &str| rows.iter().filter(|r| r[0] == v).map(|r| r[3..].join(",")).collect::<Vec<_>>();
    assert_eq!(of("finegrained"), of("first_order"));

    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("abl/ablation.json")).unwrap()).unwrap();
    let digest = dataset_digest(&synth_domains(cfg.synth.as_ref().unwrap()).unwrap());
    assert_eq!(result["dataset_sha256"], digest.as_str());
    assert_eq!(result["cells"].as_array().unwrap().len(), 5 * 2 * 2);
}

#[test]
fn selftest_passes() {
    let tmp = TempDir::new().unwrap();
    let out = metadg(&["selftest", "--out", "report.json"], tmp.path());
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("PASS  taylor/loglog_slope")));
    assert!(!stdout.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|c| c["pass"] == true));
}
