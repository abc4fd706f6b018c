use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use craftlora::checkpoint::{bases_from_checkpoint, denoiser_from_checkpoint, narrow, Checkpoint};
use craftlora::subspace::apply_rank_limited_update;

const BIN: &str = env!("CARGO_BIN_EXE_craftlora");

const SMALL: &str = r#"{
  "seed": 4,
  "base": {"steps": 300},
  "trunk": {"steps": 40, "warmup_steps": 5},
  "adapter": {"steps": 60, "eval_draws": 16},
  "dataset": {"n_content": 3, "n_style": 3}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("CRAFTLORA_CONFIG").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn fresh() -> PathBuf {
    let dir = tempfile::tempdir().unwrap().keep();
    std::fs::write(dir.join("small.json"), SMALL).unwrap();
    dir
}

/// Dataset, trunk and both adapters under the small config, built once.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = fresh();
        let d = dir.as_path();
        ok(d, &["gen-pairs", "--config", "small.json", "--out", "data"]);
        ok(d, &["train-trunk", "--config", "small.json", "--data", "data", "--out", "trunk.ckpt"]);
        ok(d, &[
            "train-lora", "--config", "small.json", "--kind", "content", "--reference", "data/pair_000_content.pgm",
            "--prompt", "a red car <c>", "--backbone", "trunk.ckpt", "--out", "content.ckpt",
        ]);
        ok(d, &[
            "train-lora", "--config", "small.json", "--kind", "style", "--reference", "data/pair_000_style.pgm",
            "--prompt", "in the style of van gogh <s>", "--backbone", "trunk.ckpt", "--out", "style.ckpt",
        ]);
        dir
    })
}

fn sample(dir: &Path, out: &str, extra: &[&str]) -> Vec<u8> {
    let mut args = vec!["sample", "--config", "small.json", "--prompt", "a red car <c> in watercolor <s>", "--backbone", "trunk.ckpt", "--out", out];
    args.extend_from_slice(extra);
    ok(dir, &args);
    std::fs::read(dir.join(out)).unwrap()
}

#[test]
fn gen_pairs_defaults_write_the_full_dataset() {
    let dir = fresh();
    ok(&dir, &["gen-pairs", "--out", "a"]);
    let manifest = std::fs::read_to_string(dir.join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    assert!(manifest.lines().all(|l| l.split('\t').count() == 7));
    let pgms = std::fs::read_dir(dir.join("a")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, 200);

    ok(&dir, &["gen-pairs", "--out", "b"]);
    for e in std::fs::read_dir(dir.join("a")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(dir.join("a").join(&name)).unwrap(), std::fs::read(dir.join("b").join(&name)).unwrap());
    }
}

#[test]
fn single_pair_dataset_from_env_config() {
    let dir = fresh();
    std::fs::write(dir.join("one.json"), r#"{"dataset": {"n_content": 1, "n_style": 1}}"#).unwrap();
    let out = Command::new(BIN).current_dir(&dir).args(["gen-pairs", "--out", "d"]).env("CRAFTLORA_CONFIG", "one.json").output().unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.join("d/manifest.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn trunk_with_zero_steps_is_the_initial_projection() {
    let dir = fresh();
    std::fs::write(dir.join("zero.json"), r#"{"base": {"steps": 50}, "trunk": {"steps": 0}, "dataset": {"n_content": 2, "n_style": 2}}"#).unwrap();
    ok(&dir, &["gen-pairs", "--config", "zero.json", "--out", "data"]);
    ok(&dir, &["train-trunk", "--config", "zero.json", "--data", "data", "--out", "t.ckpt"]);
    let host = denoiser_from_checkpoint(&Checkpoint::load(&dir.join("t.ckpt")).unwrap()).unwrap();
    let plain = denoiser_from_checkpoint(&Checkpoint::load(&dir.join("t.ckpt.plain")).unwrap()).unwrap();
    let names: Vec<String> = host.backbone().names().map(str::to_string).collect();
    let (_, merged) = bases_from_checkpoint(&Checkpoint::load(&dir.join("t.ckpt.bases")).unwrap(), &names).unwrap();
    let expected = apply_rank_limited_update(plain.backbone(), &merged).unwrap();
    // merged bases went through 32 bits on disk
    assert!(host.backbone().max_abs_diff(&expected) < 1e-5);
    for (a, b) in host.backbone().layers().iter().zip(expected.layers()) {
        assert_eq!(a.weight, narrow(&a.weight));
        assert_eq!(a.weight.shape(), b.weight.shape());
    }
}

#[test]
fn trunk_training_lowers_the_loss_and_is_reproducible() {
    let d = fixture();
    let dir = fresh();
    std::fs::create_dir_all(dir.join("data")).unwrap();
    for e in std::fs::read_dir(d.join("data")).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, dir.join("data").join(p.file_name().unwrap())).unwrap();
    }
    let summary = ok(&dir, &["train-trunk", "--config", "small.json", "--data", "data", "--out", "again.ckpt"]);
    let evals: Vec<f64> = summary
        .lines()
        .next()
        .unwrap()
        .split(['(', ')', ' '])
        .filter_map(|s| s.parse().ok())
        .collect();
    let (before, after) = (evals[evals.len() - 2], evals[evals.len() - 1]);
    assert!(after < before, "{summary}");
    assert!(summary.contains("layer1\t16"));
    for suffix in ["", ".bases", ".plain"] {
        let a = std::fs::read(d.join(format!("trunk.ckpt{suffix}"))).unwrap();
        let b = std::fs::read(dir.join(format!("again.ckpt{suffix}"))).unwrap();
        assert_eq!(a, b, "trunk.ckpt{suffix} differs between runs");
    }
}

#[test]
fn lora_needs_its_marker() {
    let d = fixture();
    let out = run(d, &[
        "train-lora", "--config", "small.json", "--kind", "style", "--reference", "data/pair_000_style.pgm", "--prompt",
        "no markers here", "--backbone", "trunk.ckpt", "--out", "never.ckpt",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("<s>"));
    assert!(!d.join("never.ckpt").exists());
}

#[test]
fn lora_with_zero_steps_keeps_the_zero_update() {
    let d = fixture();
    let dir = fresh();
    std::fs::write(dir.join("z.json"), r#"{"adapter": {"steps": 0, "eval_draws": 2}}"#).unwrap();
    let out = ok(&dir, &[
        "train-lora", "--config", "z.json", "--kind", "content", "--reference",
        d.join("data/pair_000_content.pgm").to_str().unwrap(), "--prompt", "a red car <c>", "--backbone",
        d.join("trunk.ckpt").to_str().unwrap(), "--out", "z.ckpt",
    ]);
    assert!(out.contains("content adapter"));
    let summary = ok(&dir, &["inspect", "z.ckpt"]);
    let updates: Vec<&str> = summary.lines().filter(|l| l.starts_with("update\t")).collect();
    assert_eq!(updates.len(), 4);
    assert!(updates.iter().all(|l| l.ends_with("rank 0")));
}

#[test]
fn trained_adapters_beat_the_zero_adapter() {
    let d = fixture();
    let dir = fresh();
    let out = ok(&dir, &[
        "train-lora", "--config", d.join("small.json").to_str().unwrap(), "--kind", "style", "--reference",
        d.join("data/pair_004_style.pgm").to_str().unwrap(), "--prompt", "in watercolor style <s>", "--backbone",
        d.join("trunk.ckpt").to_str().unwrap(), "--out", "s.ckpt",
    ]);
    let nums: Vec<f64> = out.split_whitespace().filter_map(|s| s.parse().ok()).collect();
    assert!(nums[0] < nums[1], "{out}");
}

#[test]
fn zero_gains_reproduce_the_base_sample() {
    let d = fixture();
    let base = sample(d, "base.pgm", &[]);
    let muted = sample(d, "muted.pgm", &["--content-adapter", "content.ckpt", "--style-adapter", "style.ckpt", "--gamma-c", "0", "--gamma-s", "0"]);
    assert_eq!(base, muted);
    let adapted = sample(d, "adapted.pgm", &["--content-adapter", "content.ckpt", "--style-adapter", "style.ckpt"]);
    assert_ne!(base, adapted);
}

#[test]
fn symmetric_cfg_changes_the_sample() {
    let d = fixture();
    let adapters = ["--content-adapter", "content.ckpt", "--style-adapter", "style.ckpt"];
    let asym = sample(d, "asym.pgm", &adapters);
    let mut sym_args = adapters.to_vec();
    sym_args.push("--symmetric-cfg");
    let sym = sample(d, "sym.pgm", &sym_args);
    assert_ne!(asym, sym);
    assert_eq!(asym, sample(d, "asym2.pgm", &adapters));
}

#[test]
fn trace_has_one_record_per_step() {
    let d = fixture();
    sample(d, "traced.pgm", &["--style-adapter", "style.ckpt", "--trace", "trace.tsv"]);
    let trace = std::fs::read_to_string(d.join("trace.tsv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "t\tgamma_c_eff\tgamma_s_eff\talpha\teps_gap");
    assert_eq!(lines.len(), 51);
    assert!(lines[1].starts_with("50\t"));
    assert!(lines[50].starts_with("1\t"));
}

#[test]
fn adapters_refuse_a_foreign_host_unless_asked() {
    let d = fixture();
    let out = run(d, &[
        "sample", "--config", "small.json", "--prompt", "a red car <c>", "--backbone", "trunk.ckpt.plain",
        "--content-adapter", "content.ckpt", "--out", "foreign.pgm",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("host mismatch"));
    sample(d, "plain_host.pgm", &["--content-adapter", "content.ckpt", "--host", "plain"]);
}

#[test]
fn eval_writes_a_bounded_report_independent_of_threads() {
    let d = fixture();
    let grid = r#"{"content_prompts": ["a red car", "a small house", "a sailing boat"],
"style_prompts": ["in watercolor style", "in ink style"],
"content_references": ["data/pair_000_content.pgm"], "style_references": ["data/pair_000_style.pgm", "data/pair_001_style.pgm"]}"#;
    std::fs::write(d.join("grid.json"), grid).unwrap();
    let common = ["eval", "--config", "small.json", "--grid", "grid.json", "--backbone", "trunk.ckpt", "--content-adapter", "content.ckpt", "--style-adapter", "style.ckpt"];
    let mut one = common.to_vec();
    one.extend(["--threads", "1", "--out", "r1.json"]);
    let mut three = common.to_vec();
    three.extend(["--threads", "3", "--out", "r3.json"]);
    ok(d, &one);
    ok(d, &three);
    let r1 = std::fs::read(d.join("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read(d.join("r3.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    for key in ["s_c", "s_s"] {
        let v = report[key].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&v), "{key} = {v}");
    }
    let s_x = report["s_x"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s_x));
    assert_eq!(report["pairs"].as_array().unwrap().len(), 6);
}

#[test]
fn eval_rejects_a_short_reference_list() {
    let d = fixture();
    let grid = r#"{"content_prompts": ["a", "b", "c"], "style_prompts": ["x", "y"],
"content_references": ["data/pair_000_content.pgm", "data/pair_001_content.pgm"], "style_references": ["data/pair_000_style.pgm"]}"#;
    std::fs::write(d.join("short.json"), grid).unwrap();
    let out = run(d, &["eval", "--config", "small.json", "--grid", "short.json", "--backbone", "trunk.ckpt", "--out", "never.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_reports_and_rejects() {
    let d = fixture();
    let summary = ok(d, &["inspect", "content.ckpt"]);
    assert!(summary.starts_with("kind\tadapter\ncrc\tok\n"));
    assert!(summary.contains("routing\tdisjoint\t4 content, 4 style layers"));
    assert!(summary.contains("meta\trouting.content\tlayer1,layer2,layer3,layer4"));
    let trunk = ok(d, &["inspect", "trunk.ckpt"]);
    assert!(trunk.contains("host_hash\t"));
    assert!(trunk.contains("tensor\tlayer1\t256x64"));

    let bytes = std::fs::read(d.join("style.ckpt")).unwrap();
    std::fs::write(d.join("truncated.ckpt"), &bytes[..bytes.len() - 9]).unwrap();
    let out = run(d, &["inspect", "truncated.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt checkpoint"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = fresh();
    assert_eq!(code(&run(&dir, &["frobnicate"])), 1);
    assert_eq!(code(&run(&dir, &["sample", "--out", "x.pgm"])), 1);
    std::fs::write(dir.join("bad.json"), r#"{"guidance": {"omega": -2}}"#).unwrap();
    assert_eq!(code(&run(&dir, &["gen-pairs", "--config", "bad.json", "--out", "d"])), 1);
    assert_eq!(code(&run(&dir, &["gen-pairs", "--config", "missing.json", "--out", "d"])), 1);
    let env = Command::new(BIN).current_dir(&dir).args(["gen-pairs", "--out", "d"]).env("CRAFTLORA_CONFIG", "bad.json").output().unwrap();
    assert_eq!(code(&env), 1);
    let help = run(&dir, &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-pairs"));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = fresh();
    assert_eq!(code(&run(&dir, &["train-trunk", "--data", "nowhere", "--out", "t.ckpt"])), 2);
    assert_eq!(code(&run(&dir, &["inspect", "nothing.ckpt"])), 2);
}
