use dynts::predictor::{init_params, load_checkpoint};
use dynts::synthdata::{read_jsonl, write_jsonl, THINK_CLOSE};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p
}

fn dynts(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    let out = dir.join("run");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dynts"));
    cmd.args(args).arg("--out").arg(&out);
    if cfg.exists() {
        cmd.arg("--config").arg(&cfg);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = dynts(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join("run").join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn gen_writes_dataset_and_manifest_deterministically() {
    let d = workdir("gen");
    write_config(&d, "data.n = 10\nseed = 3\n");
    ok(&d, &["gen"]);
    let first = read(&d, "dataset.jsonl");
    assert_eq!(first.lines().count(), 10);
    let manifest: serde_json::Value = serde_json::from_str(&read(&d, "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["n"], 10);
    ok(&d, &["gen"]);
    assert_eq!(first, read(&d, "dataset.jsonl"));
    // --seed overrides the config.
    ok(&d, &["gen", "--seed", "4"]);
    assert_ne!(first, read(&d, "dataset.jsonl"));
}

#[test]
fn invalid_config_names_the_key() {
    let d = workdir("badcfg");
    for (body, key) in [
        ("budget.ratio = 2\n", "budget.ratio"),
        ("data.n = many\n", "data.n"),
        ("colour = blue\n", "colour"),
        ("policy = lru\n", "policy"),
    ] {
        write_config(&d, body);
        let o = dynts(&d, &["gen"]);
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("'{key}'")), "{body}: {err}");
    }
}

#[test]
fn trace_scores_every_instance_and_skips_malformed_ones() {
    let d = workdir("trace");
    write_config(&d, "model.source = scripted\ndata.n = 5\n");
    ok(&d, &["gen"]);
    let stdout = ok(&d, &["trace"]);
    assert!(stdout.contains("traced 5"), "{stdout}");
    let traces = d.join("run/traces");
    let scores = fs::read_dir(&traces).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(".scores.csv")).count();
    assert_eq!(scores, 5);
    let insts = read_jsonl(read(&d, "dataset.jsonl").as_bytes()).unwrap();
    for inst in &insts {
        let attn = fs::read_to_string(traces.join(format!("{}.attn.jsonl", inst.seed))).unwrap();
        assert_eq!(attn.lines().count(), inst.question.len() + inst.trace.len() + inst.answer.len() + 3);
    }
    assert_eq!(read(&d, "samples.jsonl").lines().count(), 5);

    // A trace carrying a stray THINK_CLOSE cannot be segmented.
    let mut broken = insts.clone();
    broken[2].trace[10] = THINK_CLOSE;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &broken).unwrap();
    fs::write(d.join("run/dataset.jsonl"), buf).unwrap();
    let o = dynts(&d, &["trace"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped 1"));
    assert!(String::from_utf8_lossy(&o.stderr).contains(&format!("skipping trace {}", broken[2].seed)));
    let summary: serde_json::Value = serde_json::from_str(&read(&d, "trace_summary.json")).unwrap();
    assert_eq!(summary["traced"], 4);
    assert_eq!(summary["skipped"][0]["trace_id"], broken[2].seed);
}

#[test]
fn train_zero_epochs_keeps_the_seeded_initialisation() {
    let d = workdir("train0");
    write_config(&d, "model.source = scripted\ndata.n = 20\ntrain.epochs = 0\nseed = 5\n");
    ok(&d, &["gen"]);
    ok(&d, &["trace"]);
    ok(&d, &["train"]);
    let ck = load_checkpoint(fs::File::open(d.join("run/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck, init_params(64, 5).unwrap());
    assert_eq!(read(&d, "history.csv").lines().count(), 1);

    write_config(&d, "model.source = scripted\ndata.n = 20\ntrain.epochs = 2\nseed = 5\n");
    ok(&d, &["train"]);
    assert_eq!(read(&d, "history.csv").lines().count(), 3);
}

fn accuracy(d: &Path, policy: &str) -> f64 {
    let s = read(d, &format!("infer_{policy}/summary.csv"));
    let row: Vec<&str> = s.lines().nth(1).unwrap().split(',').collect();
    row[3].parse().unwrap()
}

#[test]
fn infer_full_on_planted_is_exact_and_large_budget_dynts_matches_it() {
    let d = workdir("infer_planted");
    write_config(&d, "model.source = planted\ndata.n = 20\nbudget.B = 200\nbudget.local = 8\n");
    ok(&d, &["gen"]);
    ok(&d, &["infer", "--policy", "full"]);
    assert_eq!(accuracy(&d, "full"), 1.0);

    let o = dynts(&d, &["infer", "--policy", "dynts"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires a checkpoint"));

    let ck = d.join("pred.json");
    dynts::predictor::save_checkpoint(fs::File::create(&ck).unwrap(), &init_params(256, 1).unwrap(), None).unwrap();
    ok(&d, &["infer", "--policy", "dynts", "--checkpoint", ck.to_str().unwrap()]);
    let gen = |p: &str| -> Vec<String> {
        read(&d, &format!("infer_{p}/results.csv")).lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect()
    };
    assert_eq!(gen("full"), gen("dynts"));
    assert_eq!(read(&d, "infer_dynts/evictions.jsonl"), "");
}

#[test]
fn tiny_window_loses_to_dynts_at_equal_budget() {
    let d = workdir("infer_window");
    write_config(
        &d,
        "model.source = scripted\ndata.n = 200\nbudget.B = 36\nbudget.local = 4\nbudget.ratio = 0.5\nwindow.size = 4\ntrain.epochs = 4\n",
    );
    ok(&d, &["gen"]);
    ok(&d, &["trace"]);
    ok(&d, &["train"]);
    ok(&d, &["infer", "--policy", "window"]);
    ok(&d, &["infer", "--policy", "dynts"]);
    let (w, dy) = (accuracy(&d, "window"), accuracy(&d, "dynts"));
    assert!(w < dy, "window {w} vs dynts {dy}");
    // The cost series carries one row per decode step of every instance.
    let series = read(&d, "infer_dynts/cost_series.csv");
    assert!(series.starts_with("trace_id,step,eff_len_base,eff_len_opt,cum_flops_base,cum_flops_opt,mem_ratio,gain\n"));
}

#[test]
fn infer_records_infeasible_budgets_per_instance() {
    let d = workdir("infeasible");
    write_config(&d, "model.source = scripted\ndata.n = 4\nbudget.B = 6\nbudget.local = 4\n");
    ok(&d, &["gen"]);
    ok(&d, &["infer", "--policy", "accum_attention"]);
    let results = read(&d, "infer_accum_attention/results.csv");
    assert_eq!(results.lines().count(), 5);
    assert!(results.lines().skip(1).all(|l| l.contains("leave no evictable entries")));
    let summary = read(&d, "infer_accum_attention/summary.csv");
    assert!(summary.lines().nth(1).unwrap().starts_with("accum_attention,4,4,0,"));
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let d = workdir("workers");
    write_config(&d, "model.source = scripted\ndata.n = 12\nworkers = 1\n");
    ok(&d, &["gen"]);
    ok(&d, &["trace"]);
    ok(&d, &["infer", "--policy", "random"]);
    ok(&d, &["retention"]);
    let snap = |d: &Path| {
        ["samples.jsonl", "scores.csv", "infer_random/results.csv", "infer_random/cost_series.csv", "retention.csv"].map(|f| read(d, f))
    };
    let one = snap(&d);
    write_config(&d, "model.source = scripted\ndata.n = 12\nworkers = 5\n");
    ok(&d, &["trace"]);
    ok(&d, &["infer", "--policy", "random"]);
    ok(&d, &["retention"]);
    assert_eq!(one, snap(&d));
}

#[test]
fn retention_includes_reference_row() {
    let d = workdir("retention");
    write_config(&d, "model.source = scripted\ndata.n = 10\nretention.p = 30,100\n");
    ok(&d, &["gen"]);
    ok(&d, &["retention"]);
    let csv = read(&d, "retention.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "full");
    let full = rows[0][2];
    for r in rows.iter().filter(|r| r[1] == "100") {
        assert_eq!(r[2], full, "{r:?}");
    }
    assert_eq!(rows.len(), 1 + 3 * 2);
}

#[test]
fn report_requires_inputs_and_is_idempotent() {
    let d = workdir("report");
    let o = dynts(&d, &["report"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    for f in ["scores.csv", "history.csv", "summary.csv", "retention.csv"] {
        assert!(err.contains(f), "{err}");
    }

    write_config(&d, "model.source = scripted\ndata.n = 10\n");
    ok(&d, &["gen"]);
    ok(&d, &["trace"]);
    ok(&d, &["retention"]);
    ok(&d, &["report"]);
    let md = read(&d, "report.md");
    for i in 1..=10 {
        assert!(md.contains(&format!("\n| {i} |")), "criterion {i} missing:\n{md}");
    }
    let curves = read(&d, "report/retention_curves.csv");
    ok(&d, &["report"]);
    assert_eq!(md, read(&d, "report.md"));
    assert_eq!(curves, read(&d, "report/retention_curves.csv"));
}

#[test]
fn report_exits_nonzero_when_a_measured_check_fails() {
    let d = workdir("report_fail");
    write_config(&d, "model.source = scripted\ndata.n = 20\ntrain.epochs = 1\n");
    ok(&d, &["gen"]);
    ok(&d, &["trace"]);
    ok(&d, &["train"]);
    // One epoch on 20 traces cannot reach the convergence bar.
    let o = dynts(&d, &["report"]);
    assert!(!o.status.success());
    assert!(read(&d, "report.md").contains("| 8 | predictor convergence | FAIL |"));
}
