//! The pipeline stages. Stages talk only through files in the run directory.

use crate::config::{ModelSource, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use dynts::cachemgr::{
    AccumAttentionPolicy, CachePolicy, EvictionEvent, FullPolicy, RandomPolicy, SinkRecentPolicy, WindowPolicy,
};
use dynts::costmodel::{series, CostParams, CostSeries};
use dynts::dynts_policy::DyntsPolicy;
use dynts::importance::{retention_experiment, score_instance, write_scores_csv, RetentionTable};
use dynts::predictor::{load_checkpoint, save_checkpoint, train as fit, write_history_csv, PredictorParams, TraceSamples};
use dynts::synthdata::{gen_dataset, read_jsonl, write_jsonl, Instance};
use dynts::toymodel::{
    build_planted_model, build_random_model, build_scripted_model, decode, planted, DecodeOptions, Model, ModelConfig,
    Prompt, ScriptedParams,
};
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const DATASET: &str = "dataset.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const SAMPLES: &str = "samples.jsonl";
pub const SCORES: &str = "scores.csv";
pub const TRACE_SUMMARY: &str = "trace_summary.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const HISTORY: &str = "history.csv";
pub const RETENTION: &str = "retention.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn finish(w: BufWriter<File>, path: &Path) -> Result<()> {
    w.into_inner().map_err(|e| e.into_error()).and_then(|f| f.sync_all()).with_context(|| format!("writing {}", path.display()))
}

/// Maps `f` over `items` on a scoped worker pool; results keep input order so
/// the single collector writes byte-identical files.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = if workers == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { workers };
    let workers = workers.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let tp = cfg.task_params();
    let vocab = tp.vocab()?.size();
    let mc = ModelConfig {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_model: cfg.d_model,
        vocab_size: vocab,
        max_pos: tp.max_pos,
    };
    Ok(match cfg.model {
        ModelSource::Planted => build_planted_model(&tp, planted::planted_config(&tp)?)?,
        ModelSource::Scripted => build_scripted_model(
            mc,
            ScriptedParams { epsilon: cfg.epsilon, rest: cfg.rest, signal: cfg.signal, noise: cfg.noise, seed: cfg.model_seed },
        )?,
        ModelSource::Random => build_random_model(mc, cfg.model_seed)?,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Instance>> {
    let path = cfg.out.join(DATASET);
    let insts = read_jsonl(open(&path)?).with_context(|| format!("reading {}", path.display()))?;
    if insts.is_empty() {
        bail!("{} holds no instances", path.display());
    }
    Ok(insts)
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    n: usize,
    dataset: &'a str,
    task: dynts::synthdata::TaskParams,
    sequence_len: usize,
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let tp = cfg.task_params();
    let insts = gen_dataset(&tp, cfg.n, cfg.seed)?;
    let path = cfg.out.join(DATASET);
    let mut w = create(&path)?;
    write_jsonl(&mut w, &insts)?;
    finish(w, &path)?;
    let mpath = cfg.out.join(MANIFEST);
    let mut w = create(&mpath)?;
    let manifest = Manifest { seed: cfg.seed, n: insts.len(), dataset: DATASET, task: tp, sequence_len: tp.sequence_len() };
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    finish(w, &mpath)?;
    println!("wrote {} instances to {}", insts.len(), path.display());
    Ok(())
}

struct Traced {
    id: u64,
    attn: Vec<u8>,
    scores: Vec<u8>,
    samples: TraceSamples,
}

#[derive(Serialize)]
struct Skipped {
    trace_id: u64,
    reason: String,
}

#[derive(Serialize)]
struct TraceSummary {
    model: &'static str,
    traced: usize,
    skipped: Vec<Skipped>,
    max_conservation_error: f64,
}

pub fn trace(cfg: &RunConfig) -> Result<()> {
    let insts = load_dataset(cfg)?;
    let model = build_model(cfg)?;
    let results = par_map(&insts, cfg.workers, |inst| -> Result<std::result::Result<(Traced, f64), String>> {
        let st = match score_instance(&model, inst) {
            Ok(st) => st,
            Err(dynts::Error::Segment(msg)) => return Ok(Err(msg)),
            Err(e) => return Err(e.into()),
        };
        if st.record.steps.len() != st.sequence.len() {
            bail!("trace {}: {} attention steps for a sequence of {}", inst.seed, st.record.steps.len(), st.sequence.len());
        }
        let total = st.scores.scored_mass() + st.scores.unscored_mass;
        let err = (total - st.scores.expected_mass()).abs();
        if err > 1e-6 {
            bail!(
                "trace {}: attention mass not conserved ({total} vs {})",
                inst.seed,
                st.scores.expected_mass()
            );
        }
        let mut attn = Vec::new();
        st.record.write_jsonl(&mut attn)?;
        let mut scores = Vec::new();
        write_scores_csv(&mut scores, inst.seed, &st.scores, &st.sequence, &inst.critical_mask, true)?;
        Ok(Ok((Traced { id: inst.seed, attn, scores, samples: st.samples(inst.seed) }, err)))
    });

    let dir = cfg.out.join("traces");
    fs::create_dir_all(&dir).with_context(|| format!("creating directory {}", dir.display()))?;
    let spath = cfg.out.join(SAMPLES);
    let mut samples_w = create(&spath)?;
    let cpath = cfg.out.join(SCORES);
    let mut scores_w = create(&cpath)?;
    let mut summary = TraceSummary { model: model.variant(), traced: 0, skipped: Vec::new(), max_conservation_error: 0.0 };
    for (inst, r) in insts.iter().zip(results) {
        match r? {
            Ok((t, err)) => {
                fs::write(dir.join(format!("{}.attn.jsonl", t.id)), &t.attn)?;
                fs::write(dir.join(format!("{}.scores.csv", t.id)), &t.scores)?;
                let body = if summary.traced == 0 { &t.scores[..] } else { skip_header(&t.scores) };
                scores_w.write_all(body)?;
                serde_json::to_writer(&mut samples_w, &t.samples)?;
                writeln!(samples_w)?;
                summary.traced += 1;
                summary.max_conservation_error = summary.max_conservation_error.max(err);
            }
            Err(reason) => {
                eprintln!("skipping trace {}: {reason}", inst.seed);
                summary.skipped.push(Skipped { trace_id: inst.seed, reason });
            }
        }
    }
    finish(samples_w, &spath)?;
    finish(scores_w, &cpath)?;
    let tpath = cfg.out.join(TRACE_SUMMARY);
    let mut w = create(&tpath)?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    finish(w, &tpath)?;
    println!("traced {} instances, skipped {}", summary.traced, summary.skipped.len());
    if summary.traced == 0 {
        bail!("every trace failed segmentation");
    }
    Ok(())
}

fn skip_header(csv: &[u8]) -> &[u8] {
    match csv.iter().position(|&b| b == b'\n') {
        Some(i) => &csv[i + 1..],
        None => &[],
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<TraceSamples>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let samples = read_samples(&cfg.out.join(SAMPLES))?;
    if samples.is_empty() {
        bail!("{} holds no traces", cfg.out.join(SAMPLES).display());
    }
    let result = fit(&samples, &cfg.train)?;
    let cpath = cfg.out.join(CHECKPOINT);
    let mut w = create(&cpath)?;
    save_checkpoint(&mut w, &result.params, Some(&cfg.train))?;
    finish(w, &cpath)?;
    let hpath = cfg.out.join(HISTORY);
    let mut w = create(&hpath)?;
    write_history_csv(&mut w, &result.history)?;
    finish(w, &hpath)?;
    if let Some(last) = result.history.last() {
        println!(
            "trained {} epochs: val_mse {:.3e}, kendall {:.3}, overlap@30 {:.3}",
            last.epoch,
            last.val_mse,
            last.kendall,
            last.overlap_at(30).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

struct InferRow {
    trace_id: u64,
    correct: bool,
    generated: String,
    expected: String,
    events: Vec<EvictionEvent>,
    series: Option<CostSeries>,
    error: Option<String>,
}

fn tokens(t: &[u32]) -> String {
    t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn make_policy(
    cfg: &RunConfig,
    m: usize,
    predictor: Option<&Arc<PredictorParams>>,
    model_dim: usize,
    seed: u64,
) -> dynts::Result<(Box<dyn CachePolicy>, u64)> {
    let b = cfg.budget;
    Ok(match cfg.policy.as_str() {
        "full" => (Box::new(FullPolicy::default()), 1),
        "window" => {
            let w = match cfg.window_size {
                Some(w) => w,
                None => b.budget.checked_sub(m + 1).filter(|&w| w > 0).ok_or_else(|| {
                    dynts::Error::Config(format!("budget {} leaves no window after a {m}-token question", b.budget))
                })?,
            };
            (Box::new(WindowPolicy::new(w)?), 1)
        }
        "sink_recent" => (Box::new(SinkRecentPolicy::new(cfg.n_sink.unwrap_or(m), b.local, b.budget)?), 1),
        "accum_attention" => (Box::new(AccumAttentionPolicy::new(b.budget, b.local)?), 1),
        "random" => (Box::new(RandomPolicy::new(b.budget, b.local, seed)?), 1),
        "dynts" => {
            let k = b.windows(m)?.evict as u64;
            let p = predictor.ok_or_else(|| dynts::Error::Config("policy dynts requires a checkpoint".into()))?;
            (Box::new(DyntsPolicy::new(p.clone(), b, model_dim)?), k.max(1))
        }
        other => return Err(dynts::Error::Config(format!("unknown policy {other:?}"))),
    })
}

fn infer_one(cfg: &RunConfig, model: &Model, predictor: Option<&Arc<PredictorParams>>, inst: &Instance) -> dynts::Result<InferRow> {
    let m = inst.question.len();
    let (mut policy, k) = make_policy(cfg, m, predictor, model.config.d_model, cfg.seed ^ inst.seed)?;
    let bound = model.bind(inst);
    let res = decode(&bound, &Prompt::from_instance(inst), policy.as_mut(), &DecodeOptions::greedy(inst.answer.len() + 1))?;
    if cfg.policy != "full" {
        if let Some(s) = res.steps.iter().find(|s| s.pre_len > cfg.budget.budget) {
            return Err(dynts::Error::Cache(format!(
                "budget violated: {} entries attended at step {} (budget {})",
                s.pre_len, s.step, cfg.budget.budget
            )));
        }
    }
    let budget = if cfg.policy == "full" { (m + res.steps.len() + 1) as u64 } else { cfg.budget.budget as u64 };
    let cp = CostParams {
        n_layers: model.config.n_layers as u64,
        d_model: model.config.d_model as u64,
        prefill: m as u64,
        budget,
        k_evict: k,
    };
    let s = series(&res.steps, &cp, cfg.policy == "dynts", model.config.vocab_size as u64)?;
    Ok(InferRow {
        trace_id: inst.seed,
        correct: res.exact_match(&inst.answer),
        generated: tokens(res.answer()),
        expected: tokens(&inst.answer),
        events: res.events,
        series: Some(s),
        error: None,
    })
}

pub fn infer(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let insts = load_dataset(cfg)?;
    let model = build_model(cfg)?;
    let predictor = if cfg.policy == "dynts" {
        let path: PathBuf = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(CHECKPOINT));
        if !path.exists() {
            bail!("policy dynts requires a checkpoint; {} does not exist (run `train` or pass --checkpoint)", path.display());
        }
        let p = load_checkpoint(open(&path)?).with_context(|| format!("loading {}", path.display()))?;
        if p.input_dim() != model.config.d_model {
            bail!("checkpoint {} expects hidden dim {} but the model has {}", path.display(), p.input_dim(), model.config.d_model);
        }
        Some(Arc::new(p))
    } else {
        None
    };
    let rows = par_map(&insts, cfg.workers, |inst| match infer_one(cfg, &model, predictor.as_ref(), inst) {
        Ok(r) => Ok(r),
        Err(e @ (dynts::Error::Config(_) | dynts::Error::Segment(_))) => Ok(InferRow {
            trace_id: inst.seed,
            correct: false,
            generated: String::new(),
            expected: tokens(&inst.answer),
            events: Vec::new(),
            series: None,
            error: Some(e.to_string()),
        }),
        Err(e) => Err(anyhow!("trace {}: {e}", inst.seed)),
    });
    let rows: Vec<InferRow> = rows.into_iter().collect::<Result<_>>()?;

    let dir = cfg.out.join(format!("infer_{}", cfg.policy));
    let rpath = dir.join("results.csv");
    let mut rw = create(&rpath)?;
    writeln!(rw, "trace_id,correct,generated,expected,events,peak_mem_ratio,cum_flops_ratio,error")?;
    let epath = dir.join("evictions.jsonl");
    let mut ew = create(&epath)?;
    let spath = dir.join("cost_series.csv");
    let mut sw = create(&spath)?;
    writeln!(sw, "trace_id,step,eff_len_base,eff_len_opt,cum_flops_base,cum_flops_opt,mem_ratio,gain")?;
    let (mut correct, mut errors, mut events) = (0usize, 0usize, 0usize);
    let (mut peak_sum, mut flops_sum, mut ok) = (0.0, 0.0, 0usize);
    for r in &rows {
        let (peak, ratio) = r.series.as_ref().map(|s| (s.peak_mem_ratio, s.cum_flops_ratio())).unwrap_or((f64::NAN, f64::NAN));
        writeln!(
            rw,
            "{},{},{},{},{},{},{},{}",
            r.trace_id,
            r.correct,
            r.generated,
            r.expected,
            r.events.len(),
            peak,
            ratio,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        )?;
        for ev in &r.events {
            let mut v = serde_json::to_value(ev)?;
            v.as_object_mut().expect("event is an object").insert("trace_id".into(), r.trace_id.into());
            serde_json::to_writer(&mut ew, &v)?;
            writeln!(ew)?;
        }
        if let Some(s) = &r.series {
            for x in &s.rows {
                writeln!(
                    sw,
                    "{},{},{},{},{},{},{},{}",
                    r.trace_id, x.step, x.eff_len_base, x.eff_len_opt, x.cum_flops_base, x.cum_flops_opt, x.mem_ratio, x.gain
                )?;
            }
            peak_sum += peak;
            flops_sum += ratio;
            ok += 1;
        }
        correct += r.correct as usize;
        errors += r.error.is_some() as usize;
        events += r.events.len();
    }
    finish(rw, &rpath)?;
    finish(ew, &epath)?;
    finish(sw, &spath)?;
    let n = rows.len();
    let sum_path = dir.join("summary.csv");
    let mut w = create(&sum_path)?;
    let okf = ok.max(1) as f64;
    writeln!(w, "policy,n,errors,accuracy,mean_events,peak_mem_ratio,cum_flops_ratio")?;
    writeln!(
        w,
        "{},{n},{errors},{},{},{},{}",
        cfg.policy,
        correct as f64 / n as f64,
        events as f64 / n as f64,
        if ok > 0 { peak_sum / okf } else { f64::NAN },
        if ok > 0 { flops_sum / okf } else { f64::NAN }
    )?;
    finish(w, &sum_path)?;
    println!(
        "{}: accuracy {:.3} over {n} instances ({errors} errors), {:.2} eviction events per trace",
        cfg.policy,
        correct as f64 / n as f64,
        events as f64 / n as f64
    );
    Ok(())
}

pub fn retention(cfg: &RunConfig) -> Result<()> {
    let insts = load_dataset(cfg)?;
    let model = build_model(cfg)?;
    let workers = if cfg.workers == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { cfg.workers };
    let chunk = insts.len().div_ceil(workers.max(1)).max(1);
    let chunks: Vec<&[Instance]> = insts.chunks(chunk).collect();
    let parts = par_map(&chunks, workers, |c| retention_experiment(&model, c, &cfg.strategies, &cfg.p_grid, cfg.seed));
    let parts: Vec<_> = parts.into_iter().collect::<dynts::Result<_>>()?;
    let table = RetentionTable::merge(&parts)?;
    let path = cfg.out.join(RETENTION);
    let mut w = create(&path)?;
    table.write_csv(&mut w)?;
    finish(w, &path)?;
    println!("retention: full-cache accuracy {:.3} over {} instances", table.full_accuracy, table.n);
    Ok(())
}
