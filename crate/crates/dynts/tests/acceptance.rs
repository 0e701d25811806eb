//! End-to-end acceptance suite. Runs the ten criteria in turn and prints
//! one `PASS`/`FAIL` line per criterion; exits non-zero if any fails.

use dynts::cachemgr::{
    AccumAttentionPolicy, BudgetConfig, CacheEntry, CachePolicy, DualWindowState, FullPolicy, Phase, RandomPolicy,
    SinkRecentPolicy, WindowPolicy,
};
use dynts::costmodel::{attn_flops, break_even_k, eviction_count, gain_for_events, series, CostParams};
use dynts::dynts_policy::DyntsPolicy;
use dynts::importance::{retention_experiment, score_instance, top_indices, Strategy};
use dynts::numkernel::{finite_diff_check, mlp_backward, mlp_forward, MlpParams};
use dynts::predictor::{init_params, train, TraceSamples, TrainConfig};
use dynts::synthdata::{gen_dataset, Instance, TaskParams, THINK_OPEN};
use dynts::toymodel::{
    build_planted_model, build_random_model, build_scripted_model, decode, planted, DecodeOptions, Model, ModelConfig,
    Prompt, RestWeighting, ScriptedParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scripted(d: usize, rest: RestWeighting, epsilon: f64) -> Model {
    let tp = TaskParams::default();
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: d, vocab_size: tp.vocab().unwrap().size(), max_pos: tp.max_pos };
    build_scripted_model(cfg, ScriptedParams { epsilon, rest, ..Default::default() }).unwrap()
}

fn planted_model() -> Model {
    let tp = TaskParams::default();
    build_planted_model(&tp, planted::planted_config(&tp).unwrap()).unwrap()
}

/// Whether flat index `i` is a bias in the `[w1, b1, w2, b2, w3, b3]` layout.
fn is_bias(i: usize, d: usize, h1: usize, h2: usize) -> bool {
    let b1 = d * h1;
    let w2 = b1 + h1;
    let b2 = w2 + h1 * h2;
    let w3 = b2 + h2;
    let b3 = w3 + h2;
    (b1..w2).contains(&i) || (b2..w3).contains(&i) || i == b3
}

/// 1. Analytic MLP gradients against central finite differences.
fn gradient_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let configs = 120;
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * rng.gen_range(1..=64usize);
        let (h1, h2) = MlpParams::default_shape(d).unwrap();
        let params = MlpParams::init(d, h1, h2, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target: f64 = rng.gen_range(0.0..1.0);
        let loss = |p: &MlpParams, x: &[f64]| {
            let y = mlp_forward(p, x).unwrap().0;
            (y - target) * (y - target)
        };
        let (y, act) = mlp_forward(&params, &x).unwrap();
        let (grads, dx) = mlp_backward(&params, &act, 2.0 * (y - target)).unwrap();
        // Large nets are probed on a seeded subset of coordinates (every bias
        // included); each probe is still a full central difference.
        let flat = params.to_flat();
        let analytic = grads.to_flat();
        let idx: Vec<usize> = if flat.len() <= 2000 {
            (0..flat.len()).collect()
        } else {
            let mut idx: Vec<usize> = (0..400).map(|_| rng.gen_range(0..flat.len())).collect();
            idx.extend((0..flat.len()).filter(|&i| is_bias(i, d, h1, h2)));
            idx.sort_unstable();
            idx.dedup();
            idx
        };
        let sub: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let sub_grad: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let objective = |v: &[f64]| {
            let mut full = flat.clone();
            for (&i, &x) in idx.iter().zip(v) {
                full[i] = x;
            }
            loss(&params.with_flat(&full).unwrap(), &x)
        };
        let e = finite_diff_check(objective, &sub, &sub_grad, 1e-3).unwrap();
        let ex = finite_diff_check(|xs| loss(&params, xs), &x, &dx, 1e-3).unwrap();
        worst = worst.max(e).max(ex);
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over {configs} configurations (< 1e-4)"))
}

/// 2. Importance mass conservation on scripted traces.
fn conservation() -> Outcome {
    let model = scripted(32, RestWeighting::Uniform, 0.1);
    let insts = gen_dataset(&TaskParams::default(), 200, 0).unwrap();
    let mut worst = 0.0f64;
    for inst in &insts {
        let s = score_instance(&model, inst).unwrap().scores;
        worst = worst.max((s.scored_mass() + s.unscored_mass - s.expected_mass()).abs());
    }
    outcome(worst <= 1e-6, format!("max |Σ I + unscored − K_ans·L·H| = {worst:.2e} over {} traces (≤ 1e-6)", insts.len()))
}

/// 3. A budget no trace can reach makes dynts reproduce the full cache bit for bit.
fn full_cache_equivalence() -> Outcome {
    let tp = TaskParams::default();
    let insts = gen_dataset(&tp, 100, 0).unwrap();
    let vocab = tp.vocab().unwrap().size();
    let mut identical = 0;
    for (i, inst) in insts.iter().enumerate() {
        let cfg = ModelConfig { n_layers: 2, n_heads: 4, d_model: 32, vocab_size: vocab, max_pos: 128 };
        let model = build_random_model(cfg, i as u64).unwrap();
        let prompt = Prompt::from_instance(inst);
        let opts = DecodeOptions::greedy(12);
        let full = decode(&model, &prompt, &mut FullPolicy::default(), &opts).unwrap();
        let budget = BudgetConfig { budget: 128, local: 8, ratio: 0.5 };
        let mut p = DyntsPolicy::new(Arc::new(init_params(32, i as u64).unwrap()), budget, 32).unwrap();
        let d = decode(&model, &prompt, &mut p, &opts).unwrap();
        let same_hidden = full.hidden.iter().zip(&d.hidden).all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        if full.generated == d.generated && d.events.is_empty() && same_hidden {
            identical += 1;
        }
    }
    outcome(identical == insts.len(), format!("{identical}/{} decodes bit-identical (tokens and hidden states)", insts.len()))
}

/// Random stream parameters: question length, budget, local window, ratio.
fn stream_params(rng: &mut ChaCha8Rng) -> (usize, BudgetConfig) {
    loop {
        let m = rng.gen_range(1..=8);
        let budget = rng.gen_range(m + 3..=m + 60);
        let local = rng.gen_range(1..budget - m - 1);
        let ratio = rng.gen_range(0.0..0.95);
        let cfg = BudgetConfig { budget, local, ratio };
        if cfg.windows(m).map(|w| w.evict > 0).unwrap_or(false) {
            return (m, cfg);
        }
    }
}

fn question(m: usize) -> Vec<CacheEntry> {
    (0..m).map(|p| CacheEntry::bare(p, 16, f64::INFINITY, Phase::Question)).collect()
}

/// Phase of the `g`-th generated token of a stream with `think` think tokens.
fn phase_of(g: usize, think: usize) -> Phase {
    if g <= think {
        Phase::Think
    } else {
        Phase::Answer
    }
}

/// 4. Budget, question and local-window invariants under random streams.
fn budget_safety() -> Outcome {
    let streams = 1200;
    let mut violations = Vec::new();
    let mut events = 0usize;
    for s in 0..streams {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + s);
        let (m, cfg) = stream_params(&mut rng);
        let len = rng.gen_range(1..4 * cfg.budget);
        let think = rng.gen_range(0..=len);
        let b = cfg.budget;
        let mut policies: Vec<(String, Box<dyn CachePolicy>)> = vec![
            ("full".into(), Box::new(FullPolicy::default())),
            ("window".into(), Box::new(WindowPolicy::new(b - m - 1).unwrap())),
            ("sink_recent".into(), Box::new(SinkRecentPolicy::new(m, cfg.local, b).unwrap())),
            ("accum_attention".into(), Box::new(AccumAttentionPolicy::new(b, cfg.local).unwrap())),
            ("random".into(), Box::new(RandomPolicy::new(b, cfg.local, s).unwrap())),
        ];
        for (_, p) in policies.iter_mut() {
            p.init(question(m)).unwrap();
        }
        let mut dual = DualWindowState::init(question(m), cfg).unwrap();
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        for g in 1..=len {
            let pos = m + g - 1;
            let phase = phase_of(g, think);
            let score = if phase == Phase::Think { scores[g - 1] } else { f64::INFINITY };
            dual.append(CacheEntry::bare(pos, 7, score, phase), score).unwrap();
            let mut views: Vec<(String, usize, Vec<usize>)> = Vec::new();
            let pre = dual.len();
            dual.maybe_evict(g).unwrap();
            views.push(("dual".into(), pre, dual.cache_view().iter().map(|e| e.position).collect()));
            for (name, p) in policies.iter_mut() {
                p.append(CacheEntry::bare(pos, 7, score, phase)).unwrap();
                let pre = p.len();
                p.maybe_evict(g).unwrap();
                views.push((name.clone(), pre, p.view().iter().map(|e| e.position).collect()));
            }
            for (name, pre, view) in views {
                let bounded = name == "full" || (pre <= b && view.len() <= b);
                let set: HashSet<usize> = view.iter().copied().collect();
                let question_kept = (0..m).all(|q| set.contains(&q));
                let recent = (pos + 1 - cfg.local.min(g)..=pos).all(|q| set.contains(&q));
                let sorted = view.windows(2).all(|w| w[0] < w[1]);
                if !(bounded && question_kept && recent && sorted) && violations.len() < 5 {
                    violations.push(format!("stream {s} step {g} {name}: pre {pre} view {view:?}"));
                }
            }
        }
        events += dual.log().len();
    }
    let pass = violations.is_empty() && events > 0;
    outcome(
        pass,
        format!("{streams} streams × 6 policies, {events} dual-window events; violations: {}", if pass { "none".into() } else { violations.join(" | ") }),
    )
}

/// 5. Instrumented MACs, eviction counts, break-even grid and the large-model approximation.
fn cost_model_exactness() -> Outcome {
    let tp = TaskParams::default();
    let vocab = tp.vocab().unwrap().size();
    let insts = gen_dataset(&tp, 60, 0).unwrap();
    let mut mac_steps = 0usize;
    let mut mac_ok = true;
    for (i, inst) in insts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let l = rng.gen_range(1..=4);
        let h = [1, 2, 4][rng.gen_range(0..3)];
        let d = h * rng.gen_range(1..=6) * 2;
        let model = build_random_model(ModelConfig { n_layers: l, n_heads: h, d_model: d, vocab_size: vocab, max_pos: 128 }, i as u64).unwrap();
        let budget = rng.gen_range(20..60);
        let mut p: Box<dyn CachePolicy> = if i % 2 == 0 {
            Box::new(RandomPolicy::new(budget, 4, i as u64).unwrap())
        } else {
            Box::new(FullPolicy::default())
        };
        let r = decode(&model, &Prompt::from_instance(inst), p.as_mut(), &DecodeOptions::greedy(3)).unwrap();
        for st in &r.steps {
            let s = st.pre_len as u64;
            let per_stage = (l * d) as u64 * s;
            mac_ok &= st.macs.score == per_stage && st.macs.mix == per_stage;
            mac_ok &= st.macs.flops() == attn_flops(l as u64, d as u64, s);
            mac_steps += 1;
        }
    }

    let mut count_ok = true;
    for s in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + s);
        let (m, cfg) = stream_params(&mut rng);
        let k = cfg.windows(m).unwrap().evict as u64;
        let mut dual = DualWindowState::init(question(m), cfg).unwrap();
        for i in 1..=rng.gen_range(1..5 * cfg.budget) {
            let score = rng.gen_range(0.0..1.0);
            dual.append(CacheEntry::bare(m + i - 1, 7, score, Phase::Think), score).unwrap();
            dual.maybe_evict(i).unwrap();
            let expected = eviction_count(m as u64, i as u64, cfg.budget as u64, k).unwrap();
            count_ok &= dual.log().len() as u64 == expected;
        }
    }

    let mut grid_ok = true;
    let mut cells = 0;
    for d in (32..=512u64).step_by(8) {
        for l in 1..=8u64 {
            for n in 1..=4u64 {
                let be = break_even_k(d, l, n).unwrap();
                // Independent oracle: the first K with a positive gain.
                let first = (1..).find(|&k| gain_for_events(n, l, d, k) > 0).unwrap();
                grid_ok &= be.k == first && gain_for_events(n, l, d, be.k - 1) <= 0 && gain_for_events(n, l, d, be.k) > 0;
                cells += 1;
            }
        }
    }
    let approx = break_even_k(4096, 32, 1).unwrap().approx;
    let pass = mac_ok && count_ok && grid_ok && approx == 192.0;
    outcome(
        pass,
        format!(
            "MACs exact on {mac_steps} steps: {mac_ok}; eviction_count = log on 1000 streams: {count_ok}; sign flip at break-even on {cells} grid cells: {grid_ok}; (4096, 32, 1) approximation {approx}"
        ),
    )
}

/// Fraction of the top-|critical| think positions that are critical.
fn precision(model: &Model, inst: &Instance) -> f64 {
    let s = score_instance(model, inst).unwrap().scores;
    let k = inst.critical_mask.iter().filter(|&&c| c).count();
    top_indices(&s.think, k).iter().filter(|&&i| inst.critical_mask[i]).count() as f64 / k as f64
}

/// 6. Ground-truth importance recovers the critical tokens.
fn oracle_ranking() -> Outcome {
    let insts = gen_dataset(&TaskParams::default(), 200, 0).unwrap();
    let mut scripted_min = 1.0f64;
    for (rest, eps) in [(RestWeighting::Uniform, 0.1), (RestWeighting::TokenWeighted, 0.1), (RestWeighting::Uniform, 0.05)] {
        let model = scripted(32, rest, eps);
        for inst in &insts {
            scripted_min = scripted_min.min(precision(&model, inst));
        }
    }
    let planted = planted_model();
    let mean = insts.iter().map(|i| precision(&planted, i)).sum::<f64>() / insts.len() as f64;
    outcome(
        scripted_min == 1.0 && mean >= 0.95,
        format!("scripted (ε ≤ 0.1) min precision {scripted_min:.3} (= 1.0); planted mean precision {mean:.4} over 200 (≥ 0.95)"),
    )
}

/// 7. Answering from a retained subset of think tokens.
fn retention_trend() -> Outcome {
    let insts = gen_dataset(&TaskParams::default(), 200, 0).unwrap();
    let model = planted_model();
    let grid = [10.0, 20.0, 30.0];
    let t = retention_experiment(&model, &insts, &[Strategy::Top, Strategy::Random, Strategy::Bottom], &grid, 7).unwrap();
    let a = |s, p| t.accuracy(s, p).unwrap();
    let mut pass = t.full_accuracy - a(Strategy::Top, 30.0) <= 0.05;
    let mut detail = format!("full {:.3}, top@30 {:.3}", t.full_accuracy, a(Strategy::Top, 30.0));
    for p in grid {
        let (top, rnd, bot) = (a(Strategy::Top, p), a(Strategy::Random, p), a(Strategy::Bottom, p));
        pass &= top >= rnd && rnd >= bot && top - bot >= 0.10;
        detail += &format!("; p={p}: top {top:.3} ≥ random {rnd:.3} ≥ bottom {bot:.3}");
    }
    outcome(pass, detail + " (n = 200)")
}

fn samples(model: &Model, insts: &[Instance]) -> Vec<TraceSamples> {
    insts.iter().map(|i| score_instance(model, i).unwrap().samples(i.seed)).collect()
}

/// 8. Predictor training on scripted traces.
fn predictor_convergence() -> Outcome {
    let model = scripted(64, RestWeighting::TokenWeighted, 0.1);
    let insts = gen_dataset(&TaskParams::default(), 550, 0).unwrap();
    let r = train(&samples(&model, &insts), &TrainConfig::default()).unwrap();
    let last = r.history.last().unwrap();
    let overlap = last.overlap_at(30).unwrap();
    let mut best = f64::INFINITY;
    let mut monotone = true;
    for h in &r.history {
        monotone &= best.is_infinite() || h.val_mse <= 1.1 * best;
        best = best.min(h.val_mse);
    }
    let curve: Vec<String> = r.history.iter().map(|h| format!("{:.2e}", h.val_mse)).collect();
    outcome(
        last.kendall >= 0.6 && overlap >= 0.8 && monotone,
        format!(
            "Kendall {:.3} (≥ 0.6), overlap@30 {overlap:.3} (≥ 0.8), val MSE within 10% of running best: {monotone} [{}]",
            last.kendall,
            curve.join(" ")
        ),
    )
}

/// 9. Accuracy ordering of the policies at one shared budget.
fn policy_ordering() -> Outcome {
    let tp = TaskParams::default();
    let model = planted_model();
    let train_set = gen_dataset(&tp, 150, 0).unwrap();
    let fit = train(&samples(&model, &train_set), &TrainConfig { epochs: 5, ..Default::default() }).unwrap();
    let predictor = Arc::new(fit.params);
    let test = gen_dataset(&tp, 200, 400).unwrap();
    let cfg = BudgetConfig { budget: 40, local: 8, ratio: 0.7 };
    let names = ["full", "dynts", "accum_attention", "sink_recent", "window", "random"];
    let mut hits = [0usize; 6];
    let mut min_events = usize::MAX;
    for inst in &test {
        let m = inst.question.len();
        let mut policies: Vec<Box<dyn CachePolicy>> = vec![
            Box::new(FullPolicy::default()),
            Box::new(DyntsPolicy::new(predictor.clone(), cfg, model.config.d_model).unwrap()),
            Box::new(AccumAttentionPolicy::new(cfg.budget, cfg.local).unwrap()),
            Box::new(SinkRecentPolicy::new(m, cfg.local, cfg.budget).unwrap()),
            Box::new(WindowPolicy::new(cfg.budget - m - 1).unwrap()),
            Box::new(RandomPolicy::new(cfg.budget, cfg.local, inst.seed).unwrap()),
        ];
        let prompt = Prompt::from_instance(inst);
        let opts = DecodeOptions::greedy(inst.answer.len() + 1);
        for (i, p) in policies.iter_mut().enumerate() {
            let r = decode(&model, &prompt, p.as_mut(), &opts).unwrap();
            hits[i] += r.exact_match(&inst.answer) as usize;
            if i == 1 {
                min_events = min_events.min(r.events.len());
            }
        }
    }
    let acc: Vec<f64> = hits.iter().map(|&h| h as f64 / test.len() as f64).collect();
    let pass = acc[1] > acc[2] && acc[2] >= acc[3] && acc[3] >= acc[4] && acc[4] >= acc[5] && acc[0] - acc[1] <= 0.02 && min_events >= 3;
    let list: Vec<String> = names.iter().zip(&acc).map(|(n, a)| format!("{n} {a:.3}")).collect();
    outcome(
        pass,
        format!("{} over 200 planted instances; B = 40, W_l = 8, r = 0.7, ≥ {min_events} dynts events per trace (predictor Kendall {:.3})", list.join(", "), fit.history.last().unwrap().kendall),
    )
}

/// 10. Sawtooth, memory and cumulative FLOPs on a long stream.
fn sawtooth() -> Outcome {
    let (l, h, d) = (4usize, 4usize, 64usize);
    let model = build_random_model(ModelConfig { n_layers: l, n_heads: h, d_model: d, vocab_size: 32, max_pos: 300 }, 3).unwrap();
    let cfg = BudgetConfig { budget: 64, local: 8, ratio: 0.25 };
    let m = 4;
    let k = cfg.windows(m).unwrap().evict;
    let be = break_even_k(d as u64, l as u64, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let total = 4 * cfg.budget;
    let mut forced = vec![THINK_OPEN];
    forced.extend((0..total - m - 1).map(|_| rng.gen_range(16..32u32)));
    let prompt = Prompt { prefill: (0..m as u32).map(|t| 16 + t).collect(), forced };
    let mut p = DyntsPolicy::new(Arc::new(init_params(d, 1).unwrap()), cfg, d).unwrap();
    let r = decode(&model, &prompt, &mut p, &DecodeOptions::greedy(1)).unwrap();
    let cp = CostParams { n_layers: l as u64, d_model: d as u64, prefill: m as u64, budget: cfg.budget as u64, k_evict: k as u64 };
    let s = series(&r.steps, &cp, true, 32).unwrap();
    let rows = &s.rows;
    let first = rows.iter().position(|x| x.post_len_opt < x.eff_len_opt).unwrap();
    let after = &rows[first..];
    let hi = after.iter().map(|x| x.eff_len_opt).max().unwrap();
    let lo = after.iter().map(|x| x.post_len_opt).min().unwrap();
    let (b, kk) = (cfg.budget as u64, k as u64);
    let bounded = after.iter().all(|x| x.eff_len_opt <= b && x.post_len_opt >= b - kk);
    let saw = hi == b && lo == b - kk && bounded;
    let per_step = rows[first + 1..].iter().all(|x| x.gain > 0);
    let (b0, o0) = (rows[first].cum_flops_base, rows[first].cum_flops_opt);
    let cum_from_first = rows[first + 1..].iter().all(|x| x.cum_flops_opt - o0 < x.cum_flops_base - b0);
    let final_ratio = s.cum_flops_ratio();
    let long = rows.last().unwrap().eff_len_base >= 4 * cfg.budget as u64;
    let pass = long && saw && s.peak_mem_ratio <= 0.30 && per_step && cum_from_first && final_ratio < 1.0 && k as u64 >= be.k;
    outcome(
        pass,
        format!(
            "length {} (4B = {}), K_evict {k} ≥ break-even {}; attended length spans [{lo}, {hi}] = [B−K, B]: {saw}; peak memory ratio {:.3} (≤ 0.30); per-step gain > 0 and cumulative FLOPs from the first eviction below base: {}; whole-run FLOPs ratio {final_ratio:.3}",
            rows.last().unwrap().eff_len_base,
            4 * cfg.budget,
            be.k,
            s.peak_mem_ratio,
            per_step && cum_from_first
        ),
    )
}

type Criterion = (u8, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "gradient oracle", Duration::from_secs(30), gradient_oracle),
        (2, "conservation", Duration::from_secs(60), conservation),
        (3, "full-cache equivalence", Duration::from_secs(120), full_cache_equivalence),
        (4, "budget safety", Duration::from_secs(120), budget_safety),
        (5, "cost-model exactness", Duration::from_secs(60), cost_model_exactness),
        (6, "oracle ranking", Duration::from_secs(180), oracle_ranking),
        (7, "retention trend", Duration::from_secs(300), retention_trend),
        (8, "predictor convergence", Duration::from_secs(600), predictor_convergence),
        (9, "policy ordering", Duration::from_secs(300), policy_ordering),
        (10, "sawtooth and memory", Duration::from_secs(60), sawtooth),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    // Criteria run one at a time so each runtime is measured without contention.
    let results: Vec<(u8, &str, Duration, Duration, Outcome)> = criteria
        .iter()
        .filter(|c| filter.is_empty() || filter.iter().any(|f| c.1.contains(f.as_str()) || c.0.to_string() == *f))
        .map(|&(id, name, limit, f)| {
            let t = Instant::now();
            let o = f();
            (id, name, limit, t.elapsed(), o)
        })
        .collect();
    let mut failed = 0;
    for (id, name, limit, took, o) in &results {
        let pass = o.pass && took <= limit;
        failed += !pass as usize;
        println!(
            "criterion {id:>2} {name}: {} ({:.1}s, limit {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs(),
            o.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
