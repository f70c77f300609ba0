//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line on stderr,
//! bypassing test output capture, then asserts.
//!
//! Criteria 4, 6, 8 and 9 share one set of trained artifacts (default config,
//! master seed 0); its training time is charged to each of their budgets.
//! Heavy criteria hold a global lock so their wall-clock times do not include
//! other criteria running concurrently.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng as _;

use matura_core::coteach::{
    build_pairs, consensus_filter, pairwise_loss, pairwise_loss_and_grad, spearman_eval, PairwiseLabel,
    DEFAULT_TIE_EPSILON,
};
use matura_core::dataset::{standard_dataset, DatasetSpec};
use matura_core::flow::{
    conditional_vector_field, interpolate, random_structure, sample_ode, FlowArch, FlowModel, Schedule, TimePoint,
};
use matura_core::guidance::{guided_sample, guided_vector_field, masked_gradient, GuidanceConfig};
use matura_core::pipeline::{self as pl, Artifacts, Config, SweepParameter, Variant};
use matura_core::predictors::{ComplexBank, ComplexInput, Predictor, PredictorArch, SeqPredictor, StructPredictor};
use matura_core::rng::{child_seed, seeded};
use matura_core::world::make_complex;
use matura_core::{Rng, ToyWorld};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

struct Shared {
    cfg: Config,
    art: Artifacts,
    train_time: Duration,
}

static SHARED: OnceLock<Shared> = OnceLock::new();

fn shared() -> &'static Shared {
    SHARED.get_or_init(|| {
        let cfg = Config::default();
        let t = Instant::now();
        let (art, _) = pl::train_artifacts(&cfg).expect("training succeeds");
        Shared {
            cfg,
            art,
            train_time: t.elapsed(),
        }
    })
}

fn report(n: usize, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n} {}: {name}: {detail} [{:.1} s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central_diff(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn perturb<P: Predictor>(p: &mut P, rng: &mut Rng) {
    for v in p.params_mut().data_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
}

fn median(v: &[f64]) -> f64 {
    matura_core::stats::median(v)
}

#[test]
fn criterion_1_flow_path_identities() {
    let start = Instant::now();
    let mut rng = seeded(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let x0 = random_structure(n, 3.0, &mut rng);
        let x1 = random_structure(n, 3.0, &mut rng);
        let t = rng.random::<f64>() * 0.99;
        let tp = TimePoint::new(t).unwrap();
        let xt = interpolate(&x0, &x1, tp).unwrap();
        let u = conditional_vector_field(&xt, &x1, tp).unwrap();
        for i in 0..n {
            for k in 0..3 {
                let path = (1.0 - t) * x0[i][k] + t * x1[i][k];
                let field = x1[i][k] - x0[i][k];
                let landing = xt[i][k] + (1.0 - t) * u[i][k];
                worst = worst
                    .max((xt[i][k] - path).abs())
                    .max((u[i][k] - field).abs())
                    .max((landing - x1[i][k]).abs());
            }
        }
    }
    let el = start.elapsed();
    let pass = worst < 1e-10 && el < Duration::from_secs(5);
    report(
        1,
        "flow-path identities",
        pass,
        &format!("max error {worst:.2e} on 1000 triples"),
        el,
    );
}

#[test]
fn criterion_2_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = seeded(202);
    let mut worst = [0.0f64; 5];

    // Flow model parameters.
    let mut flow = FlowModel::new(FlowArch::default(), &mut rng);
    for v in flow.params_mut().data_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
    let seq: matura_core::Sequence = "ACDEFGHIKLMNPQRS".parse().unwrap();
    let xt = random_structure(seq.len(), 2.0, &mut rng);
    let x1 = random_structure(seq.len(), 2.0, &mut rng);
    let t = 0.37;
    let (_, g) = flow.loss_and_grad(&xt, t, &seq, &x1);
    for _ in 0..20 {
        let i = rng.random_range(0..flow.params().len());
        let mut f = |v: f64| {
            let mut m = flow.clone();
            m.params_mut().data_mut()[i] = v;
            m.loss(&xt, t, &seq, &x1)
        };
        let n = central_diff(&mut f, flow.params().data()[i], 1e-5);
        worst[0] = worst[0].max(rel_err(g[i], n));
    }

    // Predictors on a default-shaped complex.
    let world = ToyWorld::default();
    let ab = matura_core::world::uniform_sequence(24, &mut rng);
    let ag = matura_core::world::uniform_sequence(16, &mut rng);
    let (layout, full) = make_complex(&ab, &ag, 4, &(17..23).collect::<Vec<_>>()).unwrap();
    let x = world.ensemble_sample(&full, 0.3, &mut rng);
    let input = ComplexInput {
        layout: &layout,
        structure: &x,
    };
    let mut fa = SeqPredictor::new(PredictorArch::default(), &mut rng);
    perturb(&mut fa, &mut rng);
    let mut fb = StructPredictor::new(PredictorArch::default(), &mut rng);
    perturb(&mut fb, &mut rng);
    fn param_check<P: Predictor>(p: &P, input: ComplexInput<'_>, rng: &mut Rng) -> f64 {
        let mut g = p.params().zeros_like();
        p.backprop_params(input, 1.0, &mut g);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let i = rng.random_range(0..p.params().len());
            let mut f = |v: f64| {
                let mut q = p.clone();
                q.params_mut().data_mut()[i] = v;
                q.predict_input(input)
            };
            let n = central_diff(&mut f, p.params().data()[i], 1e-5);
            worst = worst.max(rel_err(g[i], n));
        }
        worst
    }
    worst[1] = param_check(&fa, input, &mut rng);
    worst[2] = param_check(&fb, input, &mut rng);

    // Structure input gradient, sampled on its support.
    let (_, gx) = fb.grad_struct(&x, &layout).unwrap();
    let support: Vec<usize> = (0..x.len()).filter(|&i| gx[i].iter().any(|v| *v != 0.0)).collect();
    for _ in 0..20 {
        let i = support[rng.random_range(0..support.len())];
        let c = rng.random_range(0..3);
        let mut f = |v: f64| {
            let mut y = x.clone();
            y[i][c] = v;
            fb.predict(&y, &layout).unwrap()
        };
        let n = central_diff(&mut f, x[i][c], 1e-5);
        worst[3] = worst[3].max(rel_err(gx[i][c], n));
    }

    // Pairwise fine-tuning loss.
    let spec = DatasetSpec {
        num_antibodies: 12,
        num_antigens: 6,
        test_antigens: 2,
        ..DatasetSpec::default()
    };
    let (w2, ds) = standard_dataset(&spec, 3).unwrap();
    let bank = ComplexBank::docked(&w2, &ds, Default::default(), 4);
    let labels = build_pairs(&ds, &[0, 1, 2], 6, DEFAULT_TIE_EPSILON, &mut rng)
        .unwrap()
        .labels;
    let (_, gl) = pairwise_loss_and_grad(&fb, &labels, &bank).unwrap();
    for _ in 0..20 {
        let i = rng.random_range(0..fb.params().len());
        let mut f = |v: f64| {
            let mut q = fb.clone();
            q.params_mut().data_mut()[i] = v;
            pairwise_loss_and_grad(&q, &labels, &bank).unwrap().0
        };
        let n = central_diff(&mut f, fb.params().data()[i], 1e-5);
        worst[4] = worst[4].max(rel_err(gl[i], n));
    }

    let el = start.elapsed();
    let pass = worst.iter().all(|w| *w < 1e-4) && el < Duration::from_secs(60);
    let detail = format!(
        "max rel err flow {:.1e}, seq params {:.1e}, struct params {:.1e}, struct input {:.1e}, pairwise loss {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    report(2, "gradient suite", pass, &detail, el);
}

#[test]
fn criterion_3_guidance_decomposition() {
    let start = Instant::now();
    let mut rng = seeded(303);
    let mut flow = FlowModel::new(FlowArch::default(), &mut rng);
    for v in flow.params_mut().data_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
    let mut fb = StructPredictor::new(PredictorArch::default(), &mut rng);
    perturb(&mut fb, &mut rng);
    let ab = matura_core::world::uniform_sequence(24, &mut rng);
    let ag = matura_core::world::uniform_sequence(16, &mut rng);
    let (layout, seq) = make_complex(&ab, &ag, 4, &(17..23).collect::<Vec<_>>()).unwrap();
    let cfg = GuidanceConfig {
        gamma: 5.0,
        t_min_guidance: 0.0,
        cdr_only: true,
    };
    let mut worst: f64 = 0.0;
    let mut outside_cdr: f64 = 0.0;
    for _ in 0..20 {
        let x = random_structure(seq.len(), 3.0, &mut rng);
        for t in [0.25, 0.5, 0.9] {
            let tp = TimePoint::new(t).unwrap();
            let guided = guided_vector_field(&flow, &fb, &x, tp, &layout, &cfg).unwrap();
            let plain = flow.vector_field(&x, tp, &seq).unwrap();
            let x1 = flow.denoise(&x, tp, &seq).unwrap();
            let g = masked_gradient(&fb, &x1, &layout, true).unwrap();
            for i in 0..x.len() {
                for k in 0..3 {
                    let expect = -cfg.gamma * ((1.0 - t) / t) * g[i][k];
                    worst = worst.max((guided[i][k] - plain[i][k] - expect).abs());
                    if !layout.is_cdr(i) {
                        outside_cdr = outside_cdr.max((guided[i][k] - plain[i][k]).abs());
                    }
                }
            }
        }
    }
    // Zero strength reproduces the unguided trajectory bit for bit.
    let schedule = Schedule::default_three_step();
    let mut bitwise = true;
    for s in 0..8 {
        let unguided = sample_ode(&flow, &seq, &schedule, &mut seeded(s), None).unwrap();
        let zero = GuidanceConfig {
            gamma: 0.0,
            ..GuidanceConfig::default()
        };
        let g = guided_sample(&flow, &fb, &layout, &schedule, &zero, None, &mut seeded(s)).unwrap();
        bitwise &= g.structure == unguided.structure;
        for ((_, a), p) in unguided.trajectory.iter().zip(&g.trajectory) {
            bitwise &= fb.predict(a, &layout).unwrap().to_bits() == p.predicted.to_bits();
        }
    }
    let el = start.elapsed();
    let pass = worst < 1e-10 && outside_cdr == 0.0 && bitwise;
    let detail = format!(
        "max decomposition error {worst:.2e}, non-CDR guidance {outside_cdr:.1e}, gamma=0 bitwise equal: {bitwise}"
    );
    report(3, "guidance decomposition", pass, &detail, el);
}

#[test]
fn criterion_4_guidance_efficacy() {
    let _g = serial();
    let start = Instant::now();
    let sh = shared();
    let art = &sh.art;
    let (_, fb) = art.predictors(&Default::default());
    let schedule = Schedule::default_three_step();
    let test = art.dataset.test_antigens();
    let mut guided_means = Vec::new();
    let mut plain_means = Vec::new();
    for s in 0..16u64 {
        let antigen = test[s as usize % test.len()];
        let layout = art.dataset.layout(antigen, pl::wildtype_id(&art.dataset, antigen));
        let mean = |gamma: f64| {
            let cfg = GuidanceConfig {
                gamma,
                ..GuidanceConfig::default()
            };
            let mut rng = seeded(child_seed(4000, s));
            let v: Vec<f64> = (0..64)
                .map(|_| {
                    let x = guided_sample(&art.flow, fb, &layout, &schedule, &cfg, None, &mut rng).unwrap();
                    fb.predict(&x.structure, &layout).unwrap()
                })
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        guided_means.push(mean(5.0));
        plain_means.push(mean(0.0));
    }
    let (mg, mp) = (median(&guided_means), median(&plain_means));
    let el = start.elapsed() + sh.train_time;
    let pass = mg < mp && el < Duration::from_secs(600);
    let detail = format!("median mean prediction gamma=5 {mg:.4} vs gamma=0 {mp:.4} over 16 seeds x 64 samples");
    report(4, "guidance efficacy", pass, &detail, el);
}

#[test]
fn criterion_5_coteaching_ladder() {
    let _g = serial();
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let cfg = Config {
            seed,
            ..Config::default()
        };
        let (world, ds) = pl::build_dataset(&cfg).unwrap();
        let bank = pl::docking_bank(&cfg, &world, &ds);
        let test = ds.test_antigens();
        let (sup, _) = pl::train_supervised_predictors(&cfg, &ds, &bank).unwrap();
        let unf = pl::run_coteaching(&cfg, &ds, &bank, &sup, false, None).unwrap();
        let sel = pl::run_coteaching(&cfg, &ds, &bank, &sup, true, None).unwrap();
        let seq = [&sup.0, &unf.seq, &sel.seq].map(|p| spearman_eval(p, &test, &bank).unwrap().mean);
        let st = [&sup.1, &unf.structure, &sel.structure].map(|p| spearman_eval(p, &test, &bank).unwrap().mean);
        rows.push((seq, st));
    }
    let med = |f: &dyn Fn(&([f64; 3], [f64; 3])) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let seq: Vec<f64> = (0..3).map(|i| med(&|r| r.0[i])).collect();
    let st: Vec<f64> = (0..3).map(|i| med(&|r| r.1[i])).collect();
    let ladder = |v: &[f64]| v[0] < v[1] && v[1] <= v[2] && v[0].abs() < 0.25 && v[2] > 0.35;
    let el = start.elapsed();
    let pass = ladder(&seq) && ladder(&st) && el < Duration::from_secs(900);
    let detail = format!(
        "median Spearman supervised/unfiltered/selection: sequence {:.3}/{:.3}/{:.3}, structure {:.3}/{:.3}/{:.3}",
        seq[0], seq[1], seq[2], st[0], st[1], st[2]
    );
    report(5, "co-teaching ladder", pass, &detail, el);
}

#[test]
fn criterion_6_ablation_ordering() {
    let _g = serial();
    let start = Instant::now();
    let sh = shared();
    assert_eq!(sh.cfg.run.seeds.len(), 5);
    assert_eq!(sh.cfg.run_antigens(&sh.art.dataset).unwrap().len(), 10);
    let rows = pl::run_ablations(&sh.art, &sh.cfg).unwrap();
    let imp: Vec<(Variant, f64)> = Variant::ALL
        .iter()
        .map(|&v| (v, pl::ablation_median(&rows, v, |m| m.imp)))
        .collect();
    let full = imp[0].1;
    let el = start.elapsed() + sh.train_time;
    let pass = rows.len() == 30 && imp[1..].iter().all(|(_, x)| full >= *x) && el < Duration::from_secs(1800);
    let detail = imp
        .iter()
        .map(|(v, x)| format!("{} {x:.3}", v.name()))
        .collect::<Vec<_>>()
        .join(", ");
    report(6, "ablation ordering (median IMP)", pass, &detail, el);
}

#[test]
fn criterion_7_consensus_and_pair_labels() {
    let start = Instant::now();
    let mut rng = seeded(707);
    let spec = DatasetSpec {
        num_antibodies: 12,
        num_antigens: 6,
        test_antigens: 2,
        ..DatasetSpec::default()
    };
    let (world, ds) = standard_dataset(&spec, 7).unwrap();
    let bank = ComplexBank::new(&world, &ds);
    let mut labels = build_pairs(&ds, &[0, 1, 2, 3], 13, DEFAULT_TIE_EPSILON, &mut rng)
        .unwrap()
        .labels;
    labels.truncate(50);
    for l in labels.iter_mut() {
        if rng.random::<f64>() < 0.3 {
            *l = PairwiseLabel { y: !l.y, ..*l };
        }
    }
    let mut teacher = SeqPredictor::new(PredictorArch::default(), &mut rng);
    perturb(&mut teacher, &mut rng);
    let rep = consensus_filter(&teacher, &labels, &bank).unwrap();
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for l in &labels {
        let m = teacher.predict(&ds.antibodies[l.j], &ds.antigens[l.antigen_id])
            - teacher.predict(&ds.antibodies[l.k], &ds.antigens[l.antigen_id]);
        if (m > 0.0) == l.y {
            kept.push(*l);
        } else {
            dropped.push(*l);
        }
    }
    let filter_ok = labels.len() == 50
        && rep.kept == kept
        && rep.dropped == dropped
        && rep.agreement_rate == kept.len() as f64 / 50.0
        && !kept.is_empty()
        && !dropped.is_empty();

    let ln2 = std::f64::consts::LN_2;
    let zero_margin = (pairwise_loss(0.0, true) - ln2)
        .abs()
        .max((pairwise_loss(0.0, false) - ln2).abs());

    let eps = DEFAULT_TIE_EPSILON;
    let ddgs = [
        -5.0,
        -1.0,
        -2.0 * eps,
        -eps,
        -0.5 * eps,
        0.0,
        0.5 * eps,
        eps,
        2.0 * eps,
        1.0,
        5.0,
    ];
    let mut rules_ok = true;
    let mut checked = 0;
    for j in 0..6 {
        for k in 0..6 {
            for &d in &ddgs {
                checked += 1;
                match PairwiseLabel::new(2, j, k, d, eps) {
                    None => rules_ok &= j == k || d.abs() < eps,
                    Some(l) => {
                        rules_ok &= j != k && d.abs() >= eps && l.y == (d > 0.0);
                        let r = l.reversed();
                        rules_ok &= r.j == k && r.k == j && r.ddg == -d && r.y == !l.y && r.reversed() == l;
                        for m in [-3.0, -0.1, 0.0, 0.1, 3.0] {
                            rules_ok &= (pairwise_loss(m, l.y) - pairwise_loss(-m, r.y)).abs() < 1e-15;
                        }
                    }
                }
            }
        }
    }
    let el = start.elapsed();
    let pass = filter_ok && zero_margin < 1e-12 && rules_ok;
    let detail = format!(
        "filter matches brute force on 50 labels ({} kept): {filter_ok}; |loss(0) - ln 2| {zero_margin:.1e}; {checked} label cases consistent: {rules_ok}",
        kept.len()
    );
    report(7, "consensus filter and pairwise labels", pass, &detail, el);
}

fn run_bytes(art: &Artifacts, cfg: &Config, dir: &std::path::Path) -> Vec<Vec<u8>> {
    let out = pl::run_designs(art, cfg).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    pl::write_designs(&dir.join("designs.csv"), &out.designs).unwrap();
    let rows: Vec<_> = out
        .metrics
        .iter()
        .map(|(s, m)| ("full".to_string(), *s, m.clone()))
        .collect();
    pl::write_metrics(&dir.join("metrics.csv"), &rows).unwrap();
    let props: Vec<_> = out.proposals.iter().map(|(_, p)| p.clone()).collect();
    matura_core::inverse_folding::write_proposals(&dir.join("proposals.csv"), &props).unwrap();
    ["designs.csv", "metrics.csv", "proposals.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn criterion_8_pipeline_contract() {
    let _g = serial();
    let start = Instant::now();
    let sh = shared();
    let cfg = &sh.cfg;
    assert_eq!(cfg.run.iterations, 3);
    assert_eq!(cfg.run.mutation.arities, vec![1, 2, 3]);
    let tmp = tempfile::tempdir().unwrap();
    let a = run_bytes(&sh.art, cfg, &tmp.path().join("a"));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| run_bytes(&sh.art, cfg, &tmp.path().join("b")));
    let identical = a == b;

    let out = pl::run_designs(&sh.art, cfg).unwrap();
    let ds = &sh.art.dataset;
    let cdr = &ds.spec.cdr_positions;
    let (mut lo, mut hi) = (usize::MAX, 0);
    let mut cdr_only = true;
    let mut distinct = true;
    let mut seen = std::collections::HashSet::new();
    for d in &out.designs {
        let wt = &ds.antibodies[pl::wildtype_id(ds, d.antigen_id)];
        let h = wt.hamming(&d.sequence);
        lo = lo.min(h);
        hi = hi.max(h);
        cdr_only &= wt.diff_positions(&d.sequence).iter().all(|p| cdr.contains(p));
        distinct &= seen.insert((d.seed, d.antigen_id, d.sequence.to_string()));
    }
    let el = start.elapsed() + sh.train_time;
    let pass = !out.designs.is_empty() && lo >= 1 && hi <= 9 && cdr_only && distinct && identical;
    let detail = format!(
        "{} designs, Hamming to wildtype {lo}..={hi}, CDR-only {cdr_only}, distinct {distinct}, byte-identical reruns {identical}",
        out.designs.len()
    );
    report(8, "pipeline contract", pass, &detail, el);
}

#[test]
fn criterion_9_sweep_harness() {
    let _g = serial();
    let start = Instant::now();
    let sh = shared();
    let tmp = tempfile::tempdir().unwrap();
    let gamma = pl::run_sweep(&sh.art, &sh.cfg, SweepParameter::Gamma).unwrap();
    let steps = pl::run_sweep(&sh.art, &sh.cfg, SweepParameter::Steps).unwrap();
    pl::write_sweep(&tmp.path().join("sweep_gamma.csv"), SweepParameter::Gamma, &gamma).unwrap();
    pl::write_sweep(&tmp.path().join("sweep_steps.csv"), SweepParameter::Steps, &steps).unwrap();

    let grid_ok = gamma.iter().map(|r| r.value).collect::<Vec<_>>() == [0.0, 2.5, 5.0, 7.5, 10.0]
        && steps.iter().map(|r| r.value).collect::<Vec<_>>() == [1.0, 2.0, 3.0, 4.0];
    let at = |rows: &[pl::SweepRow], v: f64| rows.iter().find(|r| r.value == v).cloned().unwrap();
    let unit = |r: &pl::SweepRow| r.imp_norm == 1.0 && r.sim_norm == 1.0 && r.nat_norm == 1.0;
    let norm_ok = unit(&at(&gamma, 5.0)) && unit(&at(&steps, 3.0));
    let csv_ok = [("sweep_gamma.csv", "gamma", 5), ("sweep_steps.csv", "steps", 4)]
        .iter()
        .all(|(f, col, n)| {
            let text = std::fs::read_to_string(tmp.path().join(f)).unwrap();
            let mut lines = text.lines();
            lines.next() == Some(&format!("{col},imp,sim,nat,imp_norm,sim_norm,nat_norm")[..])
                && lines.filter(|l| l.split(',').all(|c| c.parse::<f64>().is_ok())).count() == *n
        });
    let el = start.elapsed() + sh.train_time;
    let pass = grid_ok && norm_ok && csv_ok;
    let imp: Vec<String> = gamma.iter().map(|r| format!("{}:{:.3}", r.value, r.imp)).collect();
    let detail = format!(
        "grids {grid_ok}, unit normalization at default {norm_ok}, CSV shape {csv_ok}; median IMP by gamma {}",
        imp.join(" ")
    );
    report(9, "sweep harness", pass, &detail, el);
}
