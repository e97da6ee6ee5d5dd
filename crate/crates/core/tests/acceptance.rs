//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N ... PASS|FAIL` line with the measured values.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rarelink::data::{
    simulate, stratified_split, CovariateDist, Dataset, LinearEffect, MarMechanism, SimSpec, SmoothEffect, TruthFn,
};
use rarelink::eval::{auc, evaluate};
use rarelink::fit::{
    default_tau_grid, fit, fit_selecting_tau, select_tau, LambdaPolicy, ModelSpec, SmoothTermSpec,
};
use rarelink::links::LinkSpec;
use rarelink::preprocess::{coarse_merge, impute_fcs, woe_fit, woe_transform, ImputationPolicy, WoeBin, WoeTable};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id} ({name}): {}  {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn normal(mean: f64, sd: f64) -> CovariateDist {
    CovariateDist::Normal { mean, sd }
}

fn unit() -> CovariateDist {
    CovariateDist::Uniform { low: 0.0, high: 1.0 }
}

#[test]
fn criterion_1_link_correctness() {
    let links = [
        LinkSpec::logit(),
        LinkSpec::loglog(),
        LinkSpec::gev(-0.41).unwrap(),
        LinkSpec::gev(-0.5).unwrap(),
        LinkSpec::gev(-1.0).unwrap(),
        LinkSpec::gev(0.3).unwrap(),
    ];
    let mut worst_round_trip: f64 = 0.0;
    let mut worst_derivative: f64 = 0.0;
    for link in &links {
        // interior: probabilities well inside (ε, 1 − ε)
        let lo = link.forward(1e-6);
        let hi = link.forward(1.0 - 1e-6);
        for i in 0..1000 {
            let eta = lo + (hi - lo) * (i as f64 + 0.5) / 1000.0;
            worst_round_trip = worst_round_trip.max((link.forward(link.inverse(eta)) - eta).abs());
        }
        // central difference at step 1e-6; beyond μ ∈ [1e-3, 1 − 1e-3] its own
        // roundoff (≈ 1e-16 / (h·dμ/dη)) exceeds the tolerance being checked
        let lo = link.forward(1e-3);
        let hi = link.forward(1.0 - 1e-3);
        for i in 0..1000 {
            let eta = lo + (hi - lo) * (i as f64 + 0.5) / 1000.0;
            let h = 1e-6;
            let fd = (link.inverse(eta + h) - link.inverse(eta - h)) / (2.0 * h);
            let an = link.dmu_deta(eta).unwrap();
            worst_derivative = worst_derivative.max(((an - fd) / an).abs());
        }
    }
    let near = LinkSpec::gev_exact(1e-6).unwrap();
    let near_neg = LinkSpec::gev_exact(-1e-6).unwrap();
    let gumbel = LinkSpec::loglog();
    let mut worst_gumbel: f64 = 0.0;
    for i in 0..=1000 {
        let eta = -4.0 + 8.0 * i as f64 / 1000.0;
        for l in [&near, &near_neg] {
            worst_gumbel = worst_gumbel.max((l.inverse(eta) - gumbel.inverse(eta)).abs());
        }
    }
    let pass = worst_round_trip < 1e-8 && worst_gumbel < 1e-4 && worst_derivative < 1e-6;
    report(
        1,
        "link correctness",
        pass,
        &format!("round trip {worst_round_trip:.2e}, Gumbel limit {worst_gumbel:.2e}, derivative {worst_derivative:.2e}"),
    );
}

fn log_likelihood(link: &LinkSpec, x: &[f64], y: &[u8], a: f64, b: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let p = link.inverse(a + b * xi);
            if yi == 1 { p.ln() } else { (1.0 - p).ln() }
        })
        .sum()
}

/// Grid-search MLE: coarse grid, then two refinements ending at step 10⁻³.
/// `None` when the coarse optimum sits on the grid edge.
fn grid_mle(link: &LinkSpec, x: &[f64], y: &[u8], with_slope: bool) -> Option<(f64, f64)> {
    let search = |ca: f64, cb: f64, half: f64, step: f64| {
        let m = (half / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, ca, cb);
        let bs: Vec<i64> = if with_slope { (-m..=m).collect() } else { vec![0] };
        for i in -m..=m {
            for &j in &bs {
                let a = ca + i as f64 * step;
                let b = cb + j as f64 * step;
                let ll = log_likelihood(link, x, y, a, b);
                if ll > best.0 {
                    best = (ll, a, b);
                }
            }
        }
        best
    };
    let (_, a, b) = search(0.0, 0.0, 6.0, 0.05);
    if a.abs() > 5.9 || b.abs() > 5.9 {
        return None;
    }
    let (_, a, b) = search(a, b, 0.1, 0.005);
    let (_, a, b) = search(a, b, 0.01, 0.001);
    Some((a, b))
}

#[test]
fn criterion_2_mle_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < 20 {
        attempts += 1;
        let link = if done % 2 == 0 { LinkSpec::logit() } else { LinkSpec::gev(-0.5).unwrap() };
        let with_slope = done % 5 != 4;
        let n = rng.random_range(80..=200);
        let a0 = rng.random_range(-1.5..0.0);
        let b0 = if with_slope { rng.random_range(-1.0..1.0) } else { 0.0 };
        let x: Vec<f64> = (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let y: Vec<u8> = x
            .iter()
            .map(|&xi| u8::from(rng.random::<f64>() < link.inverse(a0 + b0 * xi)))
            .collect();
        if !y.contains(&0) || !y.contains(&1) {
            continue;
        }
        let Some((ga, gb)) = grid_mle(&link, &x, &y, with_slope) else { continue };
        let ds = Dataset::from_complete(vec!["x".into()], vec![x], y).unwrap();
        let terms: &[&str] = if with_slope { &["x"] } else { &[] };
        let m = fit(&ds, &ModelSpec::parametric(link, terms), &LambdaPolicy::Select).unwrap();
        worst = worst.max((m.alpha - ga).abs());
        if with_slope {
            worst = worst.max((m.beta[0] - gb).abs());
        }
        done += 1;
    }
    report(
        2,
        "MLE oracle equivalence",
        worst < 2e-3,
        &format!("max |fit − grid MLE| {worst:.2e} over 20 datasets ({attempts} drawn)"),
    );
}

fn gev_linear_sim(n: usize, seed: u64) -> Dataset {
    simulate(&SimSpec {
        n,
        intercept: -1.0,
        linear_effects: vec![LinearEffect {
            name: "x".into(),
            coefficient: 0.5,
            dist: normal(0.0, 1.0),
        }],
        smooth_effects: vec![],
        link: LinkSpec::gev(-0.41).unwrap(),
        missing_rate: 0.0,
        missing_mechanism: None,
        clamp_support: true,
        seed,
    })
    .unwrap()
}

#[test]
fn criterion_3_parameter_recovery() {
    let reps = 20;
    let spec = ModelSpec::parametric(LinkSpec::gev(-0.41).unwrap(), &["x"]);
    let mut err = [0.0; 2];
    let mut in_range = 0;
    let mut taus = Vec::new();
    for r in 0..reps {
        let ds = gev_linear_sim(20_000, 300 + r);
        let m = fit(&ds, &spec, &LambdaPolicy::Select).unwrap();
        err[0] += (m.alpha + 1.0).abs() / reps as f64;
        err[1] += (m.beta[0] - 0.5).abs() / reps as f64;
        let sel = select_tau(&ds, &spec, &default_tau_grid(), &LambdaPolicy::Select).unwrap();
        if (-0.65..=-0.35).contains(&sel.tau) {
            in_range += 1;
        }
        taus.push(sel.tau);
    }
    report(
        3,
        "parameter recovery",
        err[0] < 0.05 && err[1] < 0.05 && in_range >= 16,
        &format!(
            "mean abs error (alpha {:.4}, beta {:.4}); selected tau in [-0.65, -0.35] in {in_range}/20 {taus:?}",
            err[0], err[1]
        ),
    );
}

#[test]
fn criterion_4_smooth_recovery_and_edf() {
    let truth = TruthFn::Sin2Pi { amplitude: 1.0 };
    let ds = simulate(&SimSpec {
        n: 2000,
        intercept: 0.0,
        linear_effects: vec![],
        smooth_effects: vec![SmoothEffect {
            name: "s".into(),
            truth,
            dist: unit(),
        }],
        link: LinkSpec::logit(),
        missing_rate: 0.0,
        missing_mechanism: None,
        clamp_support: true,
        seed: 44,
    })
    .unwrap();
    let k = 10;
    let spec = ModelSpec::new(LinkSpec::logit(), vec![], vec![SmoothTermSpec { covariate: "s".into(), k }]);
    let m = fit(&ds, &spec, &LambdaPolicy::Select).unwrap();
    let x = ds.complete_column("s").unwrap();
    let f = m.eval_smooth("s", &x).unwrap();
    let t: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
    let t_mean = t.iter().sum::<f64>() / t.len() as f64;
    let rmse = (f.iter().zip(&t).map(|(a, b)| (a - (b - t_mean)).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    let stiff = fit(&ds, &spec, &LambdaPolicy::Fixed(vec![1e12])).unwrap().edf[0];
    let free = fit(&ds, &spec, &LambdaPolicy::Fixed(vec![0.0])).unwrap().edf[0];
    let kk = (k - 1) as f64;
    let pass = rmse < 0.15 && (0.95..=1.2).contains(&stiff) && free >= kk - 0.05 && free <= kk + 1e-9;
    report(
        4,
        "smooth recovery and Edf laws",
        pass,
        &format!(
            "RMSE {rmse:.4} (lambda {:.3e}); Edf at lambda=1e12 {stiff:.4}; Edf at lambda=0 {free:.4}",
            m.lambdas[0]
        ),
    );
}

/// Low-default portfolio: two nonlinear effects and one linear effect
/// under a GEV link, about 3% defaults.
fn low_default_spec(seed: u64) -> SimSpec {
    SimSpec {
        n: 50_000,
        intercept: -3.2,
        linear_effects: vec![LinearEffect {
            name: "x3".into(),
            coefficient: 1.5,
            dist: normal(0.0, 1.0),
        }],
        smooth_effects: vec![
            SmoothEffect {
                name: "x1".into(),
                truth: TruthFn::Sin2Pi { amplitude: 0.5 },
                dist: unit(),
            },
            SmoothEffect {
                name: "x2".into(),
                truth: TruthFn::Hinge { coef: 1.0, knot: 0.5 },
                dist: unit(),
            },
        ],
        link: LinkSpec::gev(-0.15).unwrap(),
        missing_rate: 0.0,
        missing_mechanism: None,
        clamp_support: true,
        seed,
    }
}

#[test]
fn criterion_5_low_default_direction() {
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut default_rate = 0.0;
    for r in 0..10u64 {
        let ds = simulate(&low_default_spec(500 + r)).unwrap();
        default_rate += ds.n_defaults() as f64 / ds.n_rows() as f64 / 10.0;
        let (train, control) = stratified_split(&ds, 0.7, 900 + r).unwrap();
        let gev = LinkSpec::gev(-0.5).unwrap();
        let linear = ModelSpec::parametric(gev, &["x1", "x2", "x3"]);
        let additive = ModelSpec::new(
            gev,
            vec!["x3".into()],
            vec![
                SmoothTermSpec { covariate: "x1".into(), k: 10 },
                SmoothTermSpec { covariate: "x2".into(), k: 10 },
            ],
        );
        let grid = default_tau_grid();
        let (bgeva, _) = fit_selecting_tau(&train, &additive, &grid, &LambdaPolicy::Select).unwrap();
        let (gev_lin, _) = fit_selecting_tau(&train, &linear, &grid, &LambdaPolicy::Select).unwrap();
        let logit = fit(&train, &linear.with_link(LinkSpec::logit()), &LambdaPolicy::Select).unwrap();
        let score = |m: &rarelink::fit::FittedModel| evaluate(&m.predict(&control).unwrap(), control.y()).unwrap();
        let (b, g, l) = (score(&bgeva), score(&gev_lin), score(&logit));
        let ok = b.mse_plus <= g.mse_plus && g.mse_plus <= l.mse_plus && b.auc >= l.auc - 0.005;
        wins += usize::from(ok);
        lines.push(format!(
            "rep {r}: MSE+ bgeva {:.4} gev {:.4} logit {:.4}, AUC bgeva {:.4} logit {:.4}, tau {:.2}/{:.2} {}",
            b.mse_plus,
            g.mse_plus,
            l.mse_plus,
            b.auc,
            l.auc,
            bgeva.tau.unwrap(),
            gev_lin.tau.unwrap(),
            if ok { "ok" } else { "miss" }
        ));
    }
    for l in &lines {
        println!("  {l}");
    }
    report(
        5,
        "low-default direction check",
        wins >= 8,
        &format!("{wins}/10 replications ordered (mean default rate {:.4})", default_rate),
    );
}

fn random_woe_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    loop {
        let n = rng.random_range(30..400);
        let ties = rng.random_bool(0.5);
        let values: Vec<Option<f64>> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    None
                } else {
                    let v: f64 = rng.random_range(-10.0..10.0);
                    Some(if ties { v.round() } else { v })
                }
            })
            .collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.2))).collect();
        if y.contains(&0) && y.contains(&1) && values.iter().any(Option::is_some) {
            return Dataset::new(vec!["f".into()], vec![values], y).unwrap();
        }
    }
}

fn woe_laws_hold(table: &WoeTable, ds: &Dataset) -> bool {
    let all: Vec<&WoeBin> = table.bins.iter().chain([&table.missing_bin]).collect();
    let conserved = all.iter().map(|b| b.bads).sum::<u64>() == table.total_bads
        && all.iter().map(|b| b.goods).sum::<u64>() == table.total_goods;
    let sample = table.total_bads as f64 / table.total_goods as f64;
    let signs = table.smoothing != 0.0
        || table.bins.iter().all(|b| {
            let d = b.bads as f64 / b.goods as f64 - sample;
            d.abs() < 1e-12 || b.woe.signum() == d.signum()
        });
    let total = woe_transform(table, ds.column(0)).iter().all(|v| v.is_finite());
    conserved && signs && total
}

#[test]
fn criterion_6_woe_exactness() {
    // B = 100, G = 900 with a bin holding b = 20, g = 80
    let values: Vec<Option<f64>> = (0..1000).map(|i| Some(if i < 100 { 0.0 } else { 1.0 })).collect();
    let y: Vec<u8> = (0..1000).map(|i| u8::from(i < 20 || (100..180).contains(&i))).collect();
    let ds = Dataset::new(vec!["f".into()], vec![values], y).unwrap();
    let t = woe_fit(&ds, "f", 10).unwrap();
    let hand = t.bins[0].woe;
    let hand_ok = t.bins[0].bads == 20 && t.bins[0].goods == 80 && (hand - 0.810930216216329).abs() < 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut laws = 0;
    for _ in 0..100 {
        let ds = random_woe_dataset(&mut rng);
        let t = woe_fit(&ds, "f", 10).unwrap();
        let gap = rng.random_range(0.0..0.2);
        if woe_laws_hold(&t, &ds) && woe_laws_hold(&coarse_merge(&t, gap, 5), &ds) {
            laws += 1;
        }
    }
    report(
        6,
        "WoE exactness",
        hand_ok && laws == 100,
        &format!("hand-check woe {hand:.12}; laws held on {laws}/100 datasets"),
    );
}

#[test]
fn criterion_7_imputation() {
    // idempotence on complete data
    let complete = simulate(&low_default_spec(7).tap_n(500)).unwrap();
    let out = impute_fcs(&complete, &ImputationPolicy::default()).unwrap();
    let idempotent = out.datasets.len() == 5 && out.datasets.iter().all(|d| d == &complete);

    // exact relation x2 = 2 x1, noise off
    let x1: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64 / 7.0 - 3.0).collect();
    let mut x2: Vec<Option<f64>> = x1.iter().map(|v| Some(2.0 * v)).collect();
    x2[23] = None;
    let y: Vec<u8> = (0..50).map(|i| u8::from(i % 3 == 0)).collect();
    let ds = Dataset::new(vec!["x1".into(), "x2".into()], vec![x1.iter().map(|&v| Some(v)).collect(), x2], y).unwrap();
    let noiseless = ImputationPolicy { noise: false, ..Default::default() };
    let rec = impute_fcs(&ds, &noiseless).unwrap();
    let recovery = rec
        .datasets
        .iter()
        .map(|d| (d.column(1)[23].unwrap() - 2.0 * x1[23]).abs())
        .fold(0.0, f64::max);

    // MAR: x2 correlated with x1 goes missing more often for large x1
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 2000;
    let std = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..n).map(|_| std.sample(&mut rng)).collect();
    let b: Vec<f64> = a.iter().map(|&v| 0.8 * v + 0.6 * std.sample(&mut rng)).collect();
    let y: Vec<u8> = a
        .iter()
        .zip(&b)
        .map(|(&u, &v)| u8::from(rng.random::<f64>() < 1.0 / (1.0 + (1.5 - 0.5 * u - 0.5 * v).exp())))
        .collect();
    let mut missing = 0;
    let b_obs: Vec<Option<f64>> = a
        .iter()
        .zip(&b)
        .map(|(&u, &v)| {
            let p = (0.2 * (1.0 + 0.9 * u.tanh())).clamp(0.0, 1.0);
            if rng.random::<f64>() < p {
                missing += 1;
                None
            } else {
                Some(v)
            }
        })
        .collect();
    let mar = Dataset::new(vec!["a".into(), "b".into()], vec![a.iter().map(|&v| Some(v)).collect(), b_obs.clone()], y).unwrap();
    let imp = impute_fcs(&mar, &ImputationPolicy { seed: 5, ..Default::default() }).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let true_mean = mean(&b);
    let se = (b.iter().map(|v| (v - true_mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt();
    let completed_means: Vec<f64> = imp
        .datasets
        .iter()
        .map(|d| mean(&d.complete_column("b").unwrap()))
        .collect();
    let means_ok = completed_means.iter().all(|m| (m - true_mean).abs() < 3.0 * se);
    let observed_mean = mean(&b_obs.iter().flatten().copied().collect::<Vec<_>>());
    let spread: f64 = (0..n)
        .filter(|&i| b_obs[i].is_none())
        .map(|i| {
            let vals: Vec<f64> = imp.datasets.iter().map(|d| d.column(1)[i].unwrap()).collect();
            let m = mean(&vals);
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt()
        })
        .sum::<f64>()
        / missing as f64;
    let pass = idempotent && recovery < 1e-6 && means_ok && spread > 0.0;
    report(
        7,
        "imputation",
        pass,
        &format!(
            "idempotent {idempotent}; x2=2x1 error {recovery:.2e}; MAR ({:.1}% missing) completed means {:?} vs complete {true_mean:.4} (3 SE = {:.4}, observed-only {observed_mean:.4}); mean across-m sd {spread:.4}",
            100.0 * missing as f64 / n as f64,
            completed_means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
            3.0 * se
        ),
    );
}

trait TapN {
    fn tap_n(self, n: usize) -> Self;
}

impl TapN for SimSpec {
    fn tap_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

fn pairwise_auc(scores: &[f64], y: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&si, _) in scores.iter().zip(y).filter(|(_, &v)| v == 1) {
        for (&sj, _) in scores.iter().zip(y).filter(|(_, &v)| v == 0) {
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_8_auc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    while count < 1000 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..20);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if !y.contains(&0) || !y.contains(&1) {
            continue;
        }
        worst = worst.max((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs());
        count += 1;
    }
    let ties = auc(&[0.37; 25], &(0..25).map(|i| u8::from(i % 4 == 0)).collect::<Vec<_>>()).unwrap();
    report(
        8,
        "AUC oracle",
        worst < 1e-12 && ties == 0.5,
        &format!("max |rank − pairwise| {worst:.2e} over 1000 instances; all-ties AUC {ties}"),
    );
}

fn collect_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_pipeline_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = low_default_spec(99).tap_n(4000);
    spec.intercept = -1.2;
    spec.missing_rate = 0.1;
    spec.missing_mechanism = Some(MarMechanism {
        targets: vec!["x1".into(), "x2".into()],
        driver: "x3".into(),
        strength: 0.5,
    });
    let sim = dir.path().join("sim.json");
    std::fs::write(&sim, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = dir.path().join("data.csv");
    let bin = env!("CARGO_BIN_EXE_rarelink");
    let status = Command::new(bin)
        .args(["simulate", "--config"])
        .arg(&sim)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let config = serde_json::json!({
        "input": data,
        "out": dir.path().join("run"),
        "seed": 2024,
        "smooth": [{"covariate": "x1", "k": 10}, {"covariate": "x2", "k": 10}],
    });
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, config.to_string()).unwrap();
    let run = || {
        let out = Command::new(bin).args(["pipeline", "--config"]).arg(&cfg).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        collect_files(&dir.path().join("run"))
    };
    let first = run();
    std::fs::rename(dir.path().join("run"), dir.path().join("run_first")).unwrap();
    let second = run();
    let table = String::from_utf8_lossy(&first["comparison.txt"]).into_owned();
    let cells = first.keys().filter(|k| k.ends_with("metrics.json")).count();
    let identical = first == second;
    println!("{table}");
    report(
        9,
        "pipeline determinism",
        identical && cells == 8,
        &format!("{} artifacts, {cells} grid cells, byte-identical across runs: {identical}", first.len()),
    );
}
