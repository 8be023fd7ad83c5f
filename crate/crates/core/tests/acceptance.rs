//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gating criterion fails.
//!
//! `PIQA_ACCEPTANCE=1,2,5` runs a subset. Criteria 6 to 8 train networks and
//! dominate the runtime (tens of minutes on one core).

use piqa::aggregation::{aggregate, aggregate_ms, l1_grad, mean_shifted_sum, weighted_sum, ScoreForm};
use piqa::backbone::{upscale_x32, Backbone, STRIDE};
use piqa::dataset::{augment, make_synthetic_with, AugmentCoins, Distortion, SyntheticConfig};
use piqa::image::ImageTensor;
use piqa::local_iqa::RECEPTIVE_RADIUS;
use piqa::maps::ScalarMap;
use piqa::metrics::{plcc, rmse, srcc};
use piqa::model::{ForwardOptions, NetConfig, PiqaNet};
use piqa::nn::Mode;
use piqa::roi_head::{RoiMap, RoiNormalizer};
use piqa::tensor::Tensor;
use piqa::trainer::{ablation_matrix, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

const PROPERTY_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_INSTANCES: usize = 1000;
const GRAD_REL_TOL: f64 = 1e-6;
const GRAD_EPS: f64 = 1e-3;
const OVERFIT_L1: f64 = 0.05;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_IMAGES: usize = 8;
const OVERFIT_SIZE: usize = 64;
const LEARN_TRAIN: usize = 512;
const LEARN_TEST: usize = 128;
const LEARN_SIZE: usize = 32;
const LEARN_SRCC: f64 = 0.80;
const SEEDS: [u64; 3] = [0, 1, 2];

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(w: usize, h: usize, r: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::new(w, h, (0..3 * w * h).map(|_| r.random()).collect()).unwrap()
}

// ---- criterion 1 -----------------------------------------------------------

fn properties() -> Check {
    let mut r = rng(1);
    let cases = 2000;
    for _ in 0..cases {
        let n = r.random_range(1..64);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..20.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(1.0..5.0)).collect();

        for (norm, v) in [(RoiNormalizer::Linear, &x), (RoiNormalizer::Softmax, &z)] {
            let w = norm.apply(v);
            let s: f64 = w.iter().sum();
            ensure((s - 1.0).abs() < PROPERTY_TOL, || format!("{norm} sums to {s}"))?;
        }
        let c = r.random_range(0.01..100.0);
        let a = RoiNormalizer::Linear.apply(&x);
        let b = RoiNormalizer::Linear.apply(&x.iter().map(|v| v * c).collect::<Vec<_>>());
        ensure(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < PROPERTY_TOL), || {
            "linear normalisation is not scale invariant".into()
        })?;
        let a = RoiNormalizer::Softmax.apply(&z);
        let b = RoiNormalizer::Softmax.apply(&z.iter().map(|v| v + c).collect::<Vec<_>>());
        ensure(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < PROPERTY_TOL), || {
            "softmax is not shift invariant".into()
        })?;
        let am = argmax(&x);
        if x.iter().filter(|v| **v == x[am]).count() == 1 {
            ensure(argmax(&RoiNormalizer::Linear.apply(&x)) == am, || "linear moved argmax".into())?;
            ensure(argmax(&RoiNormalizer::Softmax.apply(&x)) == am, || "softmax moved argmax".into())?;
        }

        let rw = RoiNormalizer::Linear.apply(&x);
        let constant = vec![p[0]; n];
        ensure(mean_shifted_sum(&constant, &rw).abs() < PROPERTY_TOL, || {
            "constant pMOS gives non-zero mean-shifted score".into()
        })?;
        let uniform = RoiMap::<f64>::uniform(n, 1);
        ensure(mean_shifted_sum(&p, uniform.values()).abs() < PROPERTY_TOL, || {
            "uniform ROI gives non-zero mean-shifted score".into()
        })?;
        let mean = p.iter().sum::<f64>() / n as f64;
        let decomposition = mean_shifted_sum(&p, &rw) - (weighted_sum(&p, &rw) - mean);
        ensure(decomposition.abs() < PROPERTY_TOL, || {
            format!("P_ms differs from P - mean(p) by {decomposition}")
        })?;

        let (w, h) = (r.random_range(1..9), r.random_range(1..9));
        let img = random_image(w, h, &mut r);
        let coins = AugmentCoins::random(&mut r);
        ensure(augment(&augment(&img, coins), coins) == img, || {
            format!("augmentation {coins:?} is not an involution")
        })?;
    }
    Ok(format!("{cases} random cases per property, tol {PROPERTY_TOL:e}"))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

// ---- criterion 2 -----------------------------------------------------------

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let (mut dx, mut dy) = (0.0, 0.0);
    for i in 0..x.len() {
        num += (x[i] - mx) * (y[i] - my);
        dx += (x[i] - mx) * (x[i] - mx);
        dy += (y[i] - my) * (y[i] - my);
    }
    num / dx.sqrt() / dy.sqrt()
}

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let less = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracles() -> Check {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    let mut track = |lib: f64, oracle: f64, what: &str| -> Result<(), String> {
        let d = (lib - oracle).abs();
        worst = worst.max(d);
        ensure(d < ORACLE_TOL, || format!("{what}: library {lib} vs oracle {oracle}"))
    };
    for _ in 0..ORACLE_INSTANCES {
        let (w, h) = (r.random_range(1..12), r.random_range(1..12));
        let p: Vec<f64> = (0..w * h).map(|_| r.random_range(1.0..5.0)).collect();
        let raw: Vec<f64> = (0..w * h).map(|_| r.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let rw: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let pm = ScalarMap::new(w, h, p.clone());
        let rm = RoiMap::from_weights(ScalarMap::new(w, h, rw.clone()));
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        let mut plain = 0.0;
        let mut ms = 0.0;
        for i in 0..p.len() {
            plain += p[i] * rw[i];
            ms += (p[i] - mean) * rw[i];
        }
        track(aggregate(&pm, &rm).unwrap().value, plain, "aggregate")?;
        track(aggregate_ms(&pm, &rm).unwrap().value, ms, "aggregate_ms")?;
    }
    let mut done = 0;
    while done < ORACLE_INSTANCES {
        let n = r.random_range(3..60);
        let ties = r.random::<bool>();
        let mut draw = || {
            let v: f64 = r.random_range(1.0..5.0);
            if ties {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw()).collect();
        let y: Vec<f64> = (0..n).map(|_| draw()).collect();
        if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
            continue;
        }
        track(plcc(&x, &y).unwrap(), oracle_pearson(&x, &y), "plcc")?;
        track(
            srcc(&x, &y).unwrap(),
            oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y)),
            "srcc",
        )?;
        let se: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        track(rmse(&x, &y).unwrap(), (se / n as f64).sqrt(), "rmse")?;
        done += 1;
    }
    Ok(format!(
        "{ORACLE_INSTANCES} instances each for aggregation and metrics, max |diff| {worst:.1e}"
    ))
}

// ---- criterion 3 -----------------------------------------------------------

fn shapes() -> Check {
    let mut cfg = TrainConfig::desk().net_config();
    cfg.local.channels = 4;
    cfg.backbone.stages = vec![4, 4, 4, 4, 4];
    let mut net = PiqaNet::<f32>::new(cfg).unwrap();
    let mut r = rng(3);
    for (w, h) in [(32, 32), (512, 384), (500, 500)] {
        let img = random_image(w, h, &mut r);
        let out = net
            .forward(&img.to_tensor(), Mode::Eval, ForwardOptions::default())
            .unwrap();
        ensure(out.pmos.shape() == [1, 1, h, w], || {
            format!("pMOS {:?} for a {w}x{h} input", out.pmos.shape())
        })?;
        ensure(out.roi.shape() == [1, 1, h, w], || {
            format!("ROI {:?} for a {w}x{h} input", out.roi.shape())
        })?;
    }
    let mut bb = Backbone::<f32>::new(&[4, 4, 4, 4, 4], &mut r).unwrap();
    for (h, w) in [(32, 32), (384, 512), (512, 512)] {
        let f = bb.forward(Tensor::full([1, 3, h, w], 0.5), Mode::Eval).unwrap();
        ensure(f.spatial() == (h / STRIDE, w / STRIDE), || {
            format!("backbone grid {:?} for {h}x{w}", f.spatial())
        })?;
    }
    let f = Tensor::from_vec([1, 2, 3, 4], (0..24).map(|_| r.random::<f64>()).collect());
    let up = upscale_x32(&f);
    for c in 0..2 {
        for y in 0..96 {
            for x in 0..128 {
                ensure(up.at(0, c, y, x).to_bits() == f.at(0, c, y / 32, x / 32).to_bits(), || {
                    format!("upscaled value differs at ({x}, {y})")
                })?;
            }
        }
    }
    Ok("32x32, 512x384, 500x500 maps match input dims; grid M/32 x N/32; blocks constant".into())
}

// ---- criterion 4 -----------------------------------------------------------

fn receptive_field() -> Check {
    const SIZE: usize = 31;
    const C: usize = 15;
    let mut cfg = NetConfig {
        use_highlevel: false,
        use_roi: false,
        ..NetConfig::default()
    };
    cfg.local.channels = 8;
    let mut net = PiqaNet::<f32>::new(cfg).unwrap();
    let mut center = |img: &ImageTensor| {
        net.forward(&img.to_tensor(), Mode::Eval, ForwardOptions::default())
            .unwrap()
            .pmos
            .at(0, 0, C, C)
    };
    let mut r = rng(4);
    let base = random_image(SIZE, SIZE, &mut r);
    let reference = center(&base);
    let trials = 50;
    for _ in 0..trials {
        let mut img = base.clone();
        let scale = if r.random() { 1.0 } else { 1e3 };
        for y in 0..SIZE {
            for x in 0..SIZE {
                if x.abs_diff(C) > RECEPTIVE_RADIUS || y.abs_diff(C) > RECEPTIVE_RADIUS {
                    for c in 0..3 {
                        img.set(x, y, c, scale * r.random::<f32>());
                    }
                }
            }
        }
        let v = center(&img);
        ensure(v.to_bits() == reference.to_bits(), || {
            format!("centre pMOS moved from {reference} to {v}")
        })?;
    }
    let w = 2 * RECEPTIVE_RADIUS + 1;
    Ok(format!("{trials} perturbations outside the {w}x{w} window, centre bit-identical"))
}

// ---- criterion 5 -----------------------------------------------------------

fn gradients() -> Check {
    let mut r = rng(5);
    let n = 64;
    let mut worst: f64 = 0.0;
    for form in [ScoreForm::Plain, ScoreForm::MeanShifted] {
        for norm in [RoiNormalizer::Linear, RoiNormalizer::Softmax] {
            for g in [-3.0, 9.0] {
                let p: Vec<f64> = (0..n).map(|_| r.random_range(1.0..5.0)).collect();
                let x: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
                let loss = |p: &[f64], x: &[f64]| (form.score(p, &norm.apply(x)) - g).abs();
                let rw = norm.apply(&x);
                let up = l1_grad(form.score(&p, &rw), g);
                let (dp, dr) = form.backward(&p, &rw, up);
                let dx = norm.backward(&x, &rw, &dr);
                for i in 0..n {
                    // five-point central difference
                    let fd = |v: &[f64], i: usize, f: &dyn Fn(&[f64]) -> f64| {
                        let at = |d: f64| {
                            let mut u = v.to_vec();
                            u[i] += d;
                            f(&u)
                        };
                        let h = GRAD_EPS;
                        (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
                    };
                    let np = fd(&p, i, &|q| loss(q, &x));
                    let nx = fd(&x, i, &|v| loss(&p, v));
                    for (a, b, what) in [(dp[i], np, "dL/dp"), (dx[i], nx, "dL/dx")] {
                        let scale = a.abs().max(b.abs());
                        let e = if scale < 1e-12 { 0.0 } else { (a - b).abs() / scale };
                        worst = worst.max(e);
                        ensure(e < GRAD_REL_TOL, || {
                            format!("{what}[{i}] {form}/{norm}: analytic {a} numeric {b}")
                        })?;
                    }
                }
            }
        }
    }
    Ok(format!("8x8 maps, both score forms and normalisers, max rel err {worst:.1e}"))
}

// ---- criterion 6 -----------------------------------------------------------

fn overfit() -> Check {
    let start = Instant::now();
    let data_cfg = SyntheticConfig {
        width: OVERFIT_SIZE,
        height: OVERFIT_SIZE,
        ..SyntheticConfig::default()
    };
    let set: Vec<(ImageTensor, f64)> = make_synthetic_with(&data_cfg, OVERFIT_IMAGES, 6)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.mos))
        .collect();
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = OVERFIT_IMAGES;
    // memorisation: regularisers off
    cfg.augment = false;
    cfg.arch.local.dropout = 0.0;
    // the desk schedule, with its epochs spread evenly over the step budget
    let steps_per_epoch = OVERFIT_STEPS / cfg.total_epochs();
    let mut t = Trainer::new(cfg).unwrap();
    let images: Vec<&ImageTensor> = set.iter().map(|(i, _)| i).collect();
    let targets: Vec<f64> = set.iter().map(|(_, m)| *m).collect();
    let mut l1 = f64::INFINITY;
    while t.step < OVERFIT_STEPS {
        let lr = t.cfg.lr_at_step(t.step, steps_per_epoch);
        t.train_step(&images, &targets, lr).map_err(|e| e.to_string())?;
        if t.step.is_multiple_of(25) {
            let e = t.evaluate(&set).map_err(|e| e.to_string())?;
            l1 = e.predictions.iter().zip(&e.targets).map(|(p, g)| (p - g).abs()).sum::<f64>()
                / set.len() as f64;
            if l1 < OVERFIT_L1 {
                break;
            }
        }
    }
    let msg = format!(
        "eval mean L1 {l1:.4} after {} steps ({:.0}s); needs < {OVERFIT_L1} within {OVERFIT_STEPS}",
        t.step,
        start.elapsed().as_secs_f64()
    );
    if l1 < OVERFIT_L1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- criteria 7 and 8 ------------------------------------------------------

/// Synthetic benchmark shared by the learning and loss-form checks.
fn bench_data() -> SyntheticConfig {
    SyntheticConfig {
        width: LEARN_SIZE,
        height: LEARN_SIZE,
        kinds: vec![Distortion::Noise],
        foreground_area: (0.1, 0.45),
        foreground_saturation: (0.7, 1.0),
        background_saturation: (0.0, 0.3),
        ..SyntheticConfig::default()
    }
}

fn bench_set(n: usize, seed: u64) -> Vec<(ImageTensor, f64)> {
    make_synthetic_with(&bench_data(), n, seed)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.mos))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct RunResult {
    srcc: f64,
    rmse: f64,
}

struct Benchmark {
    /// Per seed: (variant, result).
    runs: Vec<Vec<(String, RunResult)>>,
}

impl Benchmark {
    fn get(&self, seed: usize, variant: &str) -> RunResult {
        self.runs[seed]
            .iter()
            .find(|(n, _)| n == variant)
            .map(|(_, r)| *r)
            .expect("variant was trained")
    }
}

fn run_benchmark() -> Benchmark {
    let wanted = ["local-only", "local+roi", "full", "plain-loss"];
    let mut runs = Vec::new();
    for &seed in &SEEDS {
        // train and test sets come from disjoint distortion seeds
        let train = bench_set(LEARN_TRAIN, 1000 + seed);
        let test = bench_set(LEARN_TEST, 2000 + seed);
        let mut base = TrainConfig::desk();
        base.seed = seed;
        let mut per_seed = Vec::new();
        for (name, cfg) in ablation_matrix(&base) {
            if !wanted.contains(&name.as_str()) {
                continue;
            }
            let start = Instant::now();
            let mut t = Trainer::new(cfg).unwrap();
            while t.epoch < t.cfg.total_epochs() {
                t.run_epoch(&train).unwrap();
            }
            let e = t.evaluate(&test).unwrap();
            let srcc = e.report.map_or(f64::NAN, |r| r.srcc);
            println!(
                "    seed {seed} {name:<10} srcc {srcc:.4} rmse {:.4} ({:.0}s)",
                e.rmse,
                start.elapsed().as_secs_f64()
            );
            per_seed.push((name, RunResult { srcc, rmse: e.rmse }));
        }
        runs.push(per_seed);
    }
    Benchmark { runs }
}

fn learning(b: &Benchmark) -> Check {
    let mut votes = 0;
    let mut parts = Vec::new();
    for (i, seed) in SEEDS.iter().enumerate() {
        let (lo, roi, full) = (
            b.get(i, "local-only").srcc,
            b.get(i, "local+roi").srcc,
            b.get(i, "full").srcc,
        );
        let pass = full >= LEARN_SRCC && lo < roi && roi < full;
        votes += pass as usize;
        parts.push(format!("seed {seed}: {lo:.3} < {roi:.3} < {full:.3} {}", if pass { "ok" } else { "no" }));
    }
    let msg = format!(
        "{} (local-only < local+roi < full, full >= {LEARN_SRCC}); {votes}/{} seeds",
        parts.join("; "),
        SEEDS.len()
    );
    if 2 * votes > SEEDS.len() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn loss_form(b: &Benchmark) -> Check {
    let mut votes = 0;
    let mut parts = Vec::new();
    for (i, seed) in SEEDS.iter().enumerate() {
        let (plain, ms) = (b.get(i, "plain-loss").rmse, b.get(i, "full").rmse);
        votes += (plain >= ms) as usize;
        parts.push(format!("seed {seed}: plain {plain:.3} vs ms {ms:.3}"));
    }
    let msg = format!("{}; plain >= ms in {votes}/{} seeds", parts.join("; "), SEEDS.len());
    if 2 * votes > SEEDS.len() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- criterion 9 -----------------------------------------------------------

fn long_run_documented() -> Check {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .map_err(|e| format!("README.md: {e}"))?;
    ensure(readme.contains("KonIQ-10k") && readme.contains("preset = paper"), || {
        "README does not document the long-run recipe".into()
    })?;
    Ok("non-gating; full-size recipe documented in README (needs KonIQ-10k and a GPU)".into())
}

// ---- driver ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    // ignore libtest flags such as --nocapture
    let selected: Vec<u32> = std::env::var("PIQA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_else(|| (1..=9).collect());
    let wants = |n: u32| selected.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: u32, title: &str, gating: bool, r: Check| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} {tag} {title}: {detail}");
        if r.is_err() && gating {
            failed.push(n);
        }
    };

    if wants(1) {
        report(1, "property suite", true, guarded(properties));
    }
    if wants(2) {
        report(2, "oracle equivalence", true, guarded(oracles));
    }
    if wants(3) {
        report(3, "shape and alignment", true, guarded(shapes));
    }
    if wants(4) {
        report(4, "receptive field", true, guarded(receptive_field));
    }
    if wants(5) {
        report(5, "gradient checks", true, guarded(gradients));
    }
    if wants(6) {
        report(6, "overfit 8 images", true, guarded(overfit));
    }
    if wants(7) || wants(8) {
        match catch_unwind(run_benchmark) {
            Ok(b) => {
                if wants(7) {
                    report(7, "learning and ablation order", true, learning(&b));
                }
                if wants(8) {
                    report(8, "mean-shifted loss ablation", true, loss_form(&b));
                }
            }
            Err(_) => {
                for n in [7, 8].into_iter().filter(|n| wants(*n)) {
                    report(n, "benchmark", true, Err("training panicked".into()));
                }
            }
        }
    }
    if wants(9) {
        report(9, "published numbers (non-gating)", false, guarded(long_run_documented));
    }
    if !failed.is_empty() {
        println!("gating criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
