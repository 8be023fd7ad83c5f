//! Library aggregation and metrics against brute-force scalar versions.

use piqa::aggregation::{aggregate, aggregate_ms};
use piqa::maps::ScalarMap;
use piqa::metrics::{plcc, rmse, srcc};
use piqa::roi_head::RoiMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-9;

fn oracle_plain(p: &[f64], r: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += p[i] * r[i];
    }
    s
}

fn oracle_ms(p: &[f64], r: &[f64]) -> f64 {
    let mut mean = 0.0;
    for v in p {
        mean += v;
    }
    mean /= p.len() as f64;
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - mean) * r[i];
    }
    s
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
    }
    let (mx, my) = (sx / n, sy / n);
    for i in 0..x.len() {
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    sxy / sxx.sqrt() / syy.sqrt()
}

/// Tie-averaged 1-based ranks by counting.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let less = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_rmse(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += (x[i] - y[i]).powi(2);
    }
    (s / x.len() as f64).sqrt()
}

#[test]
fn aggregation_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let n = w * h;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let r: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let pm = ScalarMap::new(w, h, p.clone());
        let rm = RoiMap::from_weights(ScalarMap::new(w, h, r.clone()));
        let plain = aggregate(&pm, &rm).unwrap().value;
        let ms = aggregate_ms(&pm, &rm).unwrap().value;
        assert!((plain - oracle_plain(&p, &r)).abs() < TOL);
        assert!((ms - oracle_ms(&p, &r)).abs() < TOL);
    }
}

#[test]
fn metrics_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < INSTANCES {
        let n = rng.random_range(3..60);
        // coarse grids force ties into roughly half the instances
        let quantum = if rng.random() { 0.5 } else { 0.0 };
        let draw = |rng: &mut ChaCha8Rng| {
            let v: f64 = rng.random_range(1.0..5.0);
            if quantum > 0.0 {
                (v / quantum).round() * quantum
            } else {
                v
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
            continue;
        }
        let p = plcc(&x, &y).unwrap();
        assert!((p - oracle_pearson(&x, &y)).abs() < TOL, "plcc {p}");
        let s = srcc(&x, &y).unwrap();
        let so = oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y));
        assert!((s - so).abs() < TOL, "srcc {s} vs {so}");
        assert!((rmse(&x, &y).unwrap() - oracle_rmse(&x, &y)).abs() < TOL);
        checked += 1;
    }
}
