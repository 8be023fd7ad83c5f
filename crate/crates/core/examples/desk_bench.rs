//! Trains ablation variants on the synthetic set and prints test metrics.
//!
//! Knobs come from the environment: `N_TRAIN`, `N_TEST`, `SIZE`, `SEEDS`, `FREEZE`, `EMBED`, `BETA`,
//! `VARIANTS` (comma separated names from the ablation matrix), `EPOCHS`
//! (scales the desk schedule), `LR_SCALE`, `BATCH`.

use piqa::dataset::{make_synthetic_with, Distortion, SyntheticConfig};
use piqa::trainer::{ablation_matrix, Trainer, TrainConfig};
use std::time::Instant;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    env_logger::init();
    let n_train = env("N_TRAIN", 512usize);
    let n_test = env("N_TEST", 128usize);
    let size = env("SIZE", 32usize);
    let seeds: Vec<u64> = env("SEEDS", "0".to_string())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let variants = env("VARIANTS", "local-only,local+roi,full".to_string());
    let lr_scale = env("LR_SCALE", 1.0f64);
    let epochs = env("EPOCHS", 0usize);
    let list = |k: &str| -> Option<Vec<f64>> {
        std::env::var(k).ok().map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
    };
    let fg = list("FG_AREA").unwrap_or(vec![0.15, 0.35]);
    let base_data = SyntheticConfig::default();
    let data_cfg = SyntheticConfig {
        width: size,
        height: size,
        compound: env("COMPOUND", 0u8) == 1,
        background_distortion: env("BG", 1u8) == 1,
        foreground_area: (fg[0], fg[1]),
        foreground_saturation: list("FG_SAT").map_or(base_data.foreground_saturation, |v| (v[0] as f32, v[1] as f32)),
        background_saturation: list("BG_SAT").map_or(base_data.background_saturation, |v| (v[0] as f32, v[1] as f32)),
        strength_beta: std::env::var("BETA").ok().map(|v| v.parse().unwrap()),
        kinds: env("KINDS", "blur,noise,blocking".to_string())
            .split(',')
            .map(|k| match k {
                "blur" => Distortion::Blur,
                "noise" => Distortion::Noise,
                _ => Distortion::Blocking,
            })
            .collect(),
        ..SyntheticConfig::default()
    };
    for &seed in &seeds {
        let train: Vec<_> = make_synthetic_with(&data_cfg, n_train, 1000 + seed)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.mos))
            .collect();
        let test: Vec<_> = make_synthetic_with(&data_cfg, n_test, 2000 + seed)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.mos))
            .collect();
        let mut base = TrainConfig::desk();
        base.seed = seed;
        base.batch_size = env("BATCH", base.batch_size);
        if let Some(bb) = list("BB") {
            base.arch.backbone.stages = bb.iter().map(|&v| v as usize).collect();
        }
        base.arch.local.dropout = env("DROPOUT", base.arch.local.dropout);
        base.arch.backbone.freeze = env("FREEZE", base.arch.backbone.freeze as u8) == 1;
        base.arch.embed_channels = env("EMBED", base.arch.embed_channels);
        for s in &mut base.stages {
            s.lr *= lr_scale;
        }
        if epochs > 0 {
            let total = base.total_epochs();
            for s in &mut base.stages {
                s.epochs = (s.epochs * epochs).div_ceil(total).max(1);
            }
        }
        for (name, cfg) in ablation_matrix(&base) {
            if !variants.split(',').any(|v| v == name) {
                continue;
            }
            let start = Instant::now();
            let mut t = Trainer::new(cfg).unwrap();
            while t.epoch < t.cfg.total_epochs() {
                let loss = t.run_epoch(&train).unwrap();
                let e = t.evaluate(&test).unwrap();
                let (plcc, srcc) = e.report.map_or((f64::NAN, f64::NAN), |r| (r.plcc, r.srcc));
                println!(
                    "seed {seed} {name:<11} epoch {:>3} loss {loss:.4} plcc {plcc:.4} srcc {srcc:.4} rmse {:.4} t {:.0}s",
                    t.epoch,
                    e.rmse,
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
}
