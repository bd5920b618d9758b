//! Manual probe for the synthetic CNN-vs-baseline benchmark: prints per-run
//! mean masked-pixel R, pooled RMSE, and the ratio against the
//! linear-interpolation baseline.
//!
//! Usage: bench_probe [scene_seed] [mask_seed] [base_seed] [patience] [max_epochs] [n_runs] [wave*1000] [noise*1000]

use std::time::Instant;

use cloudpatch::baseline::interpolate_image;
use cloudpatch::eval::{evaluate_model, BandMetrics};
use cloudpatch::maskgen::{apply_mask, mask_series};
use cloudpatch::models::{ModelKind, ModelSpec};
use cloudpatch::synth::{generate_scene, SceneConfig};
use cloudpatch::train::{impute_series, split_dataset, train_model, TrainConfig};

fn pooled_rmse(metrics: &[BandMetrics]) -> f64 {
    let (mut ss, mut n) = (0.0, 0usize);
    for m in metrics {
        ss += m.rmse * m.rmse * m.n_pixels as f64;
        n += m.n_pixels;
    }
    (ss / n as f64).sqrt()
}

fn mean_r(metrics: &[BandMetrics]) -> f64 {
    metrics.iter().map(|m| m.pearson_r).sum::<f64>() / metrics.len() as f64
}

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let scene_seed = args.first().copied().unwrap_or(1000);
    let mask_seed = args.get(1).copied().unwrap_or(2000);
    let base_seed = args.get(2).copied().unwrap_or(1);
    let patience = args.get(3).copied().unwrap_or(10) as usize;
    let max_epochs = args.get(4).copied().unwrap_or(50) as usize;
    let n_runs = args.get(5).copied().unwrap_or(3);
    let wave = args.get(6).copied().unwrap_or(35) as f64 / 1000.0;
    let noise = args.get(7).copied().unwrap_or(3) as f64 / 1000.0;

    let scene_cfg = SceneConfig {
        seed: scene_seed,
        noise_sd: noise,
        wave_amplitude: wave,
        ..SceneConfig::default()
    };
    let t0 = Instant::now();
    let series = generate_scene(&scene_cfg).unwrap();
    let masks = mask_series(&series, 0.1, mask_seed).unwrap();
    eprintln!("scene+masks: {:.1}s", t0.elapsed().as_secs_f64());

    let spec = ModelSpec::new(ModelKind::Cnn, 64, 64).unwrap();
    let cfg = TrainConfig {
        max_epochs,
        early_stop_patience: patience,
        ..TrainConfig::default()
    };

    for i in 0..n_runs {
        let seed = base_seed + i;
        let t = Instant::now();
        let (params, rec) = train_model(&spec, &series, &masks, &cfg, seed).unwrap();
        let train_time = t.elapsed().as_secs_f64();

        let split = split_dataset(series.len(), &cfg, seed).unwrap();
        let observed: Vec<_> = split
            .test
            .iter()
            .map(|&i| series.images()[i].clone())
            .collect();
        let test_masks: Vec<_> = split.test.iter().map(|&i| masks[i].clone()).collect();

        let cnn_imputed = impute_series(&spec, &params, &observed, &test_masks).unwrap();
        let cnn_metrics = evaluate_model(&observed, &cnn_imputed, &test_masks).unwrap();

        let base_imputed: Vec<_> = observed
            .iter()
            .zip(&test_masks)
            .map(|(img, m)| interpolate_image(&apply_mask(img, m).unwrap()).unwrap())
            .collect();
        let base_metrics = evaluate_model(&observed, &base_imputed, &test_masks).unwrap();

        let (rc, rb) = (pooled_rmse(&cnn_metrics), pooled_rmse(&base_metrics));
        println!(
            "run seed={seed}: best_ep={} epochs={} meanR_cnn={:.3} meanR_base={:.3} \
             rmse_cnn={:.5} rmse_base={:.5} ratio={:.3} ({:.0}s)",
            rec.best_epoch,
            rec.train_history.len(),
            mean_r(&cnn_metrics),
            mean_r(&base_metrics),
            rc,
            rb,
            rc / rb,
            train_time,
        );
    }
    eprintln!("total: {:.0}s", t0.elapsed().as_secs_f64());
}
