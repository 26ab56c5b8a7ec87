//! With a small learning rate the smoothed loss should only go down.

use heatfield::image_io::{bicubic_downsample, load_image};
use heatfield::{fit_global_field, global_kappa, init_wave_bank, BankConfig, FitConfig, KappaMode};

const WINDOW: usize = 500;

/// Exponential moving average of the recorded total loss.
fn smoothed(losses: impl Iterator<Item = f64>, alpha: f64) -> Vec<f64> {
    let mut ema = None;
    losses
        .map(|l| {
            let v = ema.map_or(l, |e: f64| e + alpha * (l - e));
            ema = Some(v);
            v
        })
        .collect()
}

#[test]
fn smoothed_loss_never_rises_over_a_window() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let images = [
        bicubic_downsample(&load_image(dir.join("chelsea48.png")).unwrap(), 3.0).unwrap(),
        bicubic_downsample(&load_image(dir.join("chelsea64.png")).unwrap(), 4.0).unwrap(),
    ];
    let mut runs = 0;
    let mut monotone = 0;
    for target in &images {
        let kappa = global_kappa(target, KappaMode::SelfConsistent).unwrap();
        for seed in 0..10 {
            let bank = init_wave_bank(&BankConfig {
                components: 32,
                max_frequency: target.width() as f64 / 4.0,
                seed,
            })
            .unwrap();
            let cfg = FitConfig {
                steps: 1500,
                lr0: 1e-4,
                seed,
                ..FitConfig::default()
            };
            let (_, report) = fit_global_field(target, bank, kappa, &cfg).unwrap();
            let ema = smoothed(report.records.iter().map(|r| r.total), 0.02);
            runs += 1;
            if (0..ema.len() - WINDOW).all(|s| ema[s + WINDOW] <= ema[s]) {
                monotone += 1;
            }
        }
    }
    assert!(
        monotone * 100 >= runs * 95,
        "{monotone} of {runs} runs had a non-increasing smoothed loss"
    );
}
