//! Frequency-bank construction and the diffusivity/cutoff relations.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::WaveBank;

const LN_4: f64 = 2.0 * LN_2;

/// How κ is derived from the sampling rate.
///
/// `SelfConsistent` puts the half-amplitude point of the Gaussian exactly on
/// the grid's Nyquist frequency at `t = 1`: `κ = ln 4 / (2π²N²)`.
/// `PaperLiteral` keeps the published closed form `√(ln 4) / (2π²N²)`, which
/// places the half-amplitude point slightly above Nyquist.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum KappaMode {
    PaperLiteral,
    #[default]
    SelfConsistent,
}

impl fmt::Display for KappaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KappaMode::PaperLiteral => "paper-literal",
            KappaMode::SelfConsistent => "self-consistent",
        })
    }
}

impl FromStr for KappaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(KappaMode::PaperLiteral),
            "self-consistent" => Ok(KappaMode::SelfConsistent),
            other => Err(Error::contract(format!("unknown kappa mode {other:?}"))),
        }
    }
}

/// Diffusivity for a signal with `samples_per_unit` samples along each axis
/// of the unit domain.
pub fn kappa_for(samples_per_unit: f64, mode: KappaMode) -> Result<f64> {
    if !(samples_per_unit > 0.0) || !samples_per_unit.is_finite() {
        return Err(Error::domain(format!(
            "sampling rate must be positive, got {samples_per_unit}"
        )));
    }
    let numerator = match mode {
        KappaMode::PaperLiteral => LN_4.sqrt(),
        KappaMode::SelfConsistent => LN_4,
    };
    Ok(numerator / (2.0 * PI * PI * samples_per_unit * samples_per_unit))
}

/// Half-amplitude frequency (cycles per unit) of the Gaussian reached at time `t`.
pub fn cutoff_frequency(kappa: f64, t: f64) -> Result<f64> {
    crate::field::check_kappa(kappa)?;
    if !(t > 0.0) {
        return Err(Error::domain(format!(
            "cutoff is unbounded at t <= 0 (got {t})"
        )));
    }
    Ok(LN_4.sqrt() / (2.0 * PI * (2.0 * kappa * t).sqrt()))
}

/// `exp(-nu_sq · κ · t)`.
pub fn attenuation(nu_sq: f64, kappa: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("time must be >= 0, got {t}")));
    }
    Ok((-nu_sq * kappa * t).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankConfig {
    pub components: usize,
    /// Largest wave-vector magnitude, in cycles per unit domain.
    pub max_frequency: f64,
    pub seed: u64,
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::contract("bank needs at least one component"));
        }
        if !(self.max_frequency > 0.0) || !self.max_frequency.is_finite() {
            return Err(Error::domain(format!(
                "max frequency must be positive, got {}",
                self.max_frequency
            )));
        }
        Ok(())
    }
}

/// Isotropic bank with magnitude density proportional to magnitude on
/// `[0, 2π · max_frequency]`, sampled by inverse CDF (`r = r_max √u`).
pub fn init_wave_bank(cfg: &BankConfig) -> Result<WaveBank> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r_max = 2.0 * PI * cfg.max_frequency;
    let waves = (0..cfg.components)
        .map(|_| {
            let r = r_max * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..2.0 * PI);
            let (s, c) = theta.sin_cos();
            [r * c, r * s]
        })
        .collect();
    WaveBank::new(waves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn kappa_values() {
        // independent high-precision evaluations of the two closed forms
        let literal = kappa_for(1.0, KappaMode::PaperLiteral).unwrap();
        let selfc = kappa_for(1.0, KappaMode::SelfConsistent).unwrap();
        assert!(close(literal, 0.059_648_288_556_809_73, 1e-14));
        assert!(close(selfc, 0.070_230_492_772_682_88, 1e-14));
        for mode in [KappaMode::PaperLiteral, KappaMode::SelfConsistent] {
            let k1 = kappa_for(1.0, mode).unwrap();
            assert!(close(kappa_for(2.0, mode).unwrap(), k1 / 4.0, 1e-15));
        }
        assert!(kappa_for(0.0, KappaMode::default()).is_err());
        assert!(kappa_for(-3.0, KappaMode::default()).is_err());
    }

    #[test]
    fn self_consistent_kappa_halves_nyquist() {
        for n in [1.0, 2.0, 48.0, 64.0] {
            let kappa = kappa_for(n, KappaMode::SelfConsistent).unwrap();
            let a = attenuation(PI * PI * n * n, kappa, 1.0).unwrap();
            assert!((a - 0.5).abs() < 1e-12);
            // and the cutoff sits on Nyquist
            assert!(close(cutoff_frequency(kappa, 1.0).unwrap(), n / 2.0, 1e-12));
        }
    }

    #[test]
    fn cutoff_examples() {
        let kappa = LN_4 / (2.0 * PI * PI);
        assert!(close(cutoff_frequency(kappa, 1.0).unwrap(), 0.5, 1e-14));
        let f1 = cutoff_frequency(0.01, 1.3).unwrap();
        let f4 = cutoff_frequency(0.01, 5.2).unwrap();
        assert!(close(f4, f1 / 2.0, 1e-14));
        assert!(cutoff_frequency(0.01, 0.0).is_err());
        assert!(cutoff_frequency(0.0, 1.0).is_err());
    }

    #[test]
    fn attenuation_examples() {
        assert_eq!(attenuation(123.0, 0.4, 0.0).unwrap(), 1.0);
        let kappa = LN_4 / (2.0 * PI * PI);
        assert!((attenuation(PI * PI, kappa, 1.0).unwrap() - 0.5).abs() < 1e-12);
        // the x2-subsampled grid has half the Nyquist frequency, observed at t = 4
        assert!((attenuation(PI * PI / 4.0, kappa, 4.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(attenuation(1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn attenuation_is_a_semigroup() {
        for (nu_sq, kappa, t1, t2) in [(3.0, 0.2, 0.4, 1.7), (900.0, 0.001, 2.0, 0.25), (0.0, 1.0, 5.0, 5.0)] {
            let lhs = attenuation(nu_sq, kappa, t1).unwrap() * attenuation(nu_sq, kappa, t2).unwrap();
            let rhs = attenuation(nu_sq, kappa, t1 + t2).unwrap();
            assert!(close(lhs, rhs, 1e-12));
        }
    }

    #[test]
    fn bank_is_deterministic_and_truncated() {
        let cfg = BankConfig {
            components: 500,
            max_frequency: 12.0,
            seed: 42,
        };
        let a = init_wave_bank(&cfg).unwrap();
        let b = init_wave_bank(&cfg).unwrap();
        assert_eq!(a, b);
        let r_max = 2.0 * PI * 12.0;
        assert!(a.norm_sq().iter().all(|n| n.sqrt() <= r_max));
        let other = init_wave_bank(&BankConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn bank_config_is_validated() {
        assert!(init_wave_bank(&BankConfig { components: 0, max_frequency: 1.0, seed: 0 }).is_err());
        assert!(init_wave_bank(&BankConfig { components: 1, max_frequency: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn magnitudes_have_linear_density() {
        let cfg = BankConfig {
            components: 100_000,
            max_frequency: 3.0,
            seed: 0,
        };
        let bank = init_wave_bank(&cfg).unwrap();
        let r_max = 2.0 * PI * cfg.max_frequency;
        let mut radii: Vec<f64> = bank.norm_sq().iter().map(|n| n.sqrt() / r_max).collect();
        radii.sort_by(f64::total_cmp);
        let n = radii.len() as f64;
        // Kolmogorov-Smirnov against F(r) = r^2
        let ks = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let f = r * r;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");

        let (sx, sy) = bank.waves().iter().fold((0.0, 0.0), |(sx, sy), w| {
            let r = (w[0] * w[0] + w[1] * w[1]).sqrt();
            (sx + w[0] / r, sy + w[1] / r)
        });
        let mean_dir = (sx * sx + sy * sy).sqrt() / n;
        assert!(mean_dir < 0.01, "mean direction norm {mean_dir}");
    }

    #[test]
    fn kappa_mode_parses() {
        for mode in [KappaMode::PaperLiteral, KappaMode::SelfConsistent] {
            assert_eq!(mode.to_string().parse::<KappaMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<KappaMode>().is_err());
    }
}
