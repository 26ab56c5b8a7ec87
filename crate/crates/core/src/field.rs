//! Single-hidden-layer sinusoidal fields with thermal activations.
//!
//! A field maps `(x, t)` to `W2 · (sin(W1 x + b1) ⊙ exp(-|ν|² κ t)) + b2`,
//! where the rows `ν` of `W1` are angular wave vectors. Every component is an
//! eigenfunction of the Laplacian, so the field solves the isotropic heat
//! equation `∂Φ/∂t = κ ∇²Φ` exactly and observing it at time `t` equals
//! Gaussian filtering of `Φ(·, 0)` with variance `2κt` per axis.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};

/// The shared frequency bank: `C` angular wave vectors with cached squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBank {
    waves: Vec<[f64; 2]>,
    norm_sq: Vec<f64>,
}

impl WaveBank {
    pub fn new(waves: Vec<[f64; 2]>) -> Result<Self> {
        if waves.is_empty() {
            return Err(Error::contract("a wave bank needs at least one component"));
        }
        if waves.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("wave vectors must be finite"));
        }
        let norm_sq = waves.iter().map(|w| w[0] * w[0] + w[1] * w[1]).collect();
        Ok(Self { waves, norm_sq })
    }

    /// Rebuild a bank from stored vectors and norms, checking that the stored
    /// norms agree with the vectors.
    pub fn with_cached_norms(waves: Vec<[f64; 2]>, norm_sq: &[f64]) -> Result<Self> {
        let bank = Self::new(waves)?;
        if norm_sq.len() != bank.len() {
            return Err(Error::contract("cached norm count differs from component count"));
        }
        for (i, (stored, fresh)) in norm_sq.iter().zip(&bank.norm_sq).enumerate() {
            if (stored - fresh).abs() > 1e-12 * fresh.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::contract(format!(
                    "cached |nu|^2 of component {i} is {stored}, expected {fresh}"
                )));
            }
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn waves(&self) -> &[[f64; 2]] {
        &self.waves
    }

    pub fn norm_sq(&self) -> &[f64] {
        &self.norm_sq
    }

    /// Largest per-axis angular frequency in the bank.
    pub fn max_axis_frequency(&self) -> f64 {
        self.waves
            .iter()
            .map(|w| w[0].abs().max(w[1].abs()))
            .fold(0.0, f64::max)
    }

    /// Per-component attenuation `exp(-|ν|² κ t)`.
    pub fn decay(&self, kappa: f64, t: f64) -> Vec<f64> {
        self.norm_sq.iter().map(|n| (-n * kappa * t).exp()).collect()
    }
}

/// A point in space-time. Negative times are meaningless for a diffusion
/// process and are rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    x: [f64; 2],
    t: f64,
}

impl EvalPoint {
    pub fn new(x: [f64; 2], t: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::domain(format!("evaluation time must be finite and >= 0, got {t}")));
        }
        Ok(Self { x, t })
    }

    pub fn x(&self) -> [f64; 2] {
        self.x
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

/// `sin(z_i) · exp(-nu_sq_i · κ · t)`.
pub fn thermal_activation(z: &[f64], nu_sq: &[f64], kappa: f64, t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("time must be >= 0, got {t}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::domain(format!("kappa must be positive, got {kappa}")));
    }
    if z.len() != nu_sq.len() {
        return Err(Error::contract("activation arguments and frequencies differ in length"));
    }
    Ok(z
        .iter()
        .zip(nu_sq)
        .map(|(z, n)| z.sin() * (-n * kappa * t).exp())
        .collect())
}

/// Per-field parameters: phases `b1` (C), amplitudes `W2` (channels × C,
/// row-major), bias `b2` (channels) and the diffusivity `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    channels: usize,
    pub phases: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub bias: Vec<f64>,
    kappa: f64,
}

impl FieldParams {
    pub fn new(
        channels: usize,
        phases: Vec<f64>,
        amplitudes: Vec<f64>,
        bias: Vec<f64>,
        kappa: f64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("a field needs at least one channel"));
        }
        if bias.len() != channels {
            return Err(Error::contract(format!(
                "bias has {} entries for {channels} channels",
                bias.len()
            )));
        }
        if amplitudes.len() != channels * phases.len() {
            return Err(Error::contract(format!(
                "amplitudes have {} entries, expected {channels}x{}",
                amplitudes.len(),
                phases.len()
            )));
        }
        check_kappa(kappa)?;
        Ok(Self {
            channels,
            phases,
            amplitudes,
            bias,
            kappa,
        })
    }

    pub fn zeros(components: usize, channels: usize, kappa: f64) -> Result<Self> {
        Self::new(
            channels,
            vec![0.0; components],
            vec![0.0; channels * components],
            vec![0.0; channels],
            kappa,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn components(&self) -> usize {
        self.phases.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn set_kappa(&mut self, kappa: f64) -> Result<()> {
        check_kappa(kappa)?;
        self.kappa = kappa;
        Ok(())
    }
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::domain(format!("kappa must be positive and finite, got {kappa}")));
    }
    Ok(())
}

/// A bank together with one parameter set: a complete global field.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatField {
    bank: WaveBank,
    params: FieldParams,
}

impl HeatField {
    pub fn new(bank: WaveBank, params: FieldParams) -> Result<Self> {
        if bank.len() != params.components() {
            return Err(Error::contract(format!(
                "bank has {} components, parameters have {}",
                bank.len(),
                params.components()
            )));
        }
        Ok(Self { bank, params })
    }

    /// Random phases in `[-π, π)` and amplitudes uniform in
    /// `[-amplitude, amplitude]`; bias uniform in `[0, 1)`.
    pub fn random<R: Rng>(rng: &mut R, bank: WaveBank, channels: usize, kappa: f64, amplitude: f64) -> Result<Self> {
        let c = bank.len();
        let phases = (0..c).map(|_| rng.random_range(-PI..PI)).collect();
        let amplitudes = (0..c * channels)
            .map(|_| rng.random_range(-amplitude..=amplitude))
            .collect();
        let bias = (0..channels).map(|_| rng.random::<f64>()).collect();
        Self::new(bank, FieldParams::new(channels, phases, amplitudes, bias, kappa)?)
    }

    pub fn bank(&self) -> &WaveBank {
        &self.bank
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut FieldParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (WaveBank, FieldParams) {
        (self.bank, self.params)
    }

    /// Replace the wave vectors, keeping the parameters.
    pub fn set_waves(&mut self, waves: Vec<[f64; 2]>) -> Result<()> {
        if waves.len() != self.bank.len() {
            return Err(Error::contract("replacement bank changes the component count"));
        }
        self.bank = WaveBank::new(waves)?;
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.params.channels
    }

    pub fn kappa(&self) -> f64 {
        self.params.kappa
    }

    pub fn view(&self) -> FieldView<'_> {
        FieldView {
            bank: &self.bank,
            phases: &self.params.phases,
            amplitudes: &self.params.amplitudes,
            bias: &self.params.bias,
            kappa: self.params.kappa,
            channels: self.params.channels,
        }
    }
}

/// Which optional parameter blocks receive gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub waves: bool,
    pub kappa: bool,
}

/// Vector-Jacobian product of the field output against an upstream
/// channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub phases: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub bias: Vec<f64>,
    pub waves: Option<Vec<[f64; 2]>>,
    pub kappa: Option<f64>,
}

/// Borrowed field: used both for global fields and for single cells of a
/// local-field grid. Shapes are validated by the owning type.
#[derive(Debug, Clone, Copy)]
pub struct FieldView<'a> {
    pub(crate) bank: &'a WaveBank,
    pub(crate) phases: &'a [f64],
    pub(crate) amplitudes: &'a [f64],
    pub(crate) bias: &'a [f64],
    pub(crate) kappa: f64,
    pub(crate) channels: usize,
}

struct Components {
    sin: Vec<f64>,
    cos: Vec<f64>,
    decay: Vec<f64>,
}

impl<'a> FieldView<'a> {
    pub fn components(&self) -> usize {
        self.phases.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn amp(&self, c: usize) -> &'a [f64] {
        let n = self.components();
        &self.amplitudes[c * n..(c + 1) * n]
    }

    fn expand(&self, p: &EvalPoint) -> Components {
        let [x0, x1] = p.x;
        let n = self.components();
        let mut sin = Vec::with_capacity(n);
        let mut cos = Vec::with_capacity(n);
        for (w, b) in self.bank.waves.iter().zip(self.phases) {
            let (s, c) = (w[0] * x0 + w[1] * x1 + b).sin_cos();
            sin.push(s);
            cos.push(c);
        }
        Components {
            sin,
            cos,
            decay: self.bank.decay(self.kappa, p.t),
        }
    }

    /// Per-channel sums `Σ_i W2[c,i] · g(i)`.
    fn contract(&self, g: impl Fn(usize) -> f64) -> Vec<f64> {
        let weights: Vec<f64> = (0..self.components()).map(g).collect();
        (0..self.channels)
            .map(|c| self.amp(c).iter().zip(&weights).map(|(a, w)| a * w).sum())
            .collect()
    }

    pub fn eval(&self, p: &EvalPoint) -> Vec<f64> {
        let k = self.expand(p);
        let mut out = self.contract(|i| k.sin[i] * k.decay[i]);
        out.iter_mut().zip(self.bias).for_each(|(o, b)| *o += b);
        out
    }

    /// Jacobian with respect to `x`: one `[∂/∂x0, ∂/∂x1]` row per channel.
    pub fn spatial_gradient(&self, p: &EvalPoint) -> Vec<[f64; 2]> {
        let k = self.expand(p);
        let waves = &self.bank.waves;
        (0..self.channels)
            .map(|c| {
                let mut g = [0.0; 2];
                for (i, a) in self.amp(c).iter().enumerate() {
                    let s = a * k.cos[i] * k.decay[i];
                    g[0] += s * waves[i][0];
                    g[1] += s * waves[i][1];
                }
                g
            })
            .collect()
    }

    pub fn laplacian(&self, p: &EvalPoint) -> Vec<f64> {
        let k = self.expand(p);
        let nsq = &self.bank.norm_sq;
        self.contract(|i| -nsq[i] * k.sin[i] * k.decay[i])
    }

    pub fn time_derivative(&self, p: &EvalPoint) -> Vec<f64> {
        let k = self.expand(p);
        let nsq = &self.bank.norm_sq;
        let kappa = self.kappa;
        self.contract(|i| k.sin[i] * (-nsq[i] * kappa) * k.decay[i])
    }

    /// `∂Φ/∂t − κ∇²Φ`; zero up to rounding.
    pub fn heat_residual(&self, p: &EvalPoint) -> Vec<f64> {
        let dt = self.time_derivative(p);
        let lap = self.laplacian(p);
        dt.iter().zip(&lap).map(|(d, l)| d - self.kappa * l).collect()
    }

    pub fn param_gradients(&self, p: &EvalPoint, upstream: &[f64], trainable: Trainable) -> Result<ParamGrads> {
        if upstream.len() != self.channels {
            return Err(Error::contract(format!(
                "upstream has {} entries for {} channels",
                upstream.len(),
                self.channels
            )));
        }
        let k = self.expand(p);
        let n = self.components();
        let mut amplitudes = vec![0.0; self.channels * n];
        let mut hidden = vec![0.0; n];
        for (c, u) in upstream.iter().enumerate() {
            let row = &mut amplitudes[c * n..(c + 1) * n];
            for i in 0..n {
                row[i] = u * k.sin[i] * k.decay[i];
                hidden[i] += u * self.amp(c)[i];
            }
        }
        let phases = (0..n).map(|i| hidden[i] * k.cos[i] * k.decay[i]).collect();
        let [x0, x1] = p.x;
        let t = p.t;
        let waves = trainable.waves.then(|| {
            self.bank
                .waves
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let along = hidden[i] * k.cos[i] * k.decay[i];
                    let shrink = hidden[i] * k.sin[i] * k.decay[i] * (-2.0 * self.kappa * t);
                    [along * x0 + shrink * w[0], along * x1 + shrink * w[1]]
                })
                .collect()
        });
        let kappa = trainable.kappa.then(|| {
            (0..n)
                .map(|i| hidden[i] * k.sin[i] * k.decay[i] * (-self.bank.norm_sq[i] * t))
                .sum()
        });
        Ok(ParamGrads {
            phases,
            amplitudes,
            bias: upstream.to_vec(),
            waves,
            kappa,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(nu: [f64; 2], phase: f64, amp: f64, bias: f64, kappa: f64) -> HeatField {
        HeatField::new(
            WaveBank::new(vec![nu]).unwrap(),
            FieldParams::new(1, vec![phase], vec![amp], vec![bias], kappa).unwrap(),
        )
        .unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, c: usize, ch: usize) -> HeatField {
        let waves = (0..c)
            .map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)])
            .collect();
        let kappa = rng.random_range(0.0005..0.005);
        HeatField::random(rng, WaveBank::new(waves).unwrap(), ch, kappa, 1.0).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng) -> EvalPoint {
        EvalPoint::new(
            [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            rng.random_range(0.0..3.0),
        )
        .unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn thermal_activation_examples() {
        let v = thermal_activation(&[PI / 2.0], &[4.0 * PI * PI], 0.3, 0.0).unwrap();
        assert_eq!(v, vec![1.0]);

        let kappa = 0.07;
        let v = thermal_activation(&[PI / 2.0], &[4f64.ln() / kappa], kappa, 0.5).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);

        let v = thermal_activation(&[0.3], &[0.0], 0.07, 100.0).unwrap();
        assert_eq!(v, vec![0.3f64.sin()]);

        assert!(matches!(
            thermal_activation(&[0.0], &[1.0], 0.1, -1e-9),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn negative_time_is_rejected() {
        assert!(EvalPoint::new([0.0, 0.0], -0.1).is_err());
        assert!(EvalPoint::new([0.0, 0.0], f64::NAN).is_err());
        assert!(EvalPoint::new([0.0, 0.0], 0.0).is_ok());
    }

    #[test]
    fn cached_norms_are_checked() {
        let waves = vec![[3.0, 4.0], [1.0, -2.0]];
        assert!(WaveBank::with_cached_norms(waves.clone(), &[25.0, 5.0]).is_ok());
        assert!(WaveBank::with_cached_norms(waves.clone(), &[25.0, 5.001]).is_err());
        assert!(WaveBank::new(vec![]).is_err());
        assert!(WaveBank::new(vec![[f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn shape_mismatches_are_contract_errors() {
        let bank = WaveBank::new(vec![[1.0, 0.0]; 3]).unwrap();
        let params = FieldParams::zeros(2, 3, 0.1).unwrap();
        assert!(matches!(HeatField::new(bank, params), Err(Error::Contract(_))));
        assert!(FieldParams::new(2, vec![0.0; 3], vec![0.0; 5], vec![0.0; 2], 0.1).is_err());
        assert!(FieldParams::zeros(3, 1, 0.0).is_err());
        let f = single([1.0, 0.0], 0.0, 1.0, 0.0, 0.1);
        let p = EvalPoint::new([0.0, 0.0], 0.0).unwrap();
        assert!(f.view().param_gradients(&p, &[1.0, 2.0], Trainable::default()).is_err());
    }

    #[test]
    fn zero_amplitudes_give_bias() {
        let bank = WaveBank::new(vec![[3.0, 1.0], [-7.0, 2.0]]).unwrap();
        let params = FieldParams::new(2, vec![0.4, 1.0], vec![0.0; 4], vec![0.25, 0.75], 0.01).unwrap();
        let f = HeatField::new(bank, params).unwrap();
        let p = EvalPoint::new([0.1, -0.3], 0.7).unwrap();
        assert_eq!(f.view().eval(&p), vec![0.25, 0.75]);
        assert_eq!(f.view().spatial_gradient(&p), vec![[0.0, 0.0]; 2]);
        assert_eq!(f.view().laplacian(&p), vec![0.0; 2]);
        assert_eq!(f.view().heat_residual(&p), vec![0.0; 2]);
    }

    #[test]
    fn fully_attenuated_field_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, 16, 3);
        let min_rate = f.bank().norm_sq().iter().fold(f64::MAX, |a, &b| a.min(b)) * f.kappa();
        assert!(min_rate >= 0.01 || min_rate * 1e6 > 50.0);
        let p = EvalPoint::new([0.2, 0.1], 1e6).unwrap();
        for (v, b) in f.view().eval(&p).iter().zip(f.params().bias.iter()) {
            assert!((v - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_component_values() {
        // sin(2π·0.25) · exp(-4π²·0.07)
        let f = single([2.0 * PI, 0.0], 0.0, 1.0, 0.0, 0.07);
        let p = EvalPoint::new([0.25, 0.0], 1.0).unwrap();
        let expected = 0.063_071_313_509_595_72;
        assert!((f.view().eval(&p)[0] - expected).abs() < 1e-15);

        let origin = EvalPoint::new([0.0, 0.0], 0.0).unwrap();
        let g = f.view().spatial_gradient(&origin);
        assert!((g[0][0] - 2.0 * PI).abs() < 1e-15 && g[0][1] == 0.0);

        // eigenfunction of the Laplacian
        let q = EvalPoint::new([0.13, 0.4], 0.6).unwrap();
        let lap = f.view().laplacian(&q)[0];
        let val = f.view().eval(&q)[0];
        assert!((lap + 4.0 * PI * PI * val).abs() < 1e-12);
        let dt = f.view().time_derivative(&q)[0];
        assert!((dt - 0.07 * lap).abs() < 1e-14);
    }

    #[test]
    fn zero_frequency_never_decays() {
        let f = single([0.0, 0.0], 0.3, 1.0, 0.0, 0.07);
        let p = EvalPoint::new([0.1, 0.2], 50.0).unwrap();
        assert_eq!(f.view().time_derivative(&p), vec![0.0]);
        assert_eq!(f.view().eval(&p), vec![0.3f64.sin()]);
    }

    #[test]
    fn attenuation_is_monotone_in_time() {
        let f = single([5.0, -3.0], 0.8, 1.0, 0.0, 0.02);
        let at = |t: f64| f.view().eval(&EvalPoint::new([0.1, 0.3], t).unwrap())[0].abs();
        let mut prev = at(0.0);
        assert_eq!(prev, (5.0 * 0.1 - 3.0 * 0.3 + 0.8f64).sin().abs());
        for k in 1..50 {
            let cur = at(k as f64 * 0.2);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn heat_residual_vanishes_on_fuzzed_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let c = rng.random_range(1..12);
            let f = random_field(&mut rng, c, 3);
            let p = random_point(&mut rng);
            let v = f.view();
            let res = v.heat_residual(&p);
            let dt = v.time_derivative(&p);
            let lap = v.laplacian(&p);
            for c in 0..3 {
                let bound = 1e-9 * (dt[c].abs() + (f.kappa() * lap[c]).abs() + 1.0);
                assert!(res[c].abs() <= bound);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let f = random_field(&mut rng, 6, 2);
            let v = f.view();
            let p = random_point(&mut rng);
            let at = |x: [f64; 2], t: f64| v.eval(&EvalPoint::new(x, t).unwrap());
            let [x0, x1] = p.x();

            let h = 1e-5;
            let grad = v.spatial_gradient(&p);
            for c in 0..2 {
                let fd0 = (at([x0 + h, x1], p.t())[c] - at([x0 - h, x1], p.t())[c]) / (2.0 * h);
                let fd1 = (at([x0, x1 + h], p.t())[c] - at([x0, x1 - h], p.t())[c]) / (2.0 * h);
                assert!(rel_err(grad[c][0], fd0) < 1e-5);
                assert!(rel_err(grad[c][1], fd1) < 1e-5);
            }

            let h = 1e-4;
            let lap = v.laplacian(&p);
            let mid = at([x0, x1], p.t());
            for c in 0..2 {
                let fd = (at([x0 + h, x1], p.t())[c] + at([x0 - h, x1], p.t())[c] + at([x0, x1 + h], p.t())[c]
                    + at([x0, x1 - h], p.t())[c]
                    - 4.0 * mid[c])
                    / (h * h);
                assert!(rel_err(lap[c], fd) < 1e-4, "{} vs {}", lap[c], fd);
            }

            let h = 1e-6;
            let t = p.t() + 2.0 * h;
            let dt = v.time_derivative(&EvalPoint::new(p.x(), t).unwrap());
            for c in 0..2 {
                let fd = (at(p.x(), t + h)[c] - at(p.x(), t - h)[c]) / (2.0 * h);
                assert!(rel_err(dt[c], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let all = Trainable { waves: true, kappa: true };
        for _ in 0..30 {
            let f = random_field(&mut rng, 5, 3);
            let p = random_point(&mut rng);
            let up: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = f.view().param_gradients(&p, &up, all).unwrap();
            let objective = |field: &HeatField| -> f64 {
                field.view().eval(&p).iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            let probe = |edit: &dyn Fn(&mut HeatField, f64)| {
                let mut plus = f.clone();
                edit(&mut plus, h);
                let mut minus = f.clone();
                edit(&mut minus, -h);
                (objective(&plus) - objective(&minus)) / (2.0 * h)
            };
            for i in 0..5 {
                let fd = probe(&|fl, d| fl.params_mut().phases[i] += d);
                assert!(rel_err(g.phases[i], fd) < 1e-5);
                for c in 0..3 {
                    let fd = probe(&|fl, d| fl.params_mut().amplitudes[c * 5 + i] += d);
                    assert!(rel_err(g.amplitudes[c * 5 + i], fd) < 1e-5);
                }
                for axis in 0..2 {
                    let fd = probe(&|fl, d| {
                        let mut w = fl.bank().waves().to_vec();
                        w[i][axis] += d;
                        fl.set_waves(w).unwrap();
                    });
                    assert!(rel_err(g.waves.as_ref().unwrap()[i][axis], fd) < 1e-5);
                }
            }
            for c in 0..3 {
                let fd = probe(&|fl, d| fl.params_mut().bias[c] += d);
                assert!(rel_err(g.bias[c], fd) < 1e-7);
            }
            let hk = 1e-9;
            let mut plus = f.clone();
            plus.params_mut().set_kappa(f.kappa() + hk).unwrap();
            let mut minus = f.clone();
            minus.params_mut().set_kappa(f.kappa() - hk).unwrap();
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * hk);
            assert!(rel_err(g.kappa.unwrap(), fd) < 1e-5);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(&mut rng, 4, 3);
        let p = random_point(&mut rng);
        let g = f
            .view()
            .param_gradients(&p, &[0.0; 3], Trainable { waves: true, kappa: true })
            .unwrap();
        assert!(g.phases.iter().chain(&g.amplitudes).chain(&g.bias).all(|v| *v == 0.0));
        assert!(g.waves.unwrap().iter().flatten().all(|v| *v == 0.0));
        assert_eq!(g.kappa, Some(0.0));
        let g = f.view().param_gradients(&p, &[1.0, 2.0, 3.0], Trainable::default()).unwrap();
        assert_eq!(g.bias, vec![1.0, 2.0, 3.0]);
        assert!(g.waves.is_none() && g.kappa.is_none());
    }

    #[test]
    fn eval_is_linear_in_amplitudes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_field(&mut rng, 7, 3);
        let mut b = a.clone();
        let params = b.params_mut();
        for v in params.amplitudes.iter_mut().chain(params.bias.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut sum = a.clone();
        for (s, v) in sum.params_mut().amplitudes.iter_mut().zip(&b.params().amplitudes) {
            *s = 2.0 * *s - 0.5 * v;
        }
        for (s, v) in sum.params_mut().bias.iter_mut().zip(&b.params().bias) {
            *s = 2.0 * *s - 0.5 * v;
        }
        let p = random_point(&mut rng);
        let (ea, eb, es) = (a.view().eval(&p), b.view().eval(&p), sum.view().eval(&p));
        for c in 0..3 {
            assert!((es[c] - (2.0 * ea[c] - 0.5 * eb[c])).abs() < 1e-12);
        }
    }
}
