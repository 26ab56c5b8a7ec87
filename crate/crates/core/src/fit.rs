//! Direct per-image fitting: MAE at the observation time plus a total
//! variation prior on the unfiltered (`t = 0`) field, optimized with
//! bias-corrected Adam under a cosine-to-zero schedule.
//!
//! Two evaluation paths exist. The reference path ([`global_objective`],
//! [`tv_loss`]) walks points one at a time through [`FieldView`]; the fitting
//! loops use tensor-product tables and are checked against it in tests.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bank::{kappa_for, KappaMode};
use crate::error::{Error, Result};
use crate::field::{FieldParams, FieldView, HeatField, ParamGrads, Trainable, WaveBank};
use crate::image_io::{mae, psnr, ImageBuffer};
use crate::sampling::{
    attenuated_amplitudes, dot, locate, pixel_grid, rasterize, rasterize_local_grid, scale_to_time, upsampled_len,
    GridBasis, LocalFieldGrid, SamplingSpec,
};

// Independent RNG streams derived from the single user seed.
const PHASE_STREAM: u64 = 1;
const FIT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tv_weight: f64,
    /// TV sample points drawn per step.
    pub tv_samples: usize,
    /// Pixels per step; `None` uses every pixel.
    pub batch: Option<usize>,
    pub seed: u64,
    pub trainable: Trainable,
    /// Keep one report record every this many steps.
    pub report_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 5000,
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tv_weight: 1e-4,
            tv_samples: 1024,
            batch: None,
            seed: 0,
            trainable: Trainable::default(),
            report_every: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.steps == 0 {
            return Err(Error::contract("steps must be positive"));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::contract(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::contract("Adam betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::contract("Adam eps must be positive"));
        }
        if !(self.tv_weight >= 0.0) || !self.tv_weight.is_finite() {
            return Err(Error::contract(format!(
                "tv_weight must be non-negative, got {}",
                self.tv_weight
            )));
        }
        if self.tv_samples == 0 || self.batch == Some(0) || self.report_every == 0 {
            return Err(Error::contract("tv_samples, batch and report_every must be positive"));
        }
        Ok(())
    }
}

/// Adam moments for a flat parameter vector, plus the RNG that drives TV
/// points and pixel batches.
#[derive(Debug, Clone)]
pub struct FitState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    // β1^step and β2^step as running products; `powi` may be evaluated
    // differently depending on inlining.
    beta1_pow: f64,
    beta2_pow: f64,
    rng: ChaCha8Rng,
}

impl FitState {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(FIT_STREAM);
        FitState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            rng,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut FitState, params: &mut [f64], grads: &[f64], lr: f64, cfg: &FitConfig) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::contract(format!(
            "Adam state holds {} entries, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    state.beta1_pow *= cfg.beta1;
    state.beta2_pow *= cfg.beta2;
    let c1 = 1.0 - state.beta1_pow;
    let c2 = 1.0 - state.beta2_pow;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its subgradient with respect to `pred`.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::contract(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("MAE of an empty set"));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| sign(p - t) / n).collect();
    Ok((loss, grad))
}

/// Monte Carlo estimate over `points` of `Σ_c |∇Φ_c(x, 0)|` and its gradient
/// with respect to the field parameters.
pub fn tv_loss(view: &FieldView<'_>, points: &[[f64; 2]], trainable: Trainable) -> Result<(f64, ParamGrads)> {
    if points.is_empty() {
        return Err(Error::contract("TV needs at least one sample point"));
    }
    let (n, ch) = (view.components(), view.channels());
    let waves = view.bank.waves();
    let scale = 1.0 / points.len() as f64;
    let mut total = 0.0;
    let mut d_amp = vec![0.0; ch * n];
    let mut d_phase = vec![0.0; n];
    let mut d_waves = vec![[0.0; 2]; n];
    let mut sin = vec![0.0; n];
    let mut cos = vec![0.0; n];

    for x in points {
        for i in 0..n {
            (sin[i], cos[i]) = (waves[i][0] * x[0] + waves[i][1] * x[1] + view.phases[i]).sin_cos();
        }
        for c in 0..ch {
            let a = &view.amplitudes[c * n..(c + 1) * n];
            let mut g = [0.0; 2];
            for i in 0..n {
                g[0] += a[i] * cos[i] * waves[i][0];
                g[1] += a[i] * cos[i] * waves[i][1];
            }
            let norm = g[0].hypot(g[1]);
            total += norm;
            if norm == 0.0 {
                continue;
            }
            let e = [g[0] / norm * scale, g[1] / norm * scale];
            for i in 0..n {
                let q = waves[i][0] * e[0] + waves[i][1] * e[1];
                d_amp[c * n + i] += cos[i] * q;
                d_phase[i] -= a[i] * sin[i] * q;
                d_waves[i][0] += a[i] * (cos[i] * e[0] - sin[i] * q * x[0]);
                d_waves[i][1] += a[i] * (cos[i] * e[1] - sin[i] * q * x[1]);
            }
        }
    }
    Ok((
        total * scale,
        ParamGrads {
            phases: d_phase,
            amplitudes: d_amp,
            bias: vec![0.0; ch],
            waves: trainable.waves.then_some(d_waves),
            kappa: trainable.kappa.then_some(0.0),
        },
    ))
}

/// Flat parameter vector for a global field: phases, amplitudes, bias, then
/// the wave vectors and `ln κ` when trainable. κ is optimized in log space
/// so that it stays positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub components: usize,
    pub channels: usize,
    pub trainable: Trainable,
}

impl ParamLayout {
    pub fn for_field(field: &HeatField, trainable: Trainable) -> Self {
        ParamLayout {
            components: field.bank().len(),
            channels: field.channels(),
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        let (n, ch) = (self.components, self.channels);
        n + ch * n + ch + if self.trainable.waves { 2 * n } else { 0 } + usize::from(self.trainable.kappa)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, field: &HeatField) -> Vec<f64> {
        let p = field.params();
        let mut theta = Vec::with_capacity(self.len());
        theta.extend_from_slice(&p.phases);
        theta.extend_from_slice(&p.amplitudes);
        theta.extend_from_slice(&p.bias);
        if self.trainable.waves {
            theta.extend(field.bank().waves().iter().flatten());
        }
        if self.trainable.kappa {
            theta.push(field.kappa().ln());
        }
        theta
    }

    pub fn unpack(&self, theta: &[f64], field: &mut HeatField) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::contract("parameter vector does not match layout"));
        }
        let (n, ch) = (self.components, self.channels);
        let (phases, rest) = theta.split_at(n);
        let (amps, rest) = rest.split_at(ch * n);
        let (bias, mut rest) = rest.split_at(ch);
        if self.trainable.waves {
            let (w, r) = rest.split_at(2 * n);
            field.set_waves(w.chunks_exact(2).map(|c| [c[0], c[1]]).collect())?;
            rest = r;
        }
        let p = field.params_mut();
        p.phases.copy_from_slice(phases);
        p.amplitudes.copy_from_slice(amps);
        p.bias.copy_from_slice(bias);
        if self.trainable.kappa {
            p.set_kappa(rest[0].exp())?;
        }
        Ok(())
    }

    /// Flatten gradients in layout order; `kappa` converts the κ gradient to
    /// the log-κ coordinate.
    pub fn flatten(&self, g: &ParamGrads, kappa: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&g.phases);
        out.extend_from_slice(&g.amplitudes);
        out.extend_from_slice(&g.bias);
        if self.trainable.waves {
            let w = g.waves.as_deref().unwrap_or(&[]);
            out.extend(w.iter().flatten());
            out.resize(out.len() + 2 * self.components - 2 * w.len(), 0.0);
        }
        if self.trainable.kappa {
            out.push(g.kappa.unwrap_or(0.0) * kappa);
        }
        out
    }
}

/// Loss breakdown for one evaluation of the fit objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Objective {
    pub mae: f64,
    pub tv: f64,
    pub total: f64,
}

fn add_grads(acc: &mut ParamGrads, other: &ParamGrads, w: f64) {
    let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(a, b)| *a += w * b);
    add(&mut acc.phases, &other.phases);
    add(&mut acc.amplitudes, &other.amplitudes);
    add(&mut acc.bias, &other.bias);
    if let (Some(a), Some(b)) = (acc.waves.as_mut(), other.waves.as_ref()) {
        for (a, b) in a.iter_mut().zip(b) {
            a[0] += w * b[0];
            a[1] += w * b[1];
        }
    }
    if let (Some(a), Some(b)) = (acc.kappa.as_mut(), other.kappa) {
        *a += w * b;
    }
}

fn zero_grads(n: usize, ch: usize, trainable: Trainable) -> ParamGrads {
    ParamGrads {
        phases: vec![0.0; n],
        amplitudes: vec![0.0; ch * n],
        bias: vec![0.0; ch],
        waves: trainable.waves.then(|| vec![[0.0; 2]; n]),
        kappa: trainable.kappa.then_some(0.0),
    }
}

/// Reference evaluation of the global objective: MAE of the `t = 1` raster
/// against `target` plus `tv_weight` times TV over the fixed `tv_points`.
/// Gradients are in [`ParamLayout`] order.
pub fn global_objective(
    field: &HeatField,
    target: &ImageBuffer,
    tv_points: &[[f64; 2]],
    tv_weight: f64,
    trainable: Trainable,
) -> Result<(Objective, Vec<f64>)> {
    check_target(field, target)?;
    let view = field.view();
    let spec = SamplingSpec::new(target.width(), target.height(), 1.0)?;
    let points = pixel_grid(&spec)?;
    let pred: Vec<f64> = points.iter().flat_map(|p| view.eval(p)).collect();
    let (mae_value, upstream) = mae_loss(&pred, target.data())?;

    let ch = field.channels();
    let mut grads = zero_grads(field.bank().len(), ch, trainable);
    for (k, p) in points.iter().enumerate() {
        let g = view.param_gradients(p, &upstream[k * ch..(k + 1) * ch], trainable)?;
        add_grads(&mut grads, &g, 1.0);
    }
    let (tv_value, tv_grads) = tv_loss(&view, tv_points, trainable)?;
    add_grads(&mut grads, &tv_grads, tv_weight);

    let layout = ParamLayout::for_field(field, trainable);
    Ok((
        Objective {
            mae: mae_value,
            tv: tv_value,
            total: mae_value + tv_weight * tv_value,
        },
        layout.flatten(&grads, field.kappa()),
    ))
}

fn check_target(field: &HeatField, target: &ImageBuffer) -> Result<()> {
    if target.channels() != field.channels() {
        return Err(Error::contract(format!(
            "target has {} channels, field {}",
            target.channels(),
            field.channels()
        )));
    }
    Ok(())
}

/// Per-row partial sums of the MAE pass.
struct MaeRow {
    abs: f64,
    count: usize,
    sin: Vec<f64>,
    cos: Vec<f64>,
    bias: Vec<f64>,
    cos_x: Vec<f64>,
    cos_y: Vec<f64>,
}

/// MAE of the raster at `spec.t` over the selected pixels, with gradients.
/// `columns[row]` lists the pixels of a mini-batch; `None` takes them all.
fn mae_pass(
    field: &HeatField,
    target: &ImageBuffer,
    spec: &SamplingSpec,
    columns: Option<&[Vec<usize>]>,
    trainable: Trainable,
) -> (f64, ParamGrads) {
    let view = field.view();
    let (n, ch, w) = (view.components(), view.channels(), spec.width);
    let (xs, ys) = (spec.xs(), spec.ys());
    let basis = GridBasis::new(field.bank(), view.phases, &xs, &ys);
    let amps = attenuated_amplitudes(&view, spec.t);
    let all: Vec<usize> = (0..w).collect();
    let wave_terms = trainable.waves;

    let rows: Vec<MaeRow> = (0..spec.height)
        .into_par_iter()
        .map(|row| {
            let cols = columns.map_or(&all[..], |c| &c[row][..]);
            let mut acc = MaeRow {
                abs: 0.0,
                count: cols.len(),
                sin: vec![0.0; ch * n],
                cos: vec![0.0; ch * n],
                bias: vec![0.0; ch],
                cos_x: if wave_terms { vec![0.0; ch * n] } else { Vec::new() },
                cos_y: if wave_terms { vec![0.0; ch * n] } else { Vec::new() },
            };
            let mut s = vec![0.0; n];
            let mut co = vec![0.0; n];
            for &col in cols {
                basis.pixel(row, col, &mut s, &mut co);
                let truth = target.pixel(row, col);
                for c in 0..ch {
                    let a = &amps[c * n..(c + 1) * n];
                    let pred = view.bias[c] + dot(a, &s);
                    let diff = pred - truth[c];
                    acc.abs += diff.abs();
                    let u = sign(diff);
                    if u == 0.0 {
                        continue;
                    }
                    acc.bias[c] += u;
                    let (fs, fc) = (&mut acc.sin[c * n..(c + 1) * n], &mut acc.cos[c * n..(c + 1) * n]);
                    for i in 0..n {
                        fs[i] += u * s[i];
                        fc[i] += u * co[i];
                    }
                    if wave_terms {
                        let (x, y) = (xs[col], ys[row]);
                        for i in 0..n {
                            acc.cos_x[c * n + i] += u * co[i] * x;
                            acc.cos_y[c * n + i] += u * co[i] * y;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = MaeRow {
        abs: 0.0,
        count: 0,
        sin: vec![0.0; ch * n],
        cos: vec![0.0; ch * n],
        bias: vec![0.0; ch],
        cos_x: vec![0.0; if wave_terms { ch * n } else { 0 }],
        cos_y: vec![0.0; if wave_terms { ch * n } else { 0 }],
    };
    for r in &rows {
        total.abs += r.abs;
        total.count += r.count;
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        add(&mut total.sin, &r.sin);
        add(&mut total.cos, &r.cos);
        add(&mut total.bias, &r.bias);
        add(&mut total.cos_x, &r.cos_x);
        add(&mut total.cos_y, &r.cos_y);
    }
    let inv = 1.0 / (total.count * ch) as f64;
    let decay = field.bank().decay(view.kappa, spec.t);
    let waves = field.bank().waves();
    let nsq = field.bank().norm_sq();

    let mut g = zero_grads(n, ch, trainable);
    for c in 0..ch {
        g.bias[c] = total.bias[c] * inv;
        for i in 0..n {
            let k = c * n + i;
            let ad = view.amplitudes[k] * decay[i] * inv;
            g.amplitudes[k] = decay[i] * total.sin[k] * inv;
            g.phases[i] += ad * total.cos[k];
            if let Some(gw) = g.waves.as_mut() {
                let shrink = -2.0 * view.kappa * spec.t * total.sin[k];
                gw[i][0] += ad * (total.cos_x[k] + shrink * waves[i][0]);
                gw[i][1] += ad * (total.cos_y[k] + shrink * waves[i][1]);
            }
            if let Some(gk) = g.kappa.as_mut() {
                *gk += ad * (-nsq[i] * spec.t) * total.sin[k];
            }
        }
    }
    (total.abs * inv, g)
}

struct TvRow {
    sum: f64,
    k_cos: Vec<f64>,
    k_sin: Vec<f64>,
    w_x: Vec<f64>,
    w_y: Vec<f64>,
}

/// TV over the tensor-product point set `xs × ys` at `t = 0`.
fn tv_pass(field: &HeatField, xs: &[f64], ys: &[f64], trainable: Trainable) -> (f64, ParamGrads) {
    let view = field.view();
    let (n, ch) = (view.components(), view.channels());
    let waves = field.bank().waves();
    let basis = GridBasis::new(field.bank(), view.phases, xs, ys);
    let (anu_x, anu_y): (Vec<f64>, Vec<f64>) = view
        .amplitudes
        .iter()
        .enumerate()
        .map(|(k, a)| (a * waves[k % n][0], a * waves[k % n][1]))
        .unzip();
    let wave_terms = trainable.waves;
    let scale = 1.0 / (xs.len() * ys.len()) as f64;

    let rows: Vec<TvRow> = (0..ys.len())
        .into_par_iter()
        .map(|row| {
            let extra = if wave_terms { 2 * ch * n } else { 0 };
            let mut acc = TvRow {
                sum: 0.0,
                k_cos: vec![0.0; ch * n],
                k_sin: vec![0.0; ch * n],
                w_x: vec![0.0; extra],
                w_y: vec![0.0; extra],
            };
            let mut s = vec![0.0; n];
            let mut co = vec![0.0; n];
            for (col, &x) in xs.iter().enumerate() {
                basis.pixel(row, col, &mut s, &mut co);
                for c in 0..ch {
                    let r = c * n..(c + 1) * n;
                    let gx = dot(&anu_x[r.clone()], &co);
                    let gy = dot(&anu_y[r.clone()], &co);
                    let norm = gx.hypot(gy);
                    acc.sum += norm;
                    if norm == 0.0 {
                        continue;
                    }
                    let (ex, ey) = (gx / norm, gy / norm);
                    let (kc, ks) = (&mut acc.k_cos[r.clone()], &mut acc.k_sin[r]);
                    for i in 0..n {
                        let q = waves[i][0] * ex + waves[i][1] * ey;
                        kc[i] += co[i] * q;
                        ks[i] += s[i] * q;
                    }
                    if wave_terms {
                        // [Σ co·e - Σ s·q·x] per component and axis
                        let y = ys[row];
                        for i in 0..n {
                            let q = waves[i][0] * ex + waves[i][1] * ey;
                            let k = 2 * (c * n + i);
                            acc.w_x[k] += co[i] * ex;
                            acc.w_x[k + 1] -= s[i] * q * x;
                            acc.w_y[k] += co[i] * ey;
                            acc.w_y[k + 1] -= s[i] * q * y;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut sum = 0.0;
    let mut k_cos = vec![0.0; ch * n];
    let mut k_sin = vec![0.0; ch * n];
    let mut w_x = vec![0.0; if wave_terms { 2 * ch * n } else { 0 }];
    let mut w_y = w_x.clone();
    for r in &rows {
        sum += r.sum;
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        add(&mut k_cos, &r.k_cos);
        add(&mut k_sin, &r.k_sin);
        add(&mut w_x, &r.w_x);
        add(&mut w_y, &r.w_y);
    }

    let mut g = zero_grads(n, ch, trainable);
    for c in 0..ch {
        for i in 0..n {
            let k = c * n + i;
            let a = view.amplitudes[k];
            g.amplitudes[k] = k_cos[k] * scale;
            g.phases[i] -= a * k_sin[k] * scale;
            if let Some(gw) = g.waves.as_mut() {
                gw[i][0] += a * (w_x[2 * k] + w_x[2 * k + 1]) * scale;
                gw[i][1] += a * (w_y[2 * k] + w_y[2 * k + 1]) * scale;
            }
        }
    }
    (sum * scale, g)
}

/// Side lengths of the random product grid holding about `samples` points.
fn tv_grid_shape(samples: usize) -> (usize, usize) {
    let gx = ((samples as f64).sqrt().round() as usize).max(1);
    (gx, samples.div_ceil(gx))
}

fn uniform_coords(rng: &mut ChaCha8Rng, count: usize, range: [f64; 2]) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(range[0]..range[1])).collect()
}

/// One row of a fit report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitRecord {
    pub step: usize,
    pub lr: f64,
    pub mae: f64,
    pub tv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub records: Vec<FitRecord>,
    /// MAE of the fitted field against its target(s) after the last update.
    pub final_mae: f64,
    pub final_psnr: f64,
}

impl FitReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Zero-amplitude field over `bank` whose bias is the target's channel mean.
/// Phases are uniform in `[-π, π)`.
pub fn init_global_field(target: &ImageBuffer, bank: WaveBank, kappa: f64, seed: u64) -> Result<HeatField> {
    let n = bank.len();
    let phases = random_phases(n, seed);
    let params = FieldParams::new(
        target.channels(),
        phases,
        vec![0.0; target.channels() * n],
        target.mean(),
        kappa,
    )?;
    HeatField::new(bank, params)
}

fn random_phases(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PHASE_STREAM);
    (0..count).map(|_| rng.random_range(-PI..PI)).collect()
}

/// κ for a global fit: the target's sampling rate along its longer side,
/// which spans the unit interval.
pub fn global_kappa(target: &ImageBuffer, mode: KappaMode) -> Result<f64> {
    kappa_for(target.width().max(target.height()) as f64, mode)
}

/// Fit a fresh field over `bank` to `target` observed at `t = 1`.
pub fn fit_global_field(
    target: &ImageBuffer,
    bank: WaveBank,
    kappa: f64,
    cfg: &FitConfig,
) -> Result<(HeatField, FitReport)> {
    let field = init_global_field(target, bank, kappa, cfg.seed)?;
    refine_global_field(field, target, cfg)
}

/// Run the fitting loop from an existing field.
pub fn refine_global_field(mut field: HeatField, target: &ImageBuffer, cfg: &FitConfig) -> Result<(HeatField, FitReport)> {
    cfg.validate()?;
    check_target(&field, target)?;
    let spec = SamplingSpec::new(target.width(), target.height(), 1.0)?;
    let layout = ParamLayout::for_field(&field, cfg.trainable);
    let mut theta = layout.pack(&field);
    let mut state = FitState::new(layout.len(), cfg.seed);
    let (gx, gy) = tv_grid_shape(cfg.tv_samples);
    let pixels = target.width() * target.height();
    let batch = cfg.batch.filter(|&b| b < pixels);
    let mut report = FitReport::default();
    let mut last_finite = None;

    for step in 0..cfg.steps {
        layout.unpack(&theta, &mut field)?;
        let columns = batch.map(|b| sample_batch(state.rng_mut(), target.width(), target.height(), b));
        let tv_xs = uniform_coords(state.rng_mut(), gx, spec.domain.x);
        let tv_ys = uniform_coords(state.rng_mut(), gy, spec.domain.y);

        let (mae_value, mut grads) = mae_pass(&field, target, &spec, columns.as_deref(), cfg.trainable);
        let (tv_value, tv_grads) = tv_pass(&field, &tv_xs, &tv_ys, cfg.trainable);
        add_grads(&mut grads, &tv_grads, cfg.tv_weight);
        let total = mae_value + cfg.tv_weight * tv_value;
        if !total.is_finite() {
            return Err(Error::Diverged { step, last_finite });
        }
        last_finite = Some(step);

        let lr = cosine_lr(step, cfg.steps, cfg.lr0);
        if step % cfg.report_every == 0 {
            report.records.push(FitRecord {
                step,
                lr,
                mae: mae_value,
                tv: tv_value,
                total,
            });
        }
        let flat = layout.flatten(&grads, field.kappa());
        adam_step(&mut state, &mut theta, &flat, lr, cfg)?;
    }
    layout.unpack(&theta, &mut field)?;

    let raster = rasterize(&field, &spec)?;
    if raster.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: cfg.steps,
            last_finite,
        });
    }
    report.final_mae = mae(&raster, target)?;
    report.final_psnr = psnr(&raster.clamped(), target)?;
    Ok((field, report))
}

/// Uniform mini-batch of `count` distinct pixels, grouped by row.
fn sample_batch(rng: &mut ChaCha8Rng, width: usize, height: usize, count: usize) -> Vec<Vec<usize>> {
    let picked = rand::seq::index::sample(rng, width * height, count);
    let mut idx: Vec<usize> = picked.into_iter().collect();
    idx.sort_unstable();
    let mut rows = vec![Vec::new(); height];
    for k in idx {
        rows[k / width].push(k % width);
    }
    rows
}

/// Supervision image for a local grid: the ground truth seen at upsampling
/// factor `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTarget {
    pub scale: f64,
    pub image: ImageBuffer,
}

/// Zero-amplitude grid over `lr` with uniform random phases in every cell.
pub fn init_local_grid(lr: &ImageBuffer, bank: WaveBank, kappa: f64, seed: u64) -> Result<LocalFieldGrid> {
    let phases = random_phases(lr.width() * lr.height() * bank.len(), seed);
    LocalFieldGrid::from_lr_image(lr, bank, kappa, phases)
}

/// Everything one cell needs to evaluate its supervised pixels: the static
/// part of the phase argument (`ν·x_local`) as sin/cos tables, plus where
/// each pixel's truth lives.
#[derive(Default)]
struct CellPixels {
    /// (target index, offset of the pixel in that target's data)
    refs: Vec<(usize, usize)>,
    sin: Vec<f64>,
    cos: Vec<f64>,
}

struct CellGrads {
    abs: Vec<f64>,
    tv: f64,
    phases: Vec<f64>,
    amplitudes: Vec<f64>,
}

fn local_tables(grid: &LocalFieldGrid, targets: &[LocalTarget]) -> Result<Vec<CellPixels>> {
    let (h, w, n) = (grid.height(), grid.width(), grid.bank().len());
    let waves = grid.bank().waves();
    let mut cells: Vec<CellPixels> = (0..h * w).map(|_| CellPixels::default()).collect();
    for (k, tgt) in targets.iter().enumerate() {
        let img = &tgt.image;
        let (wo, ho) = (img.width(), img.height());
        for row in 0..ho {
            let (cr, ly) = locate(row, ho, h);
            for col in 0..wo {
                let (cc, lx) = locate(col, wo, w);
                let cell = &mut cells[cr * w + cc];
                cell.refs.push((k, (row * wo + col) * img.channels()));
                for wv in waves {
                    let (s, c) = (wv[0] * lx + wv[1] * ly).sin_cos();
                    cell.sin.push(s);
                    cell.cos.push(c);
                }
            }
        }
    }
    debug_assert!(cells.iter().all(|c| c.sin.len() == c.refs.len() * n));
    Ok(cells)
}

fn check_local_targets(grid: &LocalFieldGrid, targets: &[LocalTarget]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::contract("local fit needs at least one target"));
    }
    for t in targets {
        if !(t.scale >= 1.0) || !t.scale.is_finite() {
            return Err(Error::domain(format!("target scale must be >= 1, got {}", t.scale)));
        }
        let (ew, eh) = (upsampled_len(grid.width(), t.scale), upsampled_len(grid.height(), t.scale));
        if t.image.width() != ew || t.image.height() != eh || t.image.channels() != grid.channels() {
            return Err(Error::contract(format!(
                "target at scale {} is {}x{}x{}, expected {}x{}x{}",
                t.scale,
                t.image.width(),
                t.image.height(),
                t.image.channels(),
                ew,
                eh,
                grid.channels()
            )));
        }
    }
    Ok(())
}

/// Fit the per-cell phases and amplitudes of a fresh grid over `lr` against
/// every target jointly, each observed at `t = 1/r²`. Biases stay equal to
/// the LR pixels.
pub fn fit_local_grid(
    lr: &ImageBuffer,
    targets: &[LocalTarget],
    bank: WaveBank,
    kappa: f64,
    cfg: &FitConfig,
) -> Result<(LocalFieldGrid, FitReport)> {
    let grid = init_local_grid(lr, bank, kappa, cfg.seed)?;
    refine_local_grid(grid, targets, cfg)
}

/// The objective weighs every target equally: it is the mean of the
/// per-target MAEs, plus the TV term over points spread across all cells.
pub fn refine_local_grid(
    mut grid: LocalFieldGrid,
    targets: &[LocalTarget],
    cfg: &FitConfig,
) -> Result<(LocalFieldGrid, FitReport)> {
    cfg.validate()?;
    if cfg.trainable.waves || cfg.trainable.kappa {
        return Err(Error::contract(
            "local grids share one bank and κ; only phases and amplitudes are fitted",
        ));
    }
    if cfg.batch.is_some() {
        return Err(Error::contract("local fits always use every target pixel"));
    }
    check_local_targets(&grid, targets)?;
    let (h, w, n, ch) = (grid.height(), grid.width(), grid.bank().len(), grid.channels());
    let cells = h * w;
    let tables = local_tables(&grid, targets)?;
    let decays: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| Ok(grid.bank().decay(grid.kappa(), scale_to_time(1.0 / t.scale)?)))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = targets
        .iter()
        .map(|t| 1.0 / (t.image.data().len() * targets.len()) as f64)
        .collect();
    let waves = grid.bank().waves().to_vec();

    let n_phase = cells * n;
    let mut theta: Vec<f64> = grid.phases.iter().chain(&grid.amplitudes).copied().collect();
    let mut state = FitState::new(theta.len(), cfg.seed);
    let mut report = FitReport::default();
    let mut last_finite = None;

    for step in 0..cfg.steps {
        let mut points: Vec<Vec<[f64; 2]>> = vec![Vec::new(); cells];
        let rng = state.rng_mut();
        for _ in 0..cfg.tv_samples {
            let gx = rng.random_range(0.0..w as f64);
            let gy = rng.random_range(0.0..h as f64);
            let (cx, cy) = ((gx.floor() as usize).min(w - 1), (gy.floor() as usize).min(h - 1));
            points[cy * w + cx].push([gx - cx as f64 - 0.5, gy - cy as f64 - 0.5]);
        }
        let tv_scale = cfg.tv_weight / cfg.tv_samples as f64;
        let (phases, amps) = theta.split_at(n_phase);

        let per_cell: Vec<CellGrads> = (0..cells)
            .into_par_iter()
            .map(|idx| {
                let b = &phases[idx * n..(idx + 1) * n];
                let a = &amps[idx * ch * n..(idx + 1) * ch * n];
                let bias = &grid.bias()[idx * ch..(idx + 1) * ch];
                local_cell_pass(
                    &tables[idx],
                    &points[idx],
                    b,
                    a,
                    bias,
                    &waves,
                    targets,
                    &decays,
                    &weights,
                    tv_scale,
                )
            })
            .collect();

        let mut abs = vec![0.0; targets.len()];
        let mut tv_sum = 0.0;
        let mut grads = vec![0.0; theta.len()];
        for (idx, c) in per_cell.iter().enumerate() {
            abs.iter_mut().zip(&c.abs).for_each(|(a, b)| *a += b);
            tv_sum += c.tv;
            grads[idx * n..(idx + 1) * n].copy_from_slice(&c.phases);
            grads[n_phase + idx * ch * n..n_phase + (idx + 1) * ch * n].copy_from_slice(&c.amplitudes);
        }
        let mae_value = abs
            .iter()
            .zip(targets)
            .map(|(s, t)| s / t.image.data().len() as f64)
            .sum::<f64>()
            / targets.len() as f64;
        let tv_value = tv_sum / cfg.tv_samples as f64;
        let total = mae_value + cfg.tv_weight * tv_value;
        if !total.is_finite() {
            return Err(Error::Diverged { step, last_finite });
        }
        last_finite = Some(step);

        let lr = cosine_lr(step, cfg.steps, cfg.lr0);
        if step % cfg.report_every == 0 {
            report.records.push(FitRecord {
                step,
                lr,
                mae: mae_value,
                tv: tv_value,
                total,
            });
        }
        adam_step(&mut state, &mut theta, &grads, lr, cfg)?;
    }

    grid.phases.copy_from_slice(&theta[..n_phase]);
    grid.amplitudes.copy_from_slice(&theta[n_phase..]);
    let (mut mae_sum, mut psnr_sum) = (0.0, 0.0);
    for t in targets {
        let raster = rasterize_local_grid(&grid, t.scale)?;
        mae_sum += mae(&raster, &t.image)?;
        psnr_sum += psnr(&raster.clamped(), &t.image)?;
    }
    report.final_mae = mae_sum / targets.len() as f64;
    report.final_psnr = psnr_sum / targets.len() as f64;
    Ok((grid, report))
}

#[allow(clippy::too_many_arguments)]
fn local_cell_pass(
    table: &CellPixels,
    points: &[[f64; 2]],
    phases: &[f64],
    amps: &[f64],
    bias: &[f64],
    waves: &[[f64; 2]],
    targets: &[LocalTarget],
    decays: &[Vec<f64>],
    weights: &[f64],
    tv_scale: f64,
) -> CellGrads {
    let (n, ch) = (phases.len(), bias.len());
    let (sin_b, cos_b): (Vec<f64>, Vec<f64>) = phases.iter().map(|b| b.sin_cos()).unzip();
    let mut out = CellGrads {
        abs: vec![0.0; targets.len()],
        tv: 0.0,
        phases: vec![0.0; n],
        amplitudes: vec![0.0; ch * n],
    };
    // Σ u·d·sin and Σ u·d·cos per channel and component
    let mut f_sin = vec![0.0; ch * n];
    let mut f_cos = vec![0.0; ch * n];
    let mut sd = vec![0.0; n];
    let mut cd = vec![0.0; n];

    for (p, &(k, offset)) in table.refs.iter().enumerate() {
        let (sa, ca) = (&table.sin[p * n..(p + 1) * n], &table.cos[p * n..(p + 1) * n]);
        let d = &decays[k];
        for i in 0..n {
            sd[i] = (sa[i] * cos_b[i] + ca[i] * sin_b[i]) * d[i];
            cd[i] = (ca[i] * cos_b[i] - sa[i] * sin_b[i]) * d[i];
        }
        let truth = &targets[k].image.data()[offset..offset + ch];
        for c in 0..ch {
            let a = &amps[c * n..(c + 1) * n];
            let pred = bias[c] + dot(a, &sd);
            let diff = pred - truth[c];
            out.abs[k] += diff.abs();
            let u = sign(diff) * weights[k];
            if u == 0.0 {
                continue;
            }
            let (fs, fc) = (&mut f_sin[c * n..(c + 1) * n], &mut f_cos[c * n..(c + 1) * n]);
            for i in 0..n {
                fs[i] += u * sd[i];
                fc[i] += u * cd[i];
            }
        }
    }

    let mut s = vec![0.0; n];
    let mut co = vec![0.0; n];
    for x in points {
        for i in 0..n {
            (s[i], co[i]) = (waves[i][0] * x[0] + waves[i][1] * x[1] + phases[i]).sin_cos();
        }
        for c in 0..ch {
            let a = &amps[c * n..(c + 1) * n];
            let mut g = [0.0; 2];
            for i in 0..n {
                g[0] += a[i] * co[i] * waves[i][0];
                g[1] += a[i] * co[i] * waves[i][1];
            }
            let norm = g[0].hypot(g[1]);
            out.tv += norm;
            if norm == 0.0 || tv_scale == 0.0 {
                continue;
            }
            let e = [g[0] / norm * tv_scale, g[1] / norm * tv_scale];
            for i in 0..n {
                let q = waves[i][0] * e[0] + waves[i][1] * e[1];
                out.amplitudes[c * n + i] += co[i] * q;
                out.phases[i] -= a[i] * s[i] * q;
            }
        }
    }

    for c in 0..ch {
        for i in 0..n {
            let k = c * n + i;
            out.amplitudes[k] += f_sin[k];
            out.phases[i] += amps[k] * f_cos[k];
        }
    }
    out
}

/// Mean of `Σ_c |∇Φ_c(x, 0)|` over `count` uniform points of the domain for
/// a `width × height` raster.
pub fn mean_gradient_norm(field: &HeatField, width: usize, height: usize, count: usize, seed: u64) -> Result<f64> {
    let spec = SamplingSpec::new(width, height, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f64; 2]> = (0..count)
        .map(|_| {
            [
                rng.random_range(spec.domain.x[0]..spec.domain.x[1]),
                rng.random_range(spec.domain.y[0]..spec.domain.y[1]),
            ]
        })
        .collect();
    let view = field.view();
    Ok(tv_loss(&view, &points, Trainable::default())?.0)
}

/// Mean over points of `Σ_c |∇Φ_c(x, 0)|` for a local grid, with `per_cell`
/// uniform points in each cell (local units).
pub fn local_mean_gradient_norm(grid: &LocalFieldGrid, per_cell: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for row in 0..grid.height() {
        for col in 0..grid.width() {
            let points: Vec<[f64; 2]> = (0..per_cell)
                .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                .collect();
            total += tv_loss(&grid.cell(row, col), &points, Trainable::default())?.0;
        }
    }
    Ok(total / (grid.height() * grid.width()) as f64)
}
