//! Brute-force references for the analytic fast paths: supersampled Gaussian
//! convolution, central finite differences and a direct 2-D DFT.
//!
//! Nothing in here uses the attenuation mechanism of the field: the blur
//! reference rasterizes at `t0` and filters by explicit convolution.

use std::f64::consts::PI;

use log::warn;

use crate::error::{Error, Result};
use crate::field::HeatField;
use crate::image_io::ImageBuffer;
use crate::sampling::{rasterize, Domain, SamplingSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    #[default]
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurOracleConfig {
    /// Lattice samples per output pixel (raised further when the field's band
    /// limit needs it, see [`blur_reference`]).
    pub supersample: usize,
    /// Kernel half-width in multiples of σ.
    pub kernel_truncation: f64,
    pub boundary: Boundary,
    /// Rasterize a margin around the domain wide enough for the kernel, so
    /// the boundary policy never touches sampled outputs. The field is defined
    /// on the whole plane, so this is the exact convolution.
    pub extend_domain: bool,
}

impl Default for BlurOracleConfig {
    fn default() -> Self {
        BlurOracleConfig {
            supersample: 8,
            kernel_truncation: 5.0,
            boundary: Boundary::Reflect,
            extend_domain: true,
        }
    }
}

impl BlurOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.supersample == 0 {
            return Err(Error::contract("supersample must be positive"));
        }
        if !(self.kernel_truncation > 0.0) {
            return Err(Error::contract("kernel truncation must be positive"));
        }
        Ok(())
    }
}

/// Samples of `exp(-u²/(2σ²))` at integer offsets `|u| ≤ ceil(truncation·σ)`.
/// Below σ = 0.05 the kernel degenerates to a delta.
pub fn gaussian_kernel(sigma: f64, truncation: f64, normalize: bool) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    if sigma < 0.05 {
        return Ok(vec![1.0]);
    }
    let radius = (truncation * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|u| (-((u * u) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    if normalize {
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
    }
    Ok(k)
}

fn wrap(idx: isize, len: usize, boundary: Boundary) -> usize {
    let n = len as isize;
    match boundary {
        Boundary::Periodic => idx.rem_euclid(n) as usize,
        Boundary::Reflect => {
            // half-sample symmetric: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
            let period = 2 * n;
            let m = idx.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        }
    }
}

/// Convolve along rows with `kx`, then along columns with `ky`.
pub fn convolve_separable(img: &ImageBuffer, kx: &[f64], ky: &[f64], boundary: Boundary) -> Result<ImageBuffer> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let src = img.data();

    let mut tmp = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let out = &mut tmp[(r * w + c) * ch..(r * w + c + 1) * ch];
            for (k, wgt) in kx.iter().enumerate() {
                let cc = wrap(c as isize + k as isize - rx, w, boundary);
                let px = &src[(r * w + cc) * ch..(r * w + cc + 1) * ch];
                for (o, v) in out.iter_mut().zip(px) {
                    *o += wgt * v;
                }
            }
        }
    }

    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for (k, wgt) in ky.iter().enumerate() {
            let rr = wrap(r as isize + k as isize - ry, h, boundary);
            let (dst, row) = (
                &mut out[r * w * ch..(r + 1) * w * ch],
                &tmp[rr * w * ch..(rr + 1) * w * ch],
            );
            for (o, v) in dst.iter_mut().zip(row) {
                *o += wgt * v;
            }
        }
    }
    ImageBuffer::new(w, h, ch, out)
}

/// Direct 2-D convolution with the outer product `ky ⊗ kx`.
pub fn convolve_direct(img: &ImageBuffer, kx: &[f64], ky: &[f64], boundary: Boundary) -> Result<ImageBuffer> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let mut out = vec![0.0; img.data().len()];
    for r in 0..h {
        for c in 0..w {
            for (a, wy) in ky.iter().enumerate() {
                let rr = wrap(r as isize + a as isize - ry, h, boundary);
                for (b, wx) in kx.iter().enumerate() {
                    let cc = wrap(c as isize + b as isize - rx, w, boundary);
                    for k in 0..ch {
                        out[(r * w + c) * ch + k] += wy * wx * img.pixel(rr, cc)[k];
                    }
                }
            }
        }
    }
    ImageBuffer::new(w, h, ch, out)
}

/// Four-point Lagrange weights at fractional offset `f` from node 0 of the
/// nodes {-1, 0, 1, 2}.
fn cubic_lagrange(f: f64) -> [f64; 4] {
    [
        -f * (f - 1.0) * (f - 2.0) / 6.0,
        (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
        -(f + 1.0) * f * (f - 2.0) / 2.0,
        (f + 1.0) * f * (f - 1.0) / 6.0,
    ]
}

/// Taps for reading lattice position `pos` (fractional index).
fn taps(pos: f64) -> Vec<(isize, f64)> {
    let base = pos.floor();
    let f = pos - base;
    let i = base as isize;
    if f == 0.0 {
        vec![(i, 1.0)]
    } else {
        cubic_lagrange(f)
            .iter()
            .enumerate()
            .map(|(k, &w)| (i - 1 + k as isize, w))
            .collect()
    }
}

/// Reference for observing `field` at `t0 + delta_t`: rasterize at `t0` on a
/// fine lattice, convolve with a Gaussian of variance `2κ·delta_t` (domain
/// units), and read the result at the output pixel centers.
///
/// The lattice is the pixel grid of `supersample · k` times the output
/// resolution, where `k ≥ 1` is the smallest integer that also puts at least
/// `supersample` samples per half-period of the bank's highest per-axis
/// frequency. Output centers that fall between lattice samples (even
/// factors) are read with four-point Lagrange interpolation.
pub fn blur_reference(
    field: &HeatField,
    t0: f64,
    delta_t: f64,
    out: &SamplingSpec,
    cfg: &BlurOracleConfig,
) -> Result<ImageBuffer> {
    cfg.validate()?;
    out.validate()?;
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(Error::domain(format!("delta_t must be positive, got {delta_t}")));
    }
    if !(t0 >= 0.0) {
        return Err(Error::domain(format!("t0 must be >= 0, got {t0}")));
    }
    let [ex, ey] = out.domain.extent();
    let out_density = (out.width as f64 / ex).min(out.height as f64 / ey);
    let band_density = field.bank().max_axis_frequency() / PI;
    let k = ((band_density / out_density) - 1e-9).ceil().max(1.0) as usize;
    let s = cfg.supersample * k;

    let sigma = (2.0 * field.kappa() * delta_t).sqrt();
    let (fw, fh) = (out.width * s, out.height * s);
    let (hx, hy) = (ex / fw as f64, ey / fh as f64);
    let (sx, sy) = (sigma / hx, sigma / hy);
    if sx.min(sy) < 1.0 {
        warn!(
            "blur oracle kernel is {:.3} lattice pixels wide; raise the supersample factor",
            sx.min(sy)
        );
    }
    let kx = gaussian_kernel(sx, cfg.kernel_truncation, true)?;
    let ky = gaussian_kernel(sy, cfg.kernel_truncation, true)?;
    let (mx, my) = if cfg.extend_domain {
        (kx.len() / 2 + 2, ky.len() / 2 + 2)
    } else {
        (0, 0)
    };

    let lattice_domain = Domain {
        x: [out.domain.x[0] - mx as f64 * hx, out.domain.x[1] + mx as f64 * hx],
        y: [out.domain.y[0] - my as f64 * hy, out.domain.y[1] + my as f64 * hy],
    };
    let lattice = SamplingSpec::with_domain(fw + 2 * mx, fh + 2 * my, t0, lattice_domain)?;
    let fine = rasterize(field, &lattice)?;
    let blurred = convolve_separable(&fine, &kx, &ky, cfg.boundary)?;

    let ch = field.channels();
    let lw = lattice.width;
    let col_taps: Vec<_> = (0..out.width)
        .map(|j| taps((j as f64 + 0.5) * s as f64 - 0.5 + mx as f64))
        .collect();
    let mut data = Vec::with_capacity(out.width * out.height * ch);
    for i in 0..out.height {
        let row_taps = taps((i as f64 + 0.5) * s as f64 - 0.5 + my as f64);
        for ct in &col_taps {
            let mut px = vec![0.0; ch];
            for &(r, wr) in &row_taps {
                for &(c, wc) in ct {
                    let (r, c) = (
                        wrap(r, lattice.height, cfg.boundary),
                        wrap(c, lw, cfg.boundary),
                    );
                    for (p, v) in px.iter_mut().zip(blurred.pixel(r, c)) {
                        *p += wr * wc * v;
                    }
                }
            }
            data.extend(px);
        }
    }
    ImageBuffer::new(out.width, out.height, ch, data)
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
pub fn finite_diff_gradient<F>(f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let plus = f(&probe);
            probe[i] = theta[i] - h;
            let minus = f(&probe);
            probe[i] = theta[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// DC-centered 2-D DFT magnitude of every channel, by direct row/column
/// transforms. DC lands at `(height / 2, width / 2)`.
pub fn dft_spectrum(img: &ImageBuffer) -> Result<ImageBuffer> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let twiddles = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    };
    let (tw, th) = (twiddles(w), twiddles(h));
    let mut mag = vec![0.0; w * h * ch];
    for c in 0..ch {
        // rows
        let mut rows = vec![(0.0, 0.0); w * h];
        for r in 0..h {
            for u in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for x in 0..w {
                    let v = img.pixel(r, x)[c];
                    let (cr, ci) = tw[(u * x) % w];
                    re += v * cr;
                    im += v * ci;
                }
                rows[r * w + u] = (re, im);
            }
        }
        // columns
        for u in 0..w {
            for v in 0..h {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    let (ar, ai) = rows[y * w + u];
                    let (cr, ci) = th[(v * y) % h];
                    re += ar * cr - ai * ci;
                    im += ar * ci + ai * cr;
                }
                let (sr, sc) = ((v + h / 2) % h, (u + w / 2) % w);
                mag[(sr * w + sc) * ch + c] = re.hypot(im);
            }
        }
    }
    ImageBuffer::new(w, h, ch, mag)
}

/// `log(1 + |X|)` rescaled to [0, 1] (per image, all channels jointly).
pub fn normalized_log_spectrum(spectrum: &ImageBuffer) -> Result<ImageBuffer> {
    let logs: Vec<f64> = spectrum.data().iter().map(|v| v.ln_1p()).collect();
    let peak = logs.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    ImageBuffer::new(
        spectrum.width(),
        spectrum.height(),
        spectrum.channels(),
        logs.iter().map(|v| v * scale).collect(),
    )
}

/// Amplitude of the plane wave `ν` in one channel of a raster, by least
/// squares on {sin(ν·x), cos(ν·x), 1} over the pixel centers of `spec`.
pub fn mode_amplitude(img: &ImageBuffer, spec: &SamplingSpec, nu: [f64; 2], channel: usize) -> Result<f64> {
    if img.width() != spec.width || img.height() != spec.height {
        return Err(Error::contract("raster does not match sampling spec"));
    }
    let (xs, ys) = (spec.xs(), spec.ys());
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (r, y) in ys.iter().enumerate() {
        for (c, x) in xs.iter().enumerate() {
            let (s, co) = (nu[0] * x + nu[1] * y).sin_cos();
            let basis = [s, co, 1.0];
            let v = img.pixel(r, c)[channel];
            for a in 0..3 {
                atb[a] += basis[a] * v;
                for b in 0..3 {
                    ata[a][b] += basis[a] * basis[b];
                }
            }
        }
    }
    let coef = solve3(ata, atb).ok_or_else(|| Error::contract("mode is not identifiable on this grid"))?;
    Ok(coef[0].hypot(coef[1]))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}
