//! Raster grids, the scale/time law, and rasterization of global fields and
//! local-field grids.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{EvalPoint, FieldView, HeatField, WaveBank};
use crate::image_io::ImageBuffer;

/// Axis-aligned rectangle in field coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Default for Domain {
    fn default() -> Self {
        Domain {
            x: [-0.5, 0.5],
            y: [-0.5, 0.5],
        }
    }
}

impl Domain {
    /// Domain for a `width × height` raster: the longer side spans
    /// `[-0.5, 0.5]` and the shorter side is shrunk so both axes have the
    /// same sampling density.
    pub fn for_raster(width: usize, height: usize) -> Domain {
        let longest = width.max(height) as f64;
        let hx = 0.5 * width as f64 / longest;
        let hy = 0.5 * height as f64 / longest;
        Domain {
            x: [-hx, hx],
            y: [-hy, hy],
        }
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.x[1] - self.x[0], self.y[1] - self.y[0]]
    }

    fn validate(&self) -> Result<()> {
        let [ex, ey] = self.extent();
        if !(ex > 0.0 && ey > 0.0) || !ex.is_finite() || !ey.is_finite() {
            return Err(Error::contract(format!("degenerate domain {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    pub width: usize,
    pub height: usize,
    pub t: f64,
    pub domain: Domain,
}

impl SamplingSpec {
    /// `width × height` grid over the equal-density domain for that shape.
    pub fn new(width: usize, height: usize, t: f64) -> Result<Self> {
        Self::with_domain(width, height, t, Domain::for_raster(width, height))
    }

    pub fn with_domain(width: usize, height: usize, t: f64, domain: Domain) -> Result<Self> {
        let spec = SamplingSpec {
            width,
            height,
            t,
            domain,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("sampling grid must be non-empty"));
        }
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return Err(Error::domain(format!("sampling time must be >= 0, got {}", self.t)));
        }
        self.domain.validate()
    }

    /// Pixel-center x coordinates, left to right.
    pub fn xs(&self) -> Vec<f64> {
        centers(self.width, self.domain.x)
    }

    /// Pixel-center y coordinates, top to bottom.
    pub fn ys(&self) -> Vec<f64> {
        centers(self.height, self.domain.y)
    }

    /// Samples per unit domain along x.
    pub fn density(&self) -> f64 {
        self.width as f64 / self.domain.extent()[0]
    }
}

// Offsets from the middle, (2k+1-n)/(2n), come from exact integers: grids
// that nest (n and 3n, say) give bit-identical coordinates at coinciding
// centers, and the grid is exactly symmetric about the middle.
fn centers(n: usize, range: [f64; 2]) -> Vec<f64> {
    let extent = range[1] - range[0];
    let mid = 0.5 * (range[0] + range[1]);
    (0..n)
        .map(|k| mid + ((2 * k + 1) as f64 - n as f64) / (2 * n) as f64 * extent)
        .collect()
}

/// Subsampling by `s` is observed at `t = s²`; upsampling by `r` is `s = 1/r`.
pub fn scale_to_time(s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::domain(format!("scale factor must be positive, got {s}")));
    }
    Ok(s * s)
}

/// Row-major evaluation points at pixel centers.
pub fn pixel_grid(spec: &SamplingSpec) -> Result<Vec<EvalPoint>> {
    spec.validate()?;
    let xs = spec.xs();
    spec.ys()
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| EvalPoint::new([x, y], spec.t)))
        .collect()
}

/// `sin`/`cos` of `w · coord + phase` for every coordinate and component,
/// laid out `[coord][component]`.
pub(crate) struct AxisTable {
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
    pub components: usize,
}

impl AxisTable {
    pub fn new(coords: &[f64], freqs: &[f64], phases: Option<&[f64]>) -> Self {
        let c = freqs.len();
        let mut sin = Vec::with_capacity(coords.len() * c);
        let mut cos = Vec::with_capacity(coords.len() * c);
        for &u in coords {
            for (i, w) in freqs.iter().enumerate() {
                let arg = w * u + phases.map_or(0.0, |p| p[i]);
                let (s, co) = arg.sin_cos();
                sin.push(s);
                cos.push(co);
            }
        }
        AxisTable {
            sin,
            cos,
            components: c,
        }
    }

    pub fn row(&self, k: usize) -> (&[f64], &[f64]) {
        let r = k * self.components..(k + 1) * self.components;
        (&self.sin[r.clone()], &self.cos[r])
    }
}

/// Evaluates `sin` and `cos` of `ν·x + b` over a tensor-product grid by
/// angle addition of per-column and per-row tables.
pub(crate) struct GridBasis {
    pub cols: AxisTable,
    pub rows: AxisTable,
}

impl GridBasis {
    pub fn new(bank: &WaveBank, phases: &[f64], xs: &[f64], ys: &[f64]) -> Self {
        let wx: Vec<f64> = bank.waves().iter().map(|w| w[0]).collect();
        let wy: Vec<f64> = bank.waves().iter().map(|w| w[1]).collect();
        GridBasis {
            cols: AxisTable::new(xs, &wx, Some(phases)),
            rows: AxisTable::new(ys, &wy, None),
        }
    }

    /// Fill `sin`/`cos` for the pixel at (`row`, `col`).
    #[inline]
    pub fn pixel(&self, row: usize, col: usize, sin: &mut [f64], cos: &mut [f64]) {
        let (sx, cx) = self.cols.row(col);
        let (sy, cy) = self.rows.row(row);
        for i in 0..sin.len() {
            sin[i] = sx[i] * cy[i] + cx[i] * sy[i];
            cos[i] = cx[i] * cy[i] - sx[i] * sy[i];
        }
    }
}

/// Dot product with eight independent partial sums. The summation order is
/// fixed, so results are reproducible, and the partial sums let the
/// compiler vectorize where a single running sum cannot.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 8];
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Amplitudes with the per-component attenuation folded in.
pub(crate) fn attenuated_amplitudes(view: &FieldView<'_>, t: f64) -> Vec<f64> {
    let decay = view.bank.decay(view.kappa, t);
    let n = view.components();
    view.amplitudes
        .iter()
        .enumerate()
        .map(|(k, a)| a * decay[k % n])
        .collect()
}

/// Evaluate the field at every pixel center of `spec`. Values are not
/// clamped. Rows are evaluated in parallel; each pixel is computed
/// independently so the result does not depend on the thread count.
pub fn rasterize(field: &HeatField, spec: &SamplingSpec) -> Result<ImageBuffer> {
    spec.validate()?;
    let view = field.view();
    let (xs, ys) = (spec.xs(), spec.ys());
    let basis = GridBasis::new(field.bank(), view.phases, &xs, &ys);
    let amps = attenuated_amplitudes(&view, spec.t);
    let (n, ch, w) = (view.components(), view.channels(), spec.width);

    let mut data = vec![0.0; spec.width * spec.height * ch];
    data.par_chunks_mut(w * ch).enumerate().for_each(|(row, out)| {
        let mut sin = vec![0.0; n];
        let mut cos = vec![0.0; n];
        for col in 0..w {
            basis.pixel(row, col, &mut sin, &mut cos);
            for c in 0..ch {
                let a = &amps[c * n..(c + 1) * n];
                out[col * ch + c] = view.bias[c] + dot(a, &sin);
            }
        }
    });
    ImageBuffer::new(spec.width, spec.height, ch, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// `2 · channels` planes: `∂/∂x, ∂/∂y` per color channel.
    Components,
    /// One plane: `Σ_c |∇Φ_c|`.
    #[default]
    Magnitude,
}

/// Rasterized spatial gradient, in field units per domain unit.
pub fn gradient_map(field: &HeatField, spec: &SamplingSpec, mode: GradientMode) -> Result<ImageBuffer> {
    spec.validate()?;
    let view = field.view();
    let (xs, ys) = (spec.xs(), spec.ys());
    let basis = GridBasis::new(field.bank(), view.phases, &xs, &ys);
    let amps = attenuated_amplitudes(&view, spec.t);
    let (n, ch, w) = (view.components(), view.channels(), spec.width);
    let waves = field.bank().waves();
    let out_ch = match mode {
        GradientMode::Components => 2 * ch,
        GradientMode::Magnitude => 1,
    };

    let mut data = vec![0.0; spec.width * spec.height * out_ch];
    data.par_chunks_mut(w * out_ch).enumerate().for_each(|(row, out)| {
        let mut sin = vec![0.0; n];
        let mut cos = vec![0.0; n];
        for col in 0..w {
            basis.pixel(row, col, &mut sin, &mut cos);
            let px = &mut out[col * out_ch..(col + 1) * out_ch];
            for c in 0..ch {
                let mut g = [0.0; 2];
                for i in 0..n {
                    let s = amps[c * n + i] * cos[i];
                    g[0] += s * waves[i][0];
                    g[1] += s * waves[i][1];
                }
                match mode {
                    GradientMode::Components => {
                        px[2 * c] = g[0];
                        px[2 * c + 1] = g[1];
                    }
                    GradientMode::Magnitude => px[0] += g[0].hypot(g[1]),
                }
            }
        }
    });
    ImageBuffer::new(spec.width, spec.height, out_ch, data)
}

/// One local field per low-resolution pixel. All cells share one bank and
/// one κ; each cell's bias is the RGB value of its pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFieldGrid {
    height: usize,
    width: usize,
    channels: usize,
    bank: WaveBank,
    kappa: f64,
    /// `[row][col][component]`
    pub phases: Vec<f64>,
    /// `[row][col][channel][component]`
    pub amplitudes: Vec<f64>,
    bias: Vec<f64>,
}

impl LocalFieldGrid {
    /// Grid over `lr` with zero amplitudes; biases are copied from the pixels.
    pub fn from_lr_image(lr: &ImageBuffer, bank: WaveBank, kappa: f64, phases: Vec<f64>) -> Result<Self> {
        let n = bank.len();
        let cells = lr.width() * lr.height();
        let amplitudes = vec![0.0; cells * lr.channels() * n];
        Self::from_parts(
            lr.height(),
            lr.width(),
            lr.channels(),
            bank,
            kappa,
            phases,
            amplitudes,
            lr.data().to_vec(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        bank: WaveBank,
        kappa: f64,
        phases: Vec<f64>,
        amplitudes: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        crate::field::check_kappa(kappa)?;
        let cells = height * width;
        let n = bank.len();
        if cells == 0 || channels == 0 {
            return Err(Error::contract("local grid must be non-empty"));
        }
        if phases.len() != cells * n || amplitudes.len() != cells * channels * n || bias.len() != cells * channels {
            return Err(Error::contract("local grid parameter blocks have inconsistent sizes"));
        }
        Ok(Self {
            height,
            width,
            channels,
            bank,
            kappa,
            phases,
            amplitudes,
            bias,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bank(&self) -> &WaveBank {
        &self.bank
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn cell(&self, row: usize, col: usize) -> FieldView<'_> {
        let n = self.bank.len();
        let idx = row * self.width + col;
        FieldView {
            bank: &self.bank,
            phases: &self.phases[idx * n..(idx + 1) * n],
            amplitudes: &self.amplitudes[idx * self.channels * n..(idx + 1) * self.channels * n],
            bias: &self.bias[idx * self.channels..(idx + 1) * self.channels],
            kappa: self.kappa,
            channels: self.channels,
        }
    }
}

/// Output size for upsampling a `len`-pixel axis by `r`.
pub fn upsampled_len(len: usize, r: f64) -> usize {
    (len as f64 * r).round() as usize
}

/// Map output pixel `k` of an `n_out`-pixel axis onto an `n_cells`-cell axis:
/// returns the containing cell and the offset from its center in cell units.
/// Cells are half-open, so a center on a boundary belongs to the higher cell.
pub(crate) fn locate(k: usize, n_out: usize, n_cells: usize) -> (usize, f64) {
    let u = ((2 * k + 1) * n_cells) as f64 / (2 * n_out) as f64;
    let cell = (u.floor() as usize).min(n_cells - 1);
    (cell, u - (cell as f64 + 0.5))
}

/// Rasterize a local-field grid upsampled by `r ≥ 1`; every cell is observed
/// at `t = 1/r²`.
pub fn rasterize_local_grid(grid: &LocalFieldGrid, r: f64) -> Result<ImageBuffer> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::domain(format!(
            "local grids only upsample (r >= 1), got {r}"
        )));
    }
    let t = scale_to_time(1.0 / r)?;
    let (w_out, h_out) = (upsampled_len(grid.width, r), upsampled_len(grid.height, r));
    let ch = grid.channels;
    let cols: Vec<(usize, f64)> = (0..w_out).map(|k| locate(k, w_out, grid.width)).collect();
    let mut data = vec![0.0; w_out * h_out * ch];
    data.par_chunks_mut(w_out * ch)
        .enumerate()
        .try_for_each(|(row, out)| -> Result<()> {
            let (cell_row, ly) = locate(row, h_out, grid.height);
            for (col, &(cell_col, lx)) in cols.iter().enumerate() {
                let v = grid.cell(cell_row, cell_col).eval(&EvalPoint::new([lx, ly], t)?);
                out[col * ch..(col + 1) * ch].copy_from_slice(&v);
            }
            Ok(())
        })?;
    ImageBuffer::new(w_out, h_out, ch, data)
}
