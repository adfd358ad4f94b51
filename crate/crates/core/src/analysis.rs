//! Interpretation tools: cycle effective receptive field and the frequency
//! response of the gradient-correction system, plus contour-plot emission.

use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::correct::{descend_on_mask, ClampMode};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::mask::{Frame, Mask, MaskKind};
use crate::net::SegModel;

/// Cycle-ERF knobs.
#[derive(Clone, Copy, Debug)]
pub struct ErfConfig {
    pub m_iters: usize,
    /// Descent step; by convention the gradient-correction alpha.
    pub alpha: f64,
}

impl Default for ErfConfig {
    fn default() -> Self {
        Self {
            m_iters: 50,
            alpha: 180.0,
        }
    }
}

/// Cycle effective receptive field: starting from an all-zero unconstrained
/// reference mask, descend the prediction loss of the target ground truth
/// for `m_iters` steps, then keep only the positively activated areas.
///
/// The descent reuses the gradient-correction machinery with clamping off
/// and no smoothness term.
pub fn cycle_erf(
    model: &SegModel,
    ref_frame: &Frame,
    target_frame: &Frame,
    target_gt: &Mask,
    cfg: &ErfConfig,
    loss_cfg: &LossConfig,
) -> Result<Mask> {
    if cfg.m_iters < 1 {
        return Err(Error::InvalidArgument("m_iters must be >= 1".into()));
    }
    let (h, w) = ref_frame.shape();
    let result = descend_on_mask(
        model,
        ref_frame,
        Array2::zeros((h, w)),
        target_frame,
        &target_gt.values,
        cfg.m_iters,
        cfg.alpha,
        0.0,
        ClampMode::Unbounded,
        loss_cfg,
    )?;
    Ok(Mask {
        values: result.mask.mapv(|v| v.max(0.0)),
        object_id: target_gt.object_id,
        kind: MaskKind::Unconstrained,
    })
}

// ---------------------------------------------------------------------------
// frequency analysis
// ---------------------------------------------------------------------------

/// 2-D FFT magnitude of a real grid, DC-centered.
pub fn fft2_magnitude(grid: &Array2<f64>) -> Array2<f64> {
    let (h, w) = grid.dim();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut data: Vec<Complex64> = grid.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }

    // center DC: index shift by half along both axes
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (y + h - h / 2) % h;
        let sx = (x + w - w / 2) % w;
        data[sy * w + sx].norm()
    })
}

/// Averaged ratio of output to input FFT magnitudes, DC-centered.
/// Zero spectral bins are guarded by `eps = 1e-8`.
pub fn freq_response(inputs: &[Array2<f64>], outputs: &[Array2<f64>]) -> Result<Array2<f64>> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("freq_response inputs"));
    }
    if inputs.len() != outputs.len() {
        return Err(Error::shape(
            format!("{} outputs", inputs.len()),
            format!("{}", outputs.len()),
        ));
    }
    let dim = inputs[0].dim();
    let eps = 1e-8;
    let mut acc = Array2::<f64>::zeros(dim);
    for (i, o) in inputs.iter().zip(outputs) {
        if i.dim() != dim || o.dim() != dim {
            return Err(Error::shape(
                format!("{dim:?}"),
                format!("{:?} / {:?}", i.dim(), o.dim()),
            ));
        }
        let mi = fft2_magnitude(i);
        let mo = fft2_magnitude(o);
        acc.zip_mut_with(&(mo / (mi + eps)), |a, &r| *a += r);
    }
    Ok(acc / inputs.len() as f64)
}

/// Mean squared FFT magnitude over the high band: DC-centered bins whose
/// Chebyshev-normalized frequency exceeds `1 - band_frac` on either axis
/// (`band_frac = 0.25` selects the outer quarter of the spectrum).
pub fn high_band_energy(grid: &Array2<f64>, band_frac: f64) -> f64 {
    let mag = fft2_magnitude(grid);
    let (h, w) = mag.dim();
    let (cy, cx) = (h / 2, w / 2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ((y, x), &m) in mag.indexed_iter() {
        let fy = (y as f64 - cy as f64).abs() / cy.max(1) as f64;
        let fx = (x as f64 - cx as f64).abs() / cx.max(1) as f64;
        if fy.max(fx) >= 1.0 - band_frac {
            total += m * m;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

// ---------------------------------------------------------------------------
// output emission
// ---------------------------------------------------------------------------

/// Write a grid as plain text: a `rows cols` header line, then one row of
/// values per line.
pub fn save_grid(grid: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = grid.dim();
    let mut text = format!("{h} {w}\n");
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:.9e}", grid[(y, x)])).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a grid written by [`save_grid`].
pub fn load_grid(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty grid file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::InvalidArgument("bad grid header".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::InvalidArgument("grid header must be `rows cols`".into()));
    }
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for line in lines {
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("bad grid value {tok:?}"))
            })?);
        }
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|_| Error::InvalidArgument("grid size mismatch".into()))
}

const COLORMAP: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let v = COLORMAP[i][c] * (1.0 - f) + COLORMAP[i + 1][c] * f;
        rgb[c] = (v * 255.0).round() as u8;
    }
    rgb
}

/// Render a grid as a filled-contour PNG: values are quantized into level
/// bands, band boundaries are drawn dark. Deterministic for fixed input.
pub fn emit_contour_plot(grid: &Array2<f64>, path: &Path) -> Result<()> {
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "contour plot input".into(),
        });
    }
    let (h, w) = grid.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("contour plot grid"));
    }
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let levels = 10usize;
    let band = |v: f64| -> usize {
        if hi <= lo {
            return 0;
        }
        (((v - lo) / (hi - lo)) * levels as f64).floor().min(levels as f64 - 1.0) as usize
    };
    let bands = grid.mapv(band);

    let scale = (512 / w.max(h)).clamp(1, 16);
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h {
        for x in 0..w {
            let b = bands[(y, x)];
            let edge = (x + 1 < w && bands[(y, x + 1)] != b)
                || (y + 1 < h && bands[(y + 1, x)] != b);
            let color = if edge {
                [20, 20, 20]
            } else {
                colormap(b as f64 / (levels - 1) as f64)
            };
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(
                        (x * scale + dx) as u32,
                        (y * scale + dy) as u32,
                        image::Rgb(color),
                    );
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
