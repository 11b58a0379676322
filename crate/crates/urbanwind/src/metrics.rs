//! Evaluation metrics, computed on fluid pixels only: variance-normalized
//! RMSE (the primary ranking metric), MAE and MRE over velocity components,
//! a per-pixel temporal spectral divergence, and the per-pixel Wasserstein-1
//! distance between marginal speed distributions.
//!
//! Normalization conventions pinned here: VRMSE pools the ground-truth
//! variance over all (frame, fluid pixel, component) entries rather than per
//! pixel (per-pixel variance is near zero in stagnant zones and would blowup
//! the ratio); MAE pools both velocity components.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

use crate::domain::{BuildingFootprint, FlowSequence};
use crate::error::{Error, Result};

const VAR_EPS: f64 = 1e-12;
const SPECTRAL_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub vrmse: f64,
    /// Mean absolute component error, m/s.
    pub mae: f64,
    /// Mean relative error, percent.
    pub mre: f64,
    pub spectral: f64,
    /// Wasserstein-1 distance between speed distributions, m/s.
    pub w1: f64,
}

fn check(pred: &FlowSequence, gt: &FlowSequence, footprint: &BuildingFootprint) -> Result<()> {
    if pred.frames.len() != gt.frames.len() || pred.frames.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "frame counts",
            expected: (gt.frames.len(), 0),
            got: (pred.frames.len(), 0),
        });
    }
    for (p, g) in pred.frames.iter().zip(gt.frames.iter()) {
        if p.dim() != footprint.dim() || g.dim() != footprint.dim() {
            return Err(Error::ShapeMismatch {
                context: "sequence vs footprint",
                expected: footprint.dim(),
                got: p.dim(),
            });
        }
    }
    Ok(())
}

fn fluid_indices(footprint: &BuildingFootprint) -> Vec<(usize, usize)> {
    let (h, w) = footprint.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !footprint.is_solid(x, y) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Variance-normalized RMSE: squared error averaged over all
/// (frame, fluid pixel, component) entries, divided by the pooled
/// ground-truth variance. Equals 1 for the constant-mean predictor.
pub fn vrmse(pred: &FlowSequence, gt: &FlowSequence, footprint: &BuildingFootprint) -> Result<f64> {
    check(pred, gt, footprint)?;
    let fluid = fluid_indices(footprint);
    let n = (fluid.len() * gt.frames.len() * 2) as f64;
    if n == 0.0 {
        return Ok(0.0);
    }

    let mut mean = 0.0;
    for g in &gt.frames {
        for &(y, x) in &fluid {
            mean += g.u[[y, x]] + g.v[[y, x]];
        }
    }
    mean /= n;

    let mut var = 0.0;
    let mut mse = 0.0;
    for (p, g) in pred.frames.iter().zip(gt.frames.iter()) {
        for &(y, x) in &fluid {
            var += (g.u[[y, x]] - mean).powi(2) + (g.v[[y, x]] - mean).powi(2);
            mse += (p.u[[y, x]] - g.u[[y, x]]).powi(2) + (p.v[[y, x]] - g.v[[y, x]]).powi(2);
        }
    }
    var /= n;
    mse /= n;
    if var == 0.0 {
        log::warn!("ground truth is constant on the fluid support; VRMSE undefined");
        return Ok(f64::INFINITY);
    }
    Ok((mse / (var + VAR_EPS)).sqrt())
}

/// Mean absolute component error (m/s) and mean relative error (percent,
/// normalized by the mean absolute ground-truth component).
pub fn mae_mre(
    pred: &FlowSequence,
    gt: &FlowSequence,
    footprint: &BuildingFootprint,
) -> Result<(f64, f64)> {
    check(pred, gt, footprint)?;
    let fluid = fluid_indices(footprint);
    let n = (fluid.len() * gt.frames.len() * 2) as f64;
    if n == 0.0 {
        return Ok((0.0, 0.0));
    }
    let mut abs_err = 0.0;
    let mut abs_ref = 0.0;
    for (p, g) in pred.frames.iter().zip(gt.frames.iter()) {
        for &(y, x) in &fluid {
            abs_err += (p.u[[y, x]] - g.u[[y, x]]).abs() + (p.v[[y, x]] - g.v[[y, x]]).abs();
            abs_ref += g.u[[y, x]].abs() + g.v[[y, x]].abs();
        }
    }
    let mae = abs_err / n;
    let mre = if mae == 0.0 {
        0.0
    } else if abs_ref == 0.0 {
        log::warn!("zero-magnitude ground truth; MRE undefined");
        f64::INFINITY
    } else {
        100.0 * mae / (abs_ref / n)
    };
    Ok((mae, mre))
}

/// Treats each fluid pixel and component as an independent temporal sensor:
/// mean-removed FFT over time, then the mean squared log-power ratio over
/// the nonzero frequencies (`k = 1 ..= T/2`). Invariant to phase shifts.
pub fn spectral_divergence(
    pred: &FlowSequence,
    gt: &FlowSequence,
    footprint: &BuildingFootprint,
) -> Result<f64> {
    check(pred, gt, footprint)?;
    let t = gt.frames.len();
    if t < 4 {
        return Err(Error::InvalidConfig(format!(
            "spectral divergence needs at least 4 frames, got {t}"
        )));
    }
    let fluid = fluid_indices(footprint);
    if fluid.is_empty() {
        return Ok(0.0);
    }
    let n_bins = t / 2;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let mut buf_p = vec![Complex::default(); t];
    let mut buf_g = vec![Complex::default(); t];
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];

    let mut acc = 0.0;
    let mut count = 0usize;
    for &(y, x) in &fluid {
        for comp in 0..2 {
            let mut mean_p = 0.0;
            let mut mean_g = 0.0;
            for k in 0..t {
                let (pv, gv) = if comp == 0 {
                    (pred.frames[k].u[[y, x]], gt.frames[k].u[[y, x]])
                } else {
                    (pred.frames[k].v[[y, x]], gt.frames[k].v[[y, x]])
                };
                buf_p[k] = Complex::new(pv, 0.0);
                buf_g[k] = Complex::new(gv, 0.0);
                mean_p += pv;
                mean_g += gv;
            }
            mean_p /= t as f64;
            mean_g /= t as f64;
            for k in 0..t {
                buf_p[k].re -= mean_p;
                buf_g[k].re -= mean_g;
            }
            fft.process_with_scratch(&mut buf_p, &mut scratch);
            fft.process_with_scratch(&mut buf_g, &mut scratch);
            for k in 1..=n_bins {
                let pp = buf_p[k].norm_sqr();
                let pg = buf_g[k].norm_sqr();
                let diff = (pp + SPECTRAL_EPS).ln() - (pg + SPECTRAL_EPS).ln();
                acc += diff * diff;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Per-pixel 1D optimal transport between the empirical speed distributions:
/// sort the T speeds of both sequences and average the absolute differences,
/// then average over fluid pixels. Invariant to temporal ordering.
pub fn wasserstein1(
    pred: &FlowSequence,
    gt: &FlowSequence,
    footprint: &BuildingFootprint,
) -> Result<f64> {
    check(pred, gt, footprint)?;
    let fluid = fluid_indices(footprint);
    if fluid.is_empty() {
        return Ok(0.0);
    }
    let t = gt.frames.len();
    let mut sp = vec![0.0f64; t];
    let mut sg = vec![0.0f64; t];
    let mut acc = 0.0;
    for &(y, x) in &fluid {
        for k in 0..t {
            let p = &pred.frames[k];
            let g = &gt.frames[k];
            sp[k] = (p.u[[y, x]].powi(2) + p.v[[y, x]].powi(2)).sqrt();
            sg[k] = (g.u[[y, x]].powi(2) + g.v[[y, x]].powi(2)).sqrt();
        }
        sp.sort_by(|a, b| a.partial_cmp(b).expect("finite speeds"));
        sg.sort_by(|a, b| a.partial_cmp(b).expect("finite speeds"));
        let mut pixel = 0.0;
        for k in 0..t {
            pixel += (sp[k] - sg[k]).abs();
        }
        acc += pixel / t as f64;
    }
    Ok(acc / fluid.len() as f64)
}

/// All five metrics in one report.
pub fn evaluate(
    pred: &FlowSequence,
    gt: &FlowSequence,
    footprint: &BuildingFootprint,
) -> Result<MetricReport> {
    let vrmse = vrmse(pred, gt, footprint)?;
    let (mae, mre) = mae_mre(pred, gt, footprint)?;
    let spectral = spectral_divergence(pred, gt, footprint)?;
    let w1 = wasserstein1(pred, gt, footprint)?;
    Ok(MetricReport { vrmse, mae, mre, spectral, w1 })
}
