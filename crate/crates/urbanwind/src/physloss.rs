//! Physics-informed loss suite: a distance-weighted data term that emphasizes
//! near-wall fluid, a discrete divergence penalty, and a wall no-penetration
//! penalty.
//!
//! All spatial differences are taken in pixel units (no division by the cell
//! pitch), so loss values are grid-dependent by construction. The divergence
//! and wall terms skip an initial warmup window of frames; the data term
//! always covers the full sequence.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{
    derive_distance_field, BuildingFootprint, FlowSequence, VelocityField, WallNormals,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysLossConfig {
    pub lambda_div: f64,
    pub lambda_wall: f64,
    /// Wall-emphasis amplitude of the data-term weight.
    pub alpha: f64,
    /// Gaussian width of the wall emphasis, in pixels.
    pub sigma: f64,
    /// Frames `0..warmup_frames` are excluded from the divergence and wall
    /// terms.
    pub warmup_frames: usize,
}

impl Default for PhysLossConfig {
    fn default() -> Self {
        PhysLossConfig {
            lambda_div: 10.0,
            lambda_wall: 10.0,
            alpha: 2.0,
            sigma: 20.0,
            warmup_frames: 10,
        }
    }
}

impl PhysLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_div >= 0.0 && self.lambda_wall >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame loss values and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysLossBreakdown {
    pub total: f64,
    pub data: f64,
    pub div: f64,
    pub wall: f64,
}

/// Per-pixel data-term weight `F(p) * (1 + alpha * exp(-d(p)^2 / (2 sigma^2)))`.
pub fn weight_map(footprint: &BuildingFootprint, alpha: f64, sigma: f64) -> Array2<f64> {
    let dist = derive_distance_field(footprint);
    let (h, w) = footprint.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if !footprint.is_solid(x, y) {
                let d = dist.d[[y, x]];
                out[[y, x]] = 1.0 + alpha * (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}

/// Forward-difference divergence `u(x+1,y) - u(x,y) + v(x,y+1) - v(x,y)` in
/// pixel units, defined for `x < W-1, y < H-1` (zero elsewhere).
pub fn forward_divergence(field: &VelocityField) -> Array2<f64> {
    let (h, w) = field.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            out[[y, x]] =
                field.u[[y, x + 1]] - field.u[[y, x]] + field.v[[y + 1, x]] - field.v[[y, x]];
        }
    }
    out
}

/// Stencil validity: 1 where all four corners of the forward-difference
/// stencil lie in fluid, which avoids spurious penalties at building
/// boundaries.
pub fn divergence_valid_mask(footprint: &BuildingFootprint) -> Array2<u8> {
    let (h, w) = footprint.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let fluid = !footprint.is_solid(x, y)
                && !footprint.is_solid(x + 1, y)
                && !footprint.is_solid(x, y + 1)
                && !footprint.is_solid(x + 1, y + 1);
            if fluid {
                out[[y, x]] = 1;
            }
        }
    }
    out
}

fn check_shapes(pred: &FlowSequence, gt: &FlowSequence, footprint: &BuildingFootprint) -> Result<()> {
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::ShapeMismatch {
            context: "frame counts",
            expected: (gt.frames.len(), 0),
            got: (pred.frames.len(), 0),
        });
    }
    check_grid(pred, footprint)
}

fn check_grid(seq: &FlowSequence, footprint: &BuildingFootprint) -> Result<()> {
    let dim = footprint.dim();
    for f in &seq.frames {
        if f.dim() != dim {
            return Err(Error::ShapeMismatch {
                context: "sequence vs footprint",
                expected: dim,
                got: f.dim(),
            });
        }
    }
    Ok(())
}

/// Distance-weighted MSE over both velocity components:
/// `sum_t sum_p w_p ||pred - gt||^2 / (T * sum_p w_p)`.
pub fn distance_weighted_mse(
    pred: &FlowSequence,
    gt: &FlowSequence,
    footprint: &BuildingFootprint,
    cfg: &PhysLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_shapes(pred, gt, footprint)?;
    let weights = weight_map(footprint, cfg.alpha, cfg.sigma);
    let weight_sum: f64 = weights.iter().sum();
    if weight_sum == 0.0 {
        log::warn!("all-occupied footprint: data term has empty support");
        return Ok(0.0);
    }
    let t = pred.frames.len();
    let mut acc = 0.0;
    for (pf, gf) in pred.frames.iter().zip(gt.frames.iter()) {
        for ((wp, du), dv) in weights
            .iter()
            .zip(pf.u.iter().zip(gf.u.iter()).map(|(a, b)| a - b))
            .zip(pf.v.iter().zip(gf.v.iter()).map(|(a, b)| a - b))
        {
            acc += wp * (du * du + dv * dv);
        }
    }
    Ok(acc / (t as f64 * weight_sum))
}

/// Mean squared forward-difference divergence over valid stencils and
/// post-warmup frames.
pub fn divergence_loss(
    pred: &FlowSequence,
    footprint: &BuildingFootprint,
    cfg: &PhysLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_grid(pred, footprint)?;
    let valid = divergence_valid_mask(footprint);
    let n_valid = valid.iter().filter(|&&v| v == 1).count();
    if n_valid == 0 {
        log::warn!("no valid divergence stencils; divergence loss defined as 0");
        return Ok(0.0);
    }
    let frames = &pred.frames[pred.frames.len().min(cfg.warmup_frames)..];
    if frames.is_empty() {
        log::warn!("sequence shorter than warmup; divergence loss defined as 0");
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for f in frames {
        let div = forward_divergence(f);
        for (d, v) in div.iter().zip(valid.iter()) {
            if *v == 1 {
                acc += d * d;
            }
        }
    }
    Ok(acc / (frames.len() * n_valid) as f64)
}

/// Mean squared normal velocity over the wall band and post-warmup frames.
pub fn wall_penetration_loss(
    pred: &FlowSequence,
    footprint: &BuildingFootprint,
    normals: &WallNormals,
    cfg: &PhysLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_grid(pred, footprint)?;
    let n_band = normals.band_pixel_count();
    if n_band == 0 {
        log::warn!("empty wall band; wall loss defined as 0");
        return Ok(0.0);
    }
    let frames = &pred.frames[pred.frames.len().min(cfg.warmup_frames)..];
    if frames.is_empty() {
        log::warn!("sequence shorter than warmup; wall loss defined as 0");
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for f in frames {
        for ((&band, (&nx, &ny)), (&u, &v)) in normals
            .band
            .iter()
            .zip(normals.nx.iter().zip(normals.ny.iter()))
            .zip(f.u.iter().zip(f.v.iter()))
        {
            if band == 1 {
                let wn = u * nx + v * ny;
                acc += wn * wn;
            }
        }
    }
    Ok(acc / (frames.len() * n_band) as f64)
}

/// Weighted sum `data + lambda_div * div + lambda_wall * wall`.
pub fn total_physics_loss(
    pred: &FlowSequence,
    gt: &FlowSequence,
    footprint: &BuildingFootprint,
    cfg: &PhysLossConfig,
) -> Result<PhysLossBreakdown> {
    let data = distance_weighted_mse(pred, gt, footprint, cfg)?;
    let div = divergence_loss(pred, footprint, cfg)?;
    let normals = crate::domain::derive_wall_normals(footprint);
    let wall = wall_penetration_loss(pred, footprint, &normals, cfg)?;
    Ok(PhysLossBreakdown {
        total: data + cfg.lambda_div * div + cfg.lambda_wall * wall,
        data,
        div,
        wall,
    })
}
