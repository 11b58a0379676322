//! Differentiable soft rasterization of parametric block layouts.
//!
//! Each block is rasterized as a product of four sigmoids (one per face) with
//! temperature `tau` in meters; the occupancy field is the soft union across
//! blocks. Analytic gradients with respect to block centers flow through the
//! sigmoid derivative and the union product rule. The formulas are evaluated
//! everywhere without support culling: a cutoff would make the occupancy
//! discontinuous in the centers and poison finite-difference checks, and full
//! evaluation is cheap at the grid sizes this crate targets.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::citygen::Block;
use crate::domain::GridSpec;
use crate::error::{Error, Result};

/// Default edge-softness temperature in meters.
pub const DEFAULT_TAU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignMode {
    /// Buildings translate as units with fixed footprint geometry.
    Rigid,
    /// Each trainable building splits into `S x S` independently movable
    /// sub-blocks of size `(a/S, b/S)`, preserving total footprint area.
    Morph,
}

/// One trainable building: a single block in rigid mode, `S^2` sub-blocks in
/// morph mode, plus the initial centers the regularizers measure against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGroup {
    pub units: Vec<Block>,
    pub initial_centers: Vec<(f64, f64)>,
}

impl TrainableGroup {
    /// Mean displacement of the group's units from their initial centers.
    pub fn mean_displacement(&self) -> (f64, f64) {
        let n = self.units.len() as f64;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for (u, &(x0, y0)) in self.units.iter().zip(&self.initial_centers) {
            dx += u.cx - x0;
            dy += u.cy - y0;
        }
        (dx / n, dy / n)
    }
}

/// Continuous layout parameters: frozen blocks plus trainable groups whose
/// unit centers form the optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutParams {
    pub frozen: Vec<Block>,
    pub groups: Vec<TrainableGroup>,
    pub mode: DesignMode,
    pub subdivision: usize,
}

impl LayoutParams {
    /// Splits `blocks` into frozen and trainable parts. In morph mode every
    /// trainable block is subdivided into `subdivision^2` sub-blocks tiling
    /// the parent exactly.
    pub fn new(
        blocks: &[Block],
        trainable: &[bool],
        mode: DesignMode,
        subdivision: usize,
    ) -> Result<Self> {
        if blocks.len() != trainable.len() {
            return Err(Error::InvalidConfig(
                "trainable flags must match the block count".into(),
            ));
        }
        if subdivision == 0 {
            return Err(Error::InvalidConfig("subdivision must be >= 1".into()));
        }
        let mut frozen = Vec::new();
        let mut groups = Vec::new();
        for (b, &t) in blocks.iter().zip(trainable) {
            if !t {
                frozen.push(*b);
                continue;
            }
            let units = match mode {
                DesignMode::Rigid => vec![*b],
                DesignMode::Morph => subdivide(b, subdivision),
            };
            let initial_centers = units.iter().map(|u| (u.cx, u.cy)).collect();
            groups.push(TrainableGroup { units, initial_centers });
        }
        Ok(LayoutParams { frozen, groups, mode, subdivision })
    }

    /// All blocks in rasterization order: frozen first, then group units.
    pub fn all_blocks(&self) -> Vec<Block> {
        let mut out = self.frozen.clone();
        for g in &self.groups {
            out.extend_from_slice(&g.units);
        }
        out
    }

    /// Number of trainable buildings.
    pub fn n_trainable(&self) -> usize {
        self.groups.len()
    }

    /// Flattened trainable coordinates: `(cx, cy)` per unit, groups in order.
    pub fn coords(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.groups {
            for u in &g.units {
                out.push(u.cx);
                out.push(u.cy);
            }
        }
        out
    }

    pub fn set_coords(&mut self, coords: &[f64]) {
        let mut it = coords.iter();
        for g in self.groups.iter_mut() {
            for u in g.units.iter_mut() {
                u.cx = *it.next().expect("coordinate count mismatch");
                u.cy = *it.next().expect("coordinate count mismatch");
            }
        }
        assert!(it.next().is_none(), "coordinate count mismatch");
    }
}

fn subdivide(parent: &Block, s: usize) -> Vec<Block> {
    let (sn, cs) = parent.rot.sin_cos();
    let mut out = Vec::with_capacity(s * s);
    for j in 0..s {
        for i in 0..s {
            // Sub-block center offset in the parent's local frame.
            let lx = -parent.ax + (2 * i + 1) as f64 * parent.ax / s as f64;
            let ly = -parent.ay + (2 * j + 1) as f64 * parent.ay / s as f64;
            out.push(Block {
                cx: parent.cx + cs * lx - sn * ly,
                cy: parent.cy + sn * lx + cs * ly,
                ax: parent.ax / s as f64,
                ay: parent.ay / s as f64,
                rot: parent.rot,
            });
        }
    }
    out
}

/// Soft occupancy field plus the per-block rasterizations the gradient reuses.
#[derive(Debug, Clone)]
pub struct SoftOccupancy {
    /// Union occupancy in `[0, 1]`.
    pub b: Array2<f64>,
    pub per_block: Vec<Array2<f64>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The four face sigmoids of `block` at world point `(px, py)`.
#[inline]
fn face_sigmoids(block: &Block, px: f64, py: f64, tau: f64) -> (f64, f64, f64, f64) {
    let (sn, cs) = block.rot.sin_cos();
    let dx = px - block.cx;
    let dy = py - block.cy;
    let xi = cs * dx + sn * dy;
    let eta = -sn * dx + cs * dy;
    (
        sigmoid((xi + block.ax) / tau),
        sigmoid((block.ax - xi) / tau),
        sigmoid((eta + block.ay) / tau),
        sigmoid((block.ay - eta) / tau),
    )
}

/// Rasterizes one block: the product of its four face sigmoids at every
/// pixel center.
fn rasterize_block(block: &Block, grid: &GridSpec, tau: f64) -> Array2<f64> {
    let (h, w) = (grid.h, grid.w);
    let dx = grid.dx();
    let mut out = Array2::zeros((h, w));
    let rows: Vec<(usize, &mut [f64])> = out
        .as_slice_mut()
        .expect("standard layout")
        .chunks_mut(w)
        .enumerate()
        .collect();
    let work = |(y, row): (usize, &mut [f64])| {
        let py = (y as f64 + 0.5) * dx;
        for (x, o) in row.iter_mut().enumerate() {
            let px = (x as f64 + 0.5) * dx;
            let (s1, s2, s3, s4) = face_sigmoids(block, px, py, tau);
            *o = s1 * s2 * s3 * s4;
        }
    };
    if h * w >= 16384 {
        rows.into_par_iter().for_each(work);
    } else {
        rows.into_iter().for_each(work);
    }
    out
}

/// Soft occupancy of a block list: `B = 1 - prod_i (1 - o_i)` with
/// `o_i` the per-block sigmoid products evaluated at pixel centers.
pub fn rasterize_soft(blocks: &[Block], grid: &GridSpec, tau: f64) -> Result<SoftOccupancy> {
    grid.validate()?;
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let per_block: Vec<Array2<f64>> =
        blocks.iter().map(|b| rasterize_block(b, grid, tau)).collect();
    let mut b = Array2::zeros((grid.h, grid.w));
    let mut prod = Array2::from_elem((grid.h, grid.w), 1.0);
    for o in &per_block {
        ndarray::Zip::from(&mut prod).and(o).for_each(|p, &oi| *p *= 1.0 - oi);
    }
    ndarray::Zip::from(&mut b).and(&prod).for_each(|b, &p| *b = 1.0 - p);
    Ok(SoftOccupancy { b, per_block })
}

/// Thresholds the soft occupancy at 0.5 into a binary grid.
///
/// Gradient contract (straight-through): downstream sensitivities computed
/// with respect to this binary mask must be contracted against the *soft*
/// occupancy's derivatives, treating the binarization as the identity.
pub fn binarize_straight_through(soft: &SoftOccupancy) -> Array2<f64> {
    soft.b.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Contracts `upstream` sensitivities (one per pixel, in units of
/// d loss / d occupancy) against the analytic Jacobian of the soft union,
/// returning `(d/dcx, d/dcy)` per block.
pub fn rasterize_gradient(
    blocks: &[Block],
    grid: &GridSpec,
    tau: f64,
    upstream: &Array2<f64>,
) -> Result<Vec<(f64, f64)>> {
    if upstream.dim() != (grid.h, grid.w) {
        return Err(Error::ShapeMismatch {
            context: "upstream vs grid",
            expected: (grid.h, grid.w),
            got: upstream.dim(),
        });
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream sensitivities".into()));
    }
    let soft = rasterize_soft(blocks, grid, tau)?;
    let (h, w) = (grid.h, grid.w);
    let dxp = grid.dx();

    // prod[p] = prod_j (1 - o_j) = 1 - B.
    let prod = soft.b.mapv(|b| 1.0 - b);

    let grads: Vec<(f64, f64)> = blocks
        .par_iter()
        .enumerate()
        .map(|(i, block)| {
            let oi = &soft.per_block[i];
            let (sn, cs) = block.rot.sin_cos();
            let mut gx = 0.0;
            let mut gy = 0.0;
            for y in 0..h {
                let py = (y as f64 + 0.5) * dxp;
                for x in 0..w {
                    let up = upstream[[y, x]];
                    if up == 0.0 {
                        continue;
                    }
                    let o = oi[[y, x]];
                    let denom = 1.0 - o;
                    let others = if denom > 1e-12 {
                        prod[[y, x]] / denom
                    } else {
                        // o_i saturated: recompute the product without it.
                        let mut acc = 1.0;
                        for (j, oj) in soft.per_block.iter().enumerate() {
                            if j != i {
                                acc *= 1.0 - oj[[y, x]];
                            }
                        }
                        acc
                    };
                    if others == 0.0 || o == 0.0 {
                        continue;
                    }
                    let px = (x as f64 + 0.5) * dxp;
                    let (s1, s2, s3, s4) = face_sigmoids(block, px, py, tau);
                    let do_dxi = o * (s2 - s1) / tau;
                    let do_deta = o * (s4 - s3) / tau;
                    // d xi / d c = (-cos, -sin), d eta / d c = (sin, -cos).
                    let do_dcx = -cs * do_dxi + sn * do_deta;
                    let do_dcy = -sn * do_dxi - cs * do_deta;
                    gx += up * others * do_dcx;
                    gy += up * others * do_dcy;
                }
            }
            (gx, gy)
        })
        .collect();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{rasterize_hard, BlockSet};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn grid64() -> GridSpec {
        GridSpec::new(64, 640.0).unwrap() // 10 m pixels
    }

    #[test]
    fn empty_block_list_is_all_zero() {
        let soft = rasterize_soft(&[], &grid64(), DEFAULT_TAU).unwrap();
        assert!(soft.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn face_midpoint_of_large_block_is_half() {
        // 100 m pixel pitch puts pixel centers at 50, 150, ... ; block face
        // placed exactly on a pixel center, extents far larger than tau.
        let grid = GridSpec::new(64, 6400.0).unwrap();
        let block = Block { cx: 3250.0 + 1600.0, cy: 3250.0, ax: 1600.0, ay: 1600.0, rot: 0.0 };
        let soft = rasterize_soft(&[block], &grid, DEFAULT_TAU).unwrap();
        // Left face sits at x = 3250 m = pixel center of column 32.
        let face = soft.b[[32, 32]];
        assert_abs_diff_eq!(face, 0.5, epsilon = 1e-3);
        // Deep interior saturates to ~1, far exterior to ~0.
        assert!(soft.b[[32, 48]] > 1.0 - 1e-9);
        assert!(soft.b[[32, 8]] < 1e-9);
    }

    #[test]
    fn overlapping_identical_blocks_union() {
        let grid = grid64();
        let block = Block { cx: 320.0, cy: 320.0, ax: 30.0, ay: 30.0, rot: 0.0 };
        let single = rasterize_soft(&[block], &grid, DEFAULT_TAU).unwrap();
        let double = rasterize_soft(&[block, block], &grid, DEFAULT_TAU).unwrap();
        for (s, d) in single.b.iter().zip(double.b.iter()) {
            let expect = 1.0 - (1.0 - s) * (1.0 - s);
            assert_abs_diff_eq!(*d, expect, epsilon = 1e-12);
            if *s > 1e-12 && *s < 1.0 - 1e-12 {
                assert!(*d > *s);
            }
        }
    }

    #[test]
    fn occupancy_is_monotone_in_half_extents() {
        let grid = grid64();
        let small = Block { cx: 320.0, cy: 320.0, ax: 20.0, ay: 25.0, rot: 0.3 };
        let large = Block { ax: 26.0, ay: 31.0, ..small };
        let a = rasterize_soft(&[small], &grid, DEFAULT_TAU).unwrap();
        let b = rasterize_soft(&[large], &grid, DEFAULT_TAU).unwrap();
        for (s, l) in a.b.iter().zip(b.b.iter()) {
            assert!(l >= s);
        }
    }

    #[test]
    fn translation_by_one_pixel_pitch_shifts_the_field() {
        let grid = grid64();
        let dx = grid.dx();
        let blocks = [
            Block { cx: 300.0, cy: 330.0, ax: 25.0, ay: 15.0, rot: 0.0 },
            Block { cx: 390.0, cy: 290.0, ax: 12.0, ay: 22.0, rot: 0.0 },
        ];
        let shifted: Vec<Block> =
            blocks.iter().map(|b| Block { cx: b.cx + dx, ..*b }).collect();
        let a = rasterize_soft(&blocks, &grid, DEFAULT_TAU).unwrap();
        let b = rasterize_soft(&shifted, &grid, DEFAULT_TAU).unwrap();
        for y in 0..64 {
            for x in 0..63 {
                assert_abs_diff_eq!(b.b[[y, x + 1]], a.b[[y, x]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn binarize_thresholds_at_half() {
        let grid = GridSpec::new(4, 4.0).unwrap();
        let mut soft = SoftOccupancy {
            b: Array2::zeros((4, 4)),
            per_block: vec![],
        };
        soft.b[[0, 0]] = 0.49;
        soft.b[[0, 1]] = 0.51;
        let bin = binarize_straight_through(&soft);
        assert_eq!(bin[[0, 0]], 0.0);
        assert_eq!(bin[[0, 1]], 1.0);
        let _ = grid;
    }

    #[test]
    fn cold_binarized_mask_matches_hard_rasterization() {
        // At tau = 0.1 m the binarized soft mask and the hard rasterizer may
        // disagree only in a thin face band.
        let grid = grid64();
        let blocks = vec![
            Block { cx: 303.0, cy: 321.0, ax: 24.0, ay: 17.0, rot: 0.0 },
            Block { cx: 412.0, cy: 250.0, ax: 14.0, ay: 21.0, rot: 0.0 },
        ];
        let soft = rasterize_soft(&blocks, &grid, 0.1).unwrap();
        let bin = binarize_straight_through(&soft);
        let hard = rasterize_hard(&BlockSet { blocks: blocks.clone() }, &grid).unwrap();
        let mut sym_diff = 0usize;
        for (a, b) in bin.iter().zip(hard.occupancy().iter()) {
            if (*a > 0.5) != (*b == 1) {
                sym_diff += 1;
            }
        }
        // Less than two pixel-rows per block of disagreement.
        let budget = blocks
            .iter()
            .map(|b| 2.0 * (2.0 * b.ax.max(b.ay) / grid.dx()).ceil() as usize)
            .sum::<usize>();
        assert!(sym_diff <= budget, "symmetric difference {sym_diff} > {budget}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let grid = grid64();
        let blocks = [Block { cx: 320.0, cy: 320.0, ax: 20.0, ay: 20.0, rot: 0.0 }];
        let up = Array2::zeros((64, 64));
        let g = rasterize_gradient(&blocks, &grid, DEFAULT_TAU, &up).unwrap();
        assert_eq!(g, vec![(0.0, 0.0)]);
    }

    #[test]
    fn right_face_pixel_pulls_block_rightward() {
        let grid = grid64();
        let block = Block { cx: 320.0, cy: 320.0, ax: 20.0, ay: 20.0, rot: 0.0 };
        // Upstream sensitivity 1 at a pixel just right of the right face.
        let mut up = Array2::zeros((64, 64));
        up[[32, 34]] = 1.0; // pixel center x = 345, face at 340
        let g = rasterize_gradient(&[block], &grid, DEFAULT_TAU, &up).unwrap();
        assert!(g[0].0 > 0.0, "d occupancy / d cx = {}", g[0].0);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let grid = grid64();
        let h = 1e-3;
        for trial in 0..20 {
            let n_blocks = rng.random_range(1..=4);
            let blocks: Vec<Block> = (0..n_blocks)
                .map(|_| Block {
                    cx: rng.random_range(200.0..440.0),
                    cy: rng.random_range(200.0..440.0),
                    ax: rng.random_range(8.0..30.0),
                    ay: rng.random_range(8.0..30.0),
                    rot: if trial % 3 == 0 { rng.random_range(-0.5..0.5) } else { 0.0 },
                })
                .collect();
            let mut up = Array2::zeros((64, 64));
            for v in up.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }

            let analytic = rasterize_gradient(&blocks, &grid, DEFAULT_TAU, &up).unwrap();

            // FD oracle on the contracted objective sum(upstream * B).
            let objective = |bs: &[Block]| -> f64 {
                let soft = rasterize_soft(bs, &grid, DEFAULT_TAU).unwrap();
                soft.b.iter().zip(up.iter()).map(|(b, u)| b * u).sum()
            };
            let mut fd = Vec::new();
            for i in 0..blocks.len() {
                let mut plus = blocks.clone();
                let mut minus = blocks.clone();
                plus[i].cx += h;
                minus[i].cx -= h;
                let dx = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let mut plus = blocks.clone();
                let mut minus = blocks.clone();
                plus[i].cy += h;
                minus[i].cy -= h;
                let dy = (objective(&plus) - objective(&minus)) / (2.0 * h);
                fd.push((dx, dy));
            }

            let mut num = 0.0;
            let mut den = 0.0;
            for (a, f) in analytic.iter().zip(fd.iter()) {
                num += (a.0 - f.0).powi(2) + (a.1 - f.1).powi(2);
                den += f.0.powi(2) + f.1.powi(2);
            }
            let rel = (num / den.max(1e-30)).sqrt();
            assert!(rel < 1e-5, "trial {trial}: relative gradient error {rel}");
        }
    }

    #[test]
    fn morph_subdivision_tiles_parent_exactly() {
        let parent = Block { cx: 100.0, cy: 80.0, ax: 20.0, ay: 12.0, rot: 0.4 };
        let subs = subdivide(&parent, 2);
        assert_eq!(subs.len(), 4);
        let area: f64 = subs.iter().map(|b| 4.0 * b.ax * b.ay).sum();
        assert_abs_diff_eq!(area, 4.0 * parent.ax * parent.ay, epsilon = 1e-9);
        // Sub-centers average to the parent center.
        let cx: f64 = subs.iter().map(|b| b.cx).sum::<f64>() / 4.0;
        let cy: f64 = subs.iter().map(|b| b.cy).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(cx, parent.cx, epsilon = 1e-9);
        assert_abs_diff_eq!(cy, parent.cy, epsilon = 1e-9);
    }

    #[test]
    fn layout_params_coord_roundtrip() {
        let blocks = vec![
            Block { cx: 10.0, cy: 20.0, ax: 5.0, ay: 5.0, rot: 0.0 },
            Block { cx: 50.0, cy: 60.0, ax: 8.0, ay: 4.0, rot: 0.0 },
            Block { cx: 90.0, cy: 30.0, ax: 6.0, ay: 7.0, rot: 0.0 },
        ];
        let trainable = [false, true, true];
        let mut params =
            LayoutParams::new(&blocks, &trainable, DesignMode::Morph, 2).unwrap();
        assert_eq!(params.n_trainable(), 2);
        assert_eq!(params.coords().len(), 2 * 4 * 2);
        assert_eq!(params.all_blocks().len(), 1 + 8);

        let mut coords = params.coords();
        coords[0] += 3.0;
        params.set_coords(&coords);
        assert_eq!(params.coords(), coords);
        // Frozen block untouched.
        assert_eq!(params.frozen[0].cx, 10.0);
    }
}
