//! Core grid types shared by every other module: the simulation grid, binary
//! building footprints, velocity fields, and the geometric fields derived from
//! a footprint (exact Euclidean distance transform and outward wall normals).
//!
//! Conventions used throughout the crate:
//! * arrays are `(H, W)` row-major, indexed `[y, x]`;
//! * `x` grows left to right (the wind axis), `y` grows top to bottom;
//! * the pixel `(x, y)` has its center at `((x + 0.5) dx, (y + 0.5) dx)` in
//!   meters, with `dx = L / W`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance assigned to fluid pixels when the footprint contains no building
/// at all. Far larger than any grid diagonal, so that Gaussian wall weights
/// built from it underflow to zero.
pub const DISTANCE_SENTINEL: f64 = 1.0e6;

/// Square simulation grid: `h == w` pixels spanning a domain of side `l` meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub l: f64,
}

impl GridSpec {
    pub fn new(n: usize, l: f64) -> Result<Self> {
        let grid = GridSpec { h: n, w: n, l };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h != self.w {
            return Err(Error::InvalidConfig(format!(
                "grid must be square, got {}x{}",
                self.h, self.w
            )));
        }
        if self.h == 0 || !(self.l > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "grid needs positive size and side length, got {}px, {} m",
                self.h, self.l
            )));
        }
        Ok(())
    }

    /// Cell pitch in meters per pixel.
    pub fn dx(&self) -> f64 {
        self.l / self.w as f64
    }

    /// Pixel center in meters.
    pub fn pixel_center(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = self.dx();
        ((x as f64 + 0.5) * dx, (y as f64 + 0.5) * dx)
    }
}

/// Simulation configuration: inlet speed, grid, rollout length and the
/// dataset-wide normalization speed used by the RGB encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Inlet speed in m/s, prescribed on the left boundary.
    pub u_in: f64,
    pub grid: GridSpec,
    /// Number of stored velocity snapshots.
    pub frames: usize,
    /// Physical seconds advanced per stored frame.
    pub dt: f64,
    /// Dataset-wide maximum speed used to rescale velocities into `[-1, 1]`.
    pub u_max: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.u_in >= 0.0) {
            return Err(Error::InvalidConfig(format!("u_in must be >= 0, got {}", self.u_in)));
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frame count must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.u_max > 0.0) || self.u_max < self.u_in {
            return Err(Error::InvalidConfig(format!(
                "u_max must be > 0 and >= u_in, got u_max={} u_in={}",
                self.u_max, self.u_in
            )));
        }
        Ok(())
    }
}

/// Binary building occupancy on the grid. `1` marks solid structure, `0`
/// open space; the fluid mask is everywhere its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingFootprint {
    occupancy: Array2<u8>,
}

impl BuildingFootprint {
    /// Validates that the grid is binary and that both the inlet column
    /// (`x = 0`) and the outlet column (`x = W-1`) keep at least one fluid
    /// pixel each, so the domain stays open for through-flow.
    pub fn new(occupancy: Array2<u8>) -> Result<Self> {
        if occupancy.iter().any(|&v| v > 1) {
            return Err(Error::InvalidFootprint("occupancy must be binary".into()));
        }
        let (h, w) = occupancy.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidFootprint("empty grid".into()));
        }
        let open = |x: usize| (0..h).any(|y| occupancy[[y, x]] == 0);
        if !open(0) || !open(w - 1) {
            return Err(Error::InvalidFootprint(
                "inlet and outlet columns must each contain at least one fluid pixel".into(),
            ));
        }
        Ok(BuildingFootprint { occupancy })
    }

    pub fn all_fluid(h: usize, w: usize) -> Self {
        BuildingFootprint {
            occupancy: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.occupancy.dim()
    }

    pub fn occupancy(&self) -> &Array2<u8> {
        &self.occupancy
    }

    /// Fluid mask `F = 1 - B` as floats.
    pub fn fluid_mask(&self) -> Array2<f64> {
        self.occupancy.mapv(|b| 1.0 - b as f64)
    }

    /// Occupancy as floats, for the penalized solver.
    pub fn occupancy_f64(&self) -> Array2<f64> {
        self.occupancy.mapv(|b| b as f64)
    }

    pub fn is_solid(&self, x: usize, y: usize) -> bool {
        self.occupancy[[y, x]] == 1
    }

    pub fn fluid_pixel_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b == 0).count()
    }
}

/// Exact Euclidean distance (in pixels) from each fluid pixel to the nearest
/// occupied pixel. Zero inside buildings; [`DISTANCE_SENTINEL`] everywhere
/// when the footprint has no buildings.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub d: Array2<f64>,
}

/// Outward unit wall normals on the wall band: the fluid pixels 8-adjacent to
/// a building, dilated one more pixel into the fluid. Off-band normals are
/// zero and `band` is 0 there.
#[derive(Debug, Clone)]
pub struct WallNormals {
    pub nx: Array2<f64>,
    pub ny: Array2<f64>,
    pub band: Array2<u8>,
}

impl WallNormals {
    pub fn band_pixel_count(&self) -> usize {
        self.band.iter().filter(|&&b| b == 1).count()
    }
}

/// Horizontal and vertical velocity components in m/s at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl VelocityField {
    pub fn zeros(h: usize, w: usize) -> Self {
        VelocityField {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn speed(&self) -> Array2<f64> {
        let mut s = Array2::zeros(self.u.dim());
        ndarray::Zip::from(&mut s)
            .and(&self.u)
            .and(&self.v)
            .for_each(|s, &u, &v| *s = (u * u + v * v).sqrt());
        s
    }

    pub fn max_speed(&self) -> f64 {
        self.u
            .iter()
            .zip(self.v.iter())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.is_finite()) && self.v.iter().all(|v| v.is_finite())
    }
}

/// One simulation rollout: `frames.len() == config.frames` velocity snapshots
/// plus the conditioning frame (uniform inlet speed on fluid, zero inside
/// buildings) that precedes them.
#[derive(Debug, Clone)]
pub struct FlowSequence {
    pub frames: Vec<VelocityField>,
    pub conditioning: VelocityField,
    pub config: SimConfig,
}

impl FlowSequence {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.frames.len() != self.config.frames {
            return Err(Error::InvalidConfig(format!(
                "sequence holds {} frames but config declares {}",
                self.frames.len(),
                self.config.frames
            )));
        }
        Ok(())
    }
}

/// Exact Euclidean distance transform of the footprint, in pixel units.
///
/// Runs the two-pass lower-envelope algorithm on squared distances (columns,
/// then rows), which is exact for the L2 metric. Distances are 0 inside
/// buildings by convention.
pub fn derive_distance_field(footprint: &BuildingFootprint) -> DistanceField {
    let (h, w) = footprint.dim();
    let inf = DISTANCE_SENTINEL * DISTANCE_SENTINEL;

    // Squared distance along each column.
    let mut stage = Array2::from_elem((h, w), inf);
    for x in 0..w {
        let mut f: Vec<f64> = (0..h)
            .map(|y| if footprint.is_solid(x, y) { 0.0 } else { inf })
            .collect();
        let d = edt_1d(&mut f);
        for y in 0..h {
            stage[[y, x]] = d[y];
        }
    }

    // Combine along each row.
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let mut f: Vec<f64> = (0..w).map(|x| stage[[y, x]]).collect();
        let d = edt_1d(&mut f);
        for x in 0..w {
            out[[y, x]] = if d[x] >= inf {
                DISTANCE_SENTINEL
            } else {
                d[x].sqrt()
            };
        }
    }
    DistanceField { d: out }
}

/// 1D squared-distance transform via the lower envelope of parabolas.
fn edt_1d(f: &mut [f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s > z[k] {
            k += 1;
        }
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Outward wall normals from the smoothed occupancy gradient.
///
/// The binary occupancy is smoothed by one 3x3 box-filter pass (so flat faces
/// carry a nonzero gradient), differentiated with central differences, negated
/// to point out of the buildings and normalized to unit length. The wall band
/// is the set of fluid pixels 8-adjacent to a building, dilated one more pixel
/// into the fluid; band pixels where the smoothed gradient vanishes (corner
/// ambiguities) are excluded.
pub fn derive_wall_normals(footprint: &BuildingFootprint) -> WallNormals {
    let (h, w) = footprint.dim();
    let occ = footprint.occupancy();

    // 3x3 box filter with replicated borders.
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut smooth = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    acc += occ[[clamp(y as isize + dy, h), clamp(x as isize + dx, w)]] as f64;
                }
            }
            smooth[[y, x]] = acc / 9.0;
        }
    }

    // First fluid ring (8-adjacent to occupancy), then one more dilation.
    let mut band = Array2::<u8>::zeros((h, w));
    let neighbor_hit = |mask: &dyn Fn(usize, usize) -> bool, x: usize, y: usize| -> bool {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h
                    && mask(nx as usize, ny as usize)
                {
                    return true;
                }
            }
        }
        false
    };
    let solid = |x: usize, y: usize| occ[[y, x]] == 1;
    for y in 0..h {
        for x in 0..w {
            if occ[[y, x]] == 0 && neighbor_hit(&solid, x, y) {
                band[[y, x]] = 1;
            }
        }
    }
    let ring1 = band.clone();
    let in_ring1 = |x: usize, y: usize| ring1[[y, x]] == 1;
    for y in 0..h {
        for x in 0..w {
            if occ[[y, x]] == 0 && band[[y, x]] == 0 && neighbor_hit(&in_ring1, x, y) {
                band[[y, x]] = 1;
            }
        }
    }

    let mut nx = Array2::zeros((h, w));
    let mut ny = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if band[[y, x]] == 0 {
                continue;
            }
            let gx = (smooth[[y, clamp(x as isize + 1, w)]] - smooth[[y, clamp(x as isize - 1, w)]]) / 2.0;
            let gy = (smooth[[clamp(y as isize + 1, h), x]] - smooth[[clamp(y as isize - 1, h), x]]) / 2.0;
            let norm = (gx * gx + gy * gy).sqrt();
            if norm < 1e-12 {
                // Geometric corner ambiguity: no usable direction here.
                band[[y, x]] = 0;
                continue;
            }
            // The occupancy gradient points into the building; flip it.
            nx[[y, x]] = -gx / norm;
            ny[[y, x]] = -gy / norm;
        }
    }

    WallNormals { nx, ny, band }
}
