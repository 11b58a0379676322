//! Procedural city layout generation.
//!
//! Layouts are rectangular blocks rejection-sampled inside a circular city
//! region that sits centered in the square domain, surrounded by an open
//! buffer. Everything is deterministic given the seed.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BuildingFootprint, GridSpec};
use crate::error::{Error, Result};

/// Default block density in buildings per square meter, calibrated so a
/// 500 m-diameter city region holds 52 blocks in expectation.
pub const DEFAULT_DENSITY: f64 = 52.0 / (PI * 250.0 * 250.0);

/// Default open buffer around the city region, in meters.
pub const DEFAULT_BUFFER: f64 = 300.0;

/// Minimum alley width between block boundaries, in meters.
pub const DEFAULT_MIN_ALLEY: f64 = 10.0;

/// Rejection-sampling attempt budget per block.
const ATTEMPTS_PER_BLOCK: usize = 200;

/// One rectangular block: center, half-extents, and rotation about its
/// center, all in meters / radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub cx: f64,
    pub cy: f64,
    /// Half-extent along the block-local x axis.
    pub ax: f64,
    /// Half-extent along the block-local y axis.
    pub ay: f64,
    /// Rotation in radians (counterclockwise in the x-right, y-down frame).
    pub rot: f64,
}

impl Block {
    /// The four corners in world coordinates.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.rot.sin_cos();
        let mut out = [(0.0, 0.0); 4];
        for (i, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            let lx = sx * self.ax;
            let ly = sy * self.ay;
            out[i] = (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly);
        }
        out
    }

    /// Whether a world point lies inside the (possibly rotated) rectangle.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.rot.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        // Inverse rotation into the block frame.
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.ax && ly.abs() <= self.ay
    }
}

/// A set of blocks making up one city layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockSet {
    pub blocks: Vec<Block>,
}

/// Boundary-to-boundary distance between two axis-aligned blocks (rot == 0).
/// Zero when they overlap.
pub fn aabb_gap(a: &Block, b: &Block) -> f64 {
    let gx = (a.cx - b.cx).abs() - (a.ax + b.ax);
    let gy = (a.cy - b.cy).abs() - (a.ay + b.ay);
    (gx.max(0.0).powi(2) + gy.max(0.0).powi(2)).sqrt()
}

/// Generator configuration. The domain side is `city_diameter + 2 * buffer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityGenConfig {
    pub seed: u64,
    /// City region diameter in meters (the dataset samples it from {300..800}).
    pub city_diameter: f64,
    pub buffer: f64,
    /// Full block side lengths are drawn uniformly from this range, meters.
    pub block_size_range: (f64, f64),
    pub min_alley: f64,
    /// Blocks per square meter of city region.
    pub density: f64,
    /// Incoming wind direction in degrees, in `[0, 360)`.
    pub wind_direction: f64,
}

impl CityGenConfig {
    pub fn new(seed: u64, city_diameter: f64) -> Self {
        CityGenConfig {
            seed,
            city_diameter,
            buffer: DEFAULT_BUFFER,
            block_size_range: (10.0, 50.0),
            min_alley: DEFAULT_MIN_ALLEY,
            density: DEFAULT_DENSITY,
            wind_direction: 0.0,
        }
    }

    pub fn domain_side(&self) -> f64 {
        self.city_diameter + 2.0 * self.buffer
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.city_diameter > 0.0) || !(self.buffer >= 0.0) {
            return Err(Error::InvalidConfig("diameter/buffer must be positive".into()));
        }
        let (lo, hi) = self.block_size_range;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::InvalidConfig(format!("bad block size range [{lo}, {hi}]")));
        }
        if !(0.0..360.0).contains(&self.wind_direction) {
            return Err(Error::InvalidConfig(format!(
                "wind direction must be in [0, 360), got {}",
                self.wind_direction
            )));
        }
        if !(self.density >= 0.0) || !(self.min_alley >= 0.0) {
            return Err(Error::InvalidConfig("density/min_alley must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A generated layout; serializes to the layout JSON interchange format
/// (all lengths in meters, `ax`/`ay` are half-extents).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layout {
    pub seed: u64,
    /// Domain side length in meters.
    #[serde(rename = "L")]
    pub l: f64,
    pub u_in: f64,
    pub blocks: Vec<Block>,
    /// Set when the placement attempt budget ran out before reaching the
    /// target block count. Not part of the interchange format.
    #[serde(skip)]
    pub truncated: bool,
}

impl Layout {
    pub fn block_set(&self) -> BlockSet {
        BlockSet { blocks: self.blocks.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Layout> {
        let layout: Layout = serde_json::from_str(s)?;
        if !(layout.l > 0.0) {
            return Err(Error::InvalidConfig("layout L must be positive".into()));
        }
        Ok(layout)
    }
}

/// Rejection-samples axis-aligned blocks inside the circular city region.
///
/// The target count is `round(density * circle area)`; every block gets up to
/// 200 placement attempts, after which generation stops and the layout is
/// flagged `truncated`. The inlet speed is drawn uniformly from
/// `[0.1, 20] m/s`. Deterministic for a fixed seed.
pub fn generate_layout(cfg: &CityGenConfig) -> Result<Layout> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.domain_side();
    let center = l / 2.0;
    let radius = cfg.city_diameter / 2.0;
    let target = (cfg.density * PI * radius * radius).round() as usize;
    let (size_lo, size_hi) = cfg.block_size_range;

    let mut blocks: Vec<Block> = Vec::with_capacity(target);
    let mut truncated = false;
    'outer: for _ in 0..target {
        for _ in 0..ATTEMPTS_PER_BLOCK {
            let ax = rng.random_range(size_lo..=size_hi) / 2.0;
            let ay = rng.random_range(size_lo..=size_hi) / 2.0;
            let cx = center + rng.random_range(-radius..=radius);
            let cy = center + rng.random_range(-radius..=radius);
            let cand = Block { cx, cy, ax, ay, rot: 0.0 };
            let corners_inside = cand.corners().iter().all(|&(x, y)| {
                (x - center).powi(2) + (y - center).powi(2) <= radius * radius
            });
            if !corners_inside {
                continue;
            }
            if blocks.iter().any(|b| aabb_gap(b, &cand) < cfg.min_alley) {
                continue;
            }
            blocks.push(cand);
            continue 'outer;
        }
        truncated = true;
        log::warn!(
            "placement budget exhausted after {} of {} blocks (seed {})",
            blocks.len(),
            target,
            cfg.seed
        );
        break;
    }

    let u_in = rng.random_range(0.1..=20.0);
    Ok(Layout { seed: cfg.seed, l, u_in, blocks, truncated })
}

/// Rotates every block about the domain center by `-wind_direction`, so that
/// wind arriving from `wind_direction` flows left to right afterwards.
pub fn canonicalize_direction(blocks: &BlockSet, wind_direction: f64, domain_side: f64) -> BlockSet {
    let theta = -wind_direction.to_radians();
    let (s, c) = theta.sin_cos();
    let half = domain_side / 2.0;
    let rotated = blocks
        .blocks
        .iter()
        .map(|b| {
            let dx = b.cx - half;
            let dy = b.cy - half;
            Block {
                cx: half + c * dx - s * dy,
                cy: half + s * dx + c * dy,
                ax: b.ax,
                ay: b.ay,
                rot: b.rot + theta,
            }
        })
        .collect();
    BlockSet { blocks: rotated }
}

/// Binary rasterization: a pixel is occupied iff its center lies inside some
/// block. Errors out if occupancy reaches the inlet (`x = 0`) or outlet
/// (`x = W-1`) column, which must stay open for through-flow.
pub fn rasterize_hard(blocks: &BlockSet, grid: &GridSpec) -> Result<BuildingFootprint> {
    grid.validate()?;
    let (h, w) = (grid.h, grid.w);
    let dx = grid.dx();
    let mut occ = Array2::<u8>::zeros((h, w));
    for b in &blocks.blocks {
        // Conservative pixel-range bound from the rotated corners.
        let corners = b.corners();
        let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = ((min_x / dx - 1.0).floor().max(0.0)) as usize;
        let x1 = ((max_x / dx + 1.0).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((min_y / dx - 1.0).floor().max(0.0)) as usize;
        let y1 = ((max_y / dx + 1.0).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = grid.pixel_center(x, y);
                if b.contains(px, py) {
                    if x == 0 || x == w - 1 {
                        return Err(Error::InvalidFootprint(format!(
                            "block at ({:.1}, {:.1}) occupies boundary column x={}",
                            b.cx, b.cy, x
                        )));
                    }
                    occ[[y, x]] = 1;
                }
            }
        }
    }
    BuildingFootprint::new(occ)
}
