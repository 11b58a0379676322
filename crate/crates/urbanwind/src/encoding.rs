//! RGB encoding of velocity sequences and visualization helpers.
//!
//! Velocity components are rescaled by the dataset-wide maximum speed so
//! values lie in `[-1, 1]`; the third channel carries the binary fluid mask.
//! A conditioning frame (inlet speed on fluid pixels, zero inside buildings)
//! is prepended as frame 0. Which physical quantity lands on which RGB
//! channel is configurable through [`ChannelMap`]; the natural ordering is
//! `R=u, G=v, B=mask`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::domain::{BuildingFootprint, FlowSequence, GridSpec, SimConfig, VelocityField};
use crate::error::{Error, Result};

/// Physical quantity carried by one RGB channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    U,
    V,
    Mask,
}

/// Bijection from physical quantities to RGB channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub r: Channel,
    pub g: Channel,
    pub b: Channel,
}

impl Default for ChannelMap {
    fn default() -> Self {
        ChannelMap { r: Channel::U, g: Channel::V, b: Channel::Mask }
    }
}

impl ChannelMap {
    pub fn new(r: Channel, g: Channel, b: Channel) -> Result<Self> {
        let map = ChannelMap { r, g, b };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for ch in [self.r, self.g, self.b] {
            let i = match ch {
                Channel::U => 0,
                Channel::V => 1,
                Channel::Mask => 2,
            };
            if seen[i] {
                return Err(Error::InvalidConfig(
                    "channel map must be a permutation of {u, v, mask}".into(),
                ));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// All six channel assignments.
    pub fn all_permutations() -> Vec<ChannelMap> {
        use Channel::*;
        [
            (U, V, Mask),
            (U, Mask, V),
            (V, U, Mask),
            (V, Mask, U),
            (Mask, U, V),
            (Mask, V, U),
        ]
        .into_iter()
        .map(|(r, g, b)| ChannelMap { r, g, b })
        .collect()
    }

    fn slot(&self, ch: Channel) -> usize {
        if self.r == ch {
            0
        } else if self.g == ch {
            1
        } else {
            2
        }
    }
}

/// One encoded frame: `(H, W, 3)` values in RGB order, velocity channels in
/// `[-1, 1]`, mask channel in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub rgb: Array3<f64>,
}

/// Result of [`decode`]: the reconstructed sequence plus the raw occupancy
/// grid recovered from the mask channel (kept raw because a decoded mask may
/// legitimately violate footprint invariants, e.g. an all-building frame).
#[derive(Debug, Clone)]
pub struct DecodedSequence {
    pub seq: FlowSequence,
    pub occupancy: Array2<u8>,
}

/// Encodes a sequence into `T + 1` RGB frames (conditioning frame first).
///
/// Velocities exceeding `u_max` are clamped into `[-1, 1]` with a warning.
pub fn encode(
    seq: &FlowSequence,
    footprint: &BuildingFootprint,
    map: &ChannelMap,
) -> Result<Vec<EncodedFrame>> {
    map.validate()?;
    seq.validate()?;
    let (h, w) = footprint.dim();
    let u_max = seq.config.u_max;
    if !(u_max > 0.0) {
        return Err(Error::InvalidConfig("u_max must be positive".into()));
    }
    let peak = seq
        .frames
        .iter()
        .map(|f| {
            f.u.iter()
                .chain(f.v.iter())
                .fold(0.0f64, |m, &x| m.max(x.abs()))
        })
        .fold(0.0f64, f64::max);
    if peak > u_max {
        log::warn!("max component {peak:.3} m/s exceeds u_max {u_max}; clamping");
    }

    let fluid = footprint.fluid_mask();
    let u_slot = map.slot(Channel::U);
    let v_slot = map.slot(Channel::V);
    let m_slot = map.slot(Channel::Mask);

    let mut out = Vec::with_capacity(seq.frames.len() + 1);
    let mut push_frame = |u: &Array2<f64>, v: &Array2<f64>| {
        let mut rgb = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let f = fluid[[y, x]];
                rgb[[y, x, u_slot]] = (u[[y, x]] / u_max).clamp(-1.0, 1.0) * f;
                rgb[[y, x, v_slot]] = (v[[y, x]] / u_max).clamp(-1.0, 1.0) * f;
                rgb[[y, x, m_slot]] = f;
            }
        }
        out.push(EncodedFrame { rgb });
    };
    push_frame(&seq.conditioning.u, &seq.conditioning.v);
    for f in &seq.frames {
        push_frame(&f.u, &f.v);
    }
    Ok(out)
}

/// Inverse of [`encode`]. The mask channel is thresholded at 0.5; the inlet
/// speed is recovered from the conditioning frame. The decoded grid spec
/// carries a placeholder 1 m/px pitch since the physical domain size is not
/// part of the frame data.
pub fn decode(frames: &[EncodedFrame], map: &ChannelMap, u_max: f64) -> Result<DecodedSequence> {
    map.validate()?;
    if !(u_max > 0.0) {
        return Err(Error::InvalidConfig("u_max must be positive".into()));
    }
    if frames.len() < 2 {
        return Err(Error::InvalidConfig(
            "need the conditioning frame plus at least one snapshot".into(),
        ));
    }
    let (h, w, c) = frames[0].rgb.dim();
    if c != 3 || h != w {
        return Err(Error::InvalidConfig(format!("bad encoded frame shape {h}x{w}x{c}")));
    }
    let u_slot = map.slot(Channel::U);
    let v_slot = map.slot(Channel::V);
    let m_slot = map.slot(Channel::Mask);

    let mut occupancy = Array2::zeros((h, w));
    let mut u_in = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if frames[0].rgb[[y, x, m_slot]] < 0.5 {
                occupancy[[y, x]] = 1;
            } else {
                u_in = u_in.max(frames[0].rgb[[y, x, u_slot]] * u_max);
            }
        }
    }

    let mut seq_frames = Vec::with_capacity(frames.len() - 1);
    for ef in &frames[1..] {
        if ef.rgb.dim() != (h, w, 3) {
            return Err(Error::InvalidConfig("inconsistent encoded frame shapes".into()));
        }
        let mut f = VelocityField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                f.u[[y, x]] = ef.rgb[[y, x, u_slot]] * u_max;
                f.v[[y, x]] = ef.rgb[[y, x, v_slot]] * u_max;
            }
        }
        seq_frames.push(f);
    }

    let mut conditioning = VelocityField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            conditioning.u[[y, x]] = frames[0].rgb[[y, x, u_slot]] * u_max;
            conditioning.v[[y, x]] = frames[0].rgb[[y, x, v_slot]] * u_max;
        }
    }

    let config = SimConfig {
        u_in: u_in.max(0.0),
        grid: GridSpec { h, w, l: w as f64 },
        frames: seq_frames.len(),
        dt: 1.0,
        u_max,
    };
    Ok(DecodedSequence {
        seq: FlowSequence { frames: seq_frames, conditioning, config },
        occupancy,
    })
}

/// 8-bit quantization of an encoded frame: velocity channels map `[-1, 1]`
/// onto `0..=255`, the mask channel onto `{0, 255}`.
pub fn frame_to_rgb8(frame: &EncodedFrame) -> Array3<u8> {
    let (h, w, _) = frame.rgb.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = frame.rgb[[y, x, c]];
                out[[y, x, c]] = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Inverse of [`frame_to_rgb8`] up to quantization. The mask channel is
/// re-binarized.
pub fn rgb8_to_frame(bytes: &Array3<u8>, map: &ChannelMap) -> EncodedFrame {
    let (h, w, _) = bytes.dim();
    let m_slot = map.slot(Channel::Mask);
    let mut rgb = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = bytes[[y, x, c]] as f64 / 255.0 * 2.0 - 1.0;
                rgb[[y, x, c]] = if c == m_slot {
                    if v >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                };
            }
        }
    }
    EncodedFrame { rgb }
}

/// 256-entry diverging blue-white-red lookup table. The exact values are an
/// artifact constant for rendering only.
pub fn coolwarm_lut() -> &'static [[u8; 3]; 256] {
    static LUT: std::sync::OnceLock<[[u8; 3]; 256]> = std::sync::OnceLock::new();
    LUT.get_or_init(|| {
        let blue = [59.0, 76.0, 192.0];
        let white = [221.0, 221.0, 221.0];
        let red = [180.0, 4.0, 38.0];
        let mut lut = [[0u8; 3]; 256];
        for (i, entry) in lut.iter_mut().enumerate() {
            let t = i as f64 / 255.0;
            let (a, b, s) = if t < 0.5 {
                (blue, white, 2.0 * t)
            } else {
                (white, red, 2.0 * t - 1.0)
            };
            for c in 0..3 {
                entry[c] = (a[c] + (b[c] - a[c]) * s).round() as u8;
            }
        }
        lut
    })
}

/// Renders the wind speed magnitude through the diverging colormap,
/// normalized by `u_max`; buildings are black.
pub fn render_speed_colormap(
    field: &VelocityField,
    footprint: &BuildingFootprint,
    u_max: f64,
) -> Result<image::RgbImage> {
    let (h, w) = field.dim();
    if (h, w) != footprint.dim() {
        return Err(Error::ShapeMismatch {
            context: "field vs footprint",
            expected: footprint.dim(),
            got: (h, w),
        });
    }
    if !(u_max > 0.0) {
        return Err(Error::InvalidConfig("u_max must be positive".into()));
    }
    let lut = coolwarm_lut();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if footprint.is_solid(x, y) {
                [0, 0, 0]
            } else {
                let s = (field.u[[y, x]].powi(2) + field.v[[y, x]].powi(2)).sqrt();
                let idx = ((s / u_max).clamp(0.0, 1.0) * 255.0).round() as usize;
                lut[idx]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Saves an encoded frame as an 8-bit PNG.
pub fn save_frame_png(frame: &EncodedFrame, path: &std::path::Path) -> Result<()> {
    let bytes = frame_to_rgb8(frame);
    let (h, w, _) = bytes.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([bytes[[y, x, 0]], bytes[[y, x, 1]], bytes[[y, x, 2]]]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}
