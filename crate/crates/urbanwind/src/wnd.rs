//! The `.wnd` binary dataset format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "WND1"
//! u32     H, W, T
//! f32     u_in, L, u_max, dt
//! bytes   ceil(H*W / 8) occupancy bitfield, row-major, LSB-first
//! f32     T frames, each the u-plane then the v-plane, row-major
//! ```
//!
//! Raw f32 planes keep metric computations free of quantization; the
//! conditioning frame is not stored since it is a pure function of the header
//! and the occupancy grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::domain::{FlowSequence, GridSpec, SimConfig, VelocityField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WND1";

/// Exact file size for a given geometry, in bytes.
pub fn expected_file_size(h: usize, w: usize, t: usize) -> u64 {
    let header = 4 + 3 * 4 + 4 * 4;
    let bits = (h * w).div_ceil(8);
    (header + bits + t * 2 * h * w * 4) as u64
}

/// Writes a sequence and its occupancy grid.
pub fn write_wnd(path: &Path, seq: &FlowSequence, occupancy: &Array2<u8>) -> Result<()> {
    seq.validate().map_err(|e| Error::InvalidConfig(format!("refusing to write: {e}")))?;
    let (h, w) = occupancy.dim();
    if seq.frames.iter().any(|f| f.dim() != (h, w)) {
        return Err(Error::ShapeMismatch {
            context: "frames vs occupancy",
            expected: (h, w),
            got: seq.frames[0].dim(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    out.write_all(MAGIC).map_err(io_err)?;
    for v in [h as u32, w as u32, seq.frames.len() as u32] {
        out.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for v in [seq.config.u_in, seq.config.grid.l, seq.config.u_max, seq.config.dt] {
        out.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }

    let mut bits = vec![0u8; (h * w).div_ceil(8)];
    for (i, &b) in occupancy.iter().enumerate() {
        if b != 0 {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.write_all(&bits).map_err(io_err)?;

    let mut plane = vec![0u8; h * w * 4];
    let mut write_plane = |data: &Array2<f64>, out: &mut BufWriter<File>| -> Result<()> {
        for (i, &v) in data.iter().enumerate() {
            plane[4 * i..4 * i + 4].copy_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&plane).map_err(io_err)
    };
    for frame in &seq.frames {
        write_plane(&frame.u, &mut out)?;
        write_plane(&frame.v, &mut out)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

/// Reads a sequence. Returns the raw occupancy grid alongside; wrap it in a
/// [`crate::domain::BuildingFootprint`] where the footprint invariants are
/// required.
pub fn read_wnd(path: &Path) -> Result<(FlowSequence, Array2<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rd = OffsetReader { inner: BufReader::new(file), offset: 0 };

    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Parse { offset: 0, what: format!("bad magic {magic:?}, expected WND1") });
    }
    let h = rd.read_u32("H")? as usize;
    let w = rd.read_u32("W")? as usize;
    let t = rd.read_u32("T")? as usize;
    if h == 0 || w == 0 || t == 0 || h != w || h > 1 << 16 {
        return Err(Error::Parse {
            offset: 4,
            what: format!("implausible dimensions H={h} W={w} T={t}"),
        });
    }
    let u_in = rd.read_f32("u_in")? as f64;
    let l = rd.read_f32("L")? as f64;
    let u_max = rd.read_f32("u_max")? as f64;
    let dt = rd.read_f32("dt")? as f64;

    let mut bits = vec![0u8; (h * w).div_ceil(8)];
    rd.read_exact(&mut bits, "occupancy bitfield")?;
    let mut occupancy = Array2::zeros((h, w));
    for i in 0..h * w {
        if bits[i / 8] >> (i % 8) & 1 == 1 {
            occupancy[[i / w, i % w]] = 1;
        }
    }

    let mut frames = Vec::with_capacity(t);
    let mut plane = vec![0u8; h * w * 4];
    for _ in 0..t {
        let mut f = VelocityField::zeros(h, w);
        for comp in 0..2 {
            rd.read_exact(&mut plane, "velocity plane")?;
            let dst = if comp == 0 { &mut f.u } else { &mut f.v };
            for (i, v) in dst.iter_mut().enumerate() {
                *v = f32::from_le_bytes(plane[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            }
        }
        frames.push(f);
    }

    let config = SimConfig { u_in, grid: GridSpec { h, w, l }, frames: t, dt, u_max };
    config.validate().map_err(|e| Error::Parse {
        offset: 16,
        what: format!("inconsistent header: {e}"),
    })?;

    // Conditioning frame: inlet speed on fluid, zero inside buildings.
    let mut conditioning = VelocityField::zeros(h, w);
    for (c, &b) in conditioning.u.iter_mut().zip(occupancy.iter()) {
        *c = u_in * (1.0 - b as f64);
    }

    Ok((FlowSequence { frames, conditioning, config }, occupancy))
}

struct OffsetReader {
    inner: BufReader<File>,
    offset: u64,
}

impl OffsetReader {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            what: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}
