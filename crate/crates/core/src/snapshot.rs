//! Binary persistence of the full online state.
//!
//! Layout (all integers and reals little-endian, reals are f64):
//!
//! ```text
//! magic      8 bytes  "VDRSNAP\x01"
//! version    u32      currently 1
//! height     u32
//! width      u32
//! t          u64      next frame index (1-based)
//! sigma2     f64
//! n_scales   u32
//!   per scale: patch u32, count u32
//! n_filters  u32
//!   b values: n_filters * f64
//!   per filter: patch u32, patch*patch f64 row-major
//! B grid     h*w f64 row-major
//! H grid     h*w u8
//! T grid     h*w f64
//! F warm     h*w f64
//! csc mu     f64
//! csc z      n_filters grids of h*w f64
//! csc u      n_filters grids of h*w f64
//! dict cross n_filters*(n_filters+1)/2 grids of h*w f64
//! dict corr  n_filters grids of h*w f64
//! buffered   u8 count, then count grids of h*w f64
//! ```
//!
//! A round trip reproduces the state exactly (bit-level), which is what
//! makes mid-stream resume byte-identical to an uninterrupted run.

use crate::bank::{FilterBank, ScaleParams, ScaleSpec};
use crate::csc::{CscWorkspace, DictionaryStats};
use crate::engine::OnlineState;
use crate::error::{Error, Result};
use crate::frame::{Frame, SupportMask};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::io::{Cursor, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"VDRSNAP\x01";
const VERSION: u32 = 1;

fn write_grid<W: Write>(w: &mut W, g: &Array2<f64>) -> Result<()> {
    for &v in g.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_grid<R: Read>(r: &mut R, h: usize, w: usize) -> Result<Array2<f64>> {
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Snapshot(format!("grid shape: {e}")))
}

/// Serializes the state into the documented container.
pub fn to_bytes(state: &OnlineState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let (h, w) = state.dims();
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(h as u32).unwrap();
    out.write_u32::<LittleEndian>(w as u32).unwrap();
    out.write_u64::<LittleEndian>(state.t()).unwrap();
    out.write_f64::<LittleEndian>(state.sigma2()).unwrap();

    let scales = state.bank().scales();
    out.write_u32::<LittleEndian>(scales.len() as u32).unwrap();
    for s in scales {
        out.write_u32::<LittleEndian>(s.patch as u32).unwrap();
        out.write_u32::<LittleEndian>(s.count as u32).unwrap();
    }
    let n = state.bank().filter_count();
    out.write_u32::<LittleEndian>(n as u32).unwrap();
    for &b in state.scale_params().values() {
        out.write_f64::<LittleEndian>(b).unwrap();
    }
    for f in state.bank().filters() {
        out.write_u32::<LittleEndian>(f.nrows() as u32).unwrap();
        write_grid(&mut out, f).unwrap();
    }

    write_grid(&mut out, state.background().grid()).unwrap();
    for &v in state.mask().labels().iter() {
        out.push(v);
    }
    write_grid(&mut out, state.multiplier().grid()).unwrap();
    write_grid(&mut out, state.f_warm.grid()).unwrap();

    let (z, u, mu) = state.csc_ws.raw_parts();
    out.write_f64::<LittleEndian>(mu).unwrap();
    for g in z {
        write_grid(&mut out, g).unwrap();
    }
    for g in u {
        write_grid(&mut out, g).unwrap();
    }

    let (cross, corr) = state.dict_stats.base_slices();
    for g in cross {
        write_grid(&mut out, g).unwrap();
    }
    for g in corr {
        write_grid(&mut out, g).unwrap();
    }

    out.push(state.frame_buffer().len() as u8);
    for f in state.frame_buffer() {
        write_grid(&mut out, f.grid()).unwrap();
    }
    out
}

/// Parses a container produced by [`to_bytes`], validating every invariant
/// the state types enforce.
pub fn from_bytes(bytes: &[u8]) -> Result<OnlineState> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Snapshot("bad magic header".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    if h == 0 || w == 0 || h > 1 << 20 || w > 1 << 20 {
        return Err(Error::Snapshot(format!("implausible dimensions {h}x{w}")));
    }
    let t = r.read_u64::<LittleEndian>()?;
    if t == 0 {
        return Err(Error::Snapshot("frame counter must be >= 1".into()));
    }
    let sigma2 = r.read_f64::<LittleEndian>()?;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Snapshot(format!("invalid sigma2 {sigma2}")));
    }

    let n_scales = r.read_u32::<LittleEndian>()? as usize;
    if n_scales == 0 || n_scales > 64 {
        return Err(Error::Snapshot("implausible scale count".into()));
    }
    let mut scales = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        let patch = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u32::<LittleEndian>()? as usize;
        scales.push(ScaleSpec { patch, count });
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n != scales.iter().map(|s| s.count).sum::<usize>() {
        return Err(Error::Snapshot("filter count disagrees with scales".into()));
    }
    let mut b_values = Vec::with_capacity(n);
    for _ in 0..n {
        b_values.push(r.read_f64::<LittleEndian>()?);
    }
    let mut filters = Vec::with_capacity(n);
    for _ in 0..n {
        let p = r.read_u32::<LittleEndian>()? as usize;
        filters.push(read_grid(&mut r, p, p)?);
    }
    let bank = FilterBank::from_filters(scales, filters)
        .map_err(|e| Error::Snapshot(format!("filter bank: {e}")))?;
    let scale_params = ScaleParams::from_values(b_values)
        .map_err(|e| Error::Snapshot(format!("scale params: {e}")))?;

    let background =
        Frame::new(read_grid(&mut r, h, w)?).map_err(|e| Error::Snapshot(format!("background: {e}")))?;
    let mut labels = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        labels.push(r.read_u8()?);
    }
    let mask = SupportMask::new(
        Array2::from_shape_vec((h, w), labels)
            .map_err(|e| Error::Snapshot(format!("mask shape: {e}")))?,
    )
    .map_err(|e| Error::Snapshot(format!("mask: {e}")))?;
    let multiplier =
        Frame::new(read_grid(&mut r, h, w)?).map_err(|e| Error::Snapshot(format!("multiplier: {e}")))?;
    let f_warm =
        Frame::new(read_grid(&mut r, h, w)?).map_err(|e| Error::Snapshot(format!("warm start: {e}")))?;

    let mu = r.read_f64::<LittleEndian>()?;
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        z.push(read_grid(&mut r, h, w)?);
    }
    let mut u = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(read_grid(&mut r, h, w)?);
    }
    let csc_ws = CscWorkspace::from_raw_parts((h, w), z, u, mu);

    let pairs = n * (n + 1) / 2;
    let mut cross = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        cross.push(read_grid(&mut r, h, w)?);
    }
    let mut corr = Vec::with_capacity(n);
    for _ in 0..n {
        corr.push(read_grid(&mut r, h, w)?);
    }
    let dict_stats = DictionaryStats::from_base((h, w), n, cross, corr);

    let buffered = r.read_u8()? as usize;
    if buffered > 4 {
        return Err(Error::Snapshot("buffer holds more than 4 frames".into()));
    }
    let mut frame_buffer = VecDeque::with_capacity(buffered);
    for _ in 0..buffered {
        frame_buffer.push_back(
            Frame::new(read_grid(&mut r, h, w)?)
                .map_err(|e| Error::Snapshot(format!("buffered frame: {e}")))?,
        );
    }

    if r.position() != bytes.len() as u64 {
        return Err(Error::Snapshot(format!(
            "{} trailing bytes",
            bytes.len() as u64 - r.position()
        )));
    }

    Ok(OnlineState {
        t,
        dims: (h, w),
        background,
        mask,
        bank,
        sigma2,
        scales: scale_params,
        multiplier,
        dict_stats,
        csc_ws,
        f_warm,
        frame_buffer,
    })
}

pub fn save(state: &OnlineState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<OnlineState> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// SHA-256 of the canonical serialization.
pub fn digest(state: &OnlineState) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(to_bytes(state));
    hasher.finalize().into()
}

/// Human-readable summary used by the state inspection command.
#[derive(Debug, Clone)]
pub struct SnapshotSummary {
    pub dims: (usize, usize),
    pub t: u64,
    pub sigma2: f64,
    pub b: Vec<f64>,
    pub filter_norms: Vec<f64>,
    pub buffered_frames: usize,
}

pub fn summarize(state: &OnlineState) -> SnapshotSummary {
    SnapshotSummary {
        dims: state.dims(),
        t: state.t(),
        sigma2: state.sigma2(),
        b: state.scale_params().values().to_vec(),
        filter_norms: state
            .bank()
            .filters()
            .iter()
            .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        buffered_frames: state.frame_buffer().len(),
    }
}
