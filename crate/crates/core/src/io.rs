//! File formats: native sweeps (with KITTI `.bin` auto-detection), GT ray
//! sidecars, PLY export and network checkpoints. All little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::IoError;
use crate::geometry::{Point3, PointCloud, Ray, ScanlineAttr};
use crate::network::{Network, NetworkConfig};
use crate::scene::{RayRecord, SweepPair};
use crate::tape::Tensor;

pub const SWEEP_MAGIC: &[u8; 4] = b"RDNS";
pub const SWEEP_VERSION: u16 = 1;
pub const FLAG_RING: u32 = 1;
pub const FLAG_AZIMUTH: u32 = 2;
pub const FLAG_TIME: u32 = 4;
const SWEEP_HEADER: usize = 4 + 2 + 8 + 4;
const KITTI_STRIDE: usize = 16;

pub const RAYS_MAGIC: &[u8; 4] = b"RDRY";
pub const RAYS_VERSION: u16 = 1;
const RAYS_HEADER: usize = 4 + 2 + 8;
const RAY_RECORD: usize = 8 * 4 + 1 + 2 + 4 + 4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Little-endian reader over a byte slice.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().expect("length checked by caller");
        self.pos += N;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn sweep_stride(flags: u32) -> usize {
    12 + if flags & FLAG_RING != 0 { 2 } else { 0 }
        + if flags & FLAG_AZIMUTH != 0 { 4 } else { 0 }
        + if flags & FLAG_TIME != 0 { 4 } else { 0 }
}

pub fn encode_sweep(cloud: &PointCloud) -> Vec<u8> {
    let flags = if cloud.attrs.is_some() { FLAG_RING | FLAG_AZIMUTH | FLAG_TIME } else { 0 };
    let mut out = Vec::with_capacity(SWEEP_HEADER + cloud.len() * sweep_stride(flags));
    out.extend_from_slice(SWEEP_MAGIC);
    out.extend_from_slice(&SWEEP_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        if let Some(a) = &cloud.attrs {
            out.extend_from_slice(&a[i].ring_id.to_le_bytes());
            out.extend_from_slice(&a[i].azimuth.to_le_bytes());
            out.extend_from_slice(&a[i].timestamp.to_le_bytes());
        }
    }
    out
}

/// Parsed sweep plus the number of non-finite points that were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRead {
    pub cloud: PointCloud,
    pub rejected: usize,
}

pub fn decode_sweep(bytes: &[u8]) -> Result<SweepRead, IoError> {
    if bytes.len() >= 4 && &bytes[..4] == SWEEP_MAGIC {
        return decode_native(bytes);
    }
    if !bytes.is_empty() && bytes.len() % KITTI_STRIDE == 0 {
        return Ok(decode_kitti(bytes));
    }
    Err(IoError::BadMagic)
}

fn decode_native(bytes: &[u8]) -> Result<SweepRead, IoError> {
    if bytes.len() < SWEEP_HEADER {
        return Err(IoError::TruncatedFile {
            expected: SWEEP_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    let mut c = Cursor::new(bytes);
    c.pos = 4;
    let version = c.u16();
    if version != SWEEP_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let count = c.u64();
    let flags = c.u32();
    let stride = sweep_stride(flags);
    let expected = (SWEEP_HEADER as u64).saturating_add(count.saturating_mul(stride as u64));
    if (bytes.len() as u64) < expected {
        return Err(IoError::TruncatedFile {
            expected,
            found: bytes.len() as u64,
        });
    }
    let has_attrs = flags & (FLAG_RING | FLAG_AZIMUTH | FLAG_TIME) != 0;
    let mut points = Vec::with_capacity(count as usize);
    let mut attrs = Vec::with_capacity(if has_attrs { count as usize } else { 0 });
    let mut rejected = 0;
    for _ in 0..count {
        let p = Point3::new(c.f32() as f64, c.f32() as f64, c.f32() as f64);
        let mut a = ScanlineAttr::default();
        if flags & FLAG_RING != 0 {
            a.ring_id = c.u16();
        }
        if flags & FLAG_AZIMUTH != 0 {
            a.azimuth = c.f32();
        }
        if flags & FLAG_TIME != 0 {
            a.timestamp = c.f32();
        }
        if !p.is_finite() {
            rejected += 1;
            continue;
        }
        points.push(p);
        if has_attrs {
            attrs.push(a);
        }
    }
    if rejected > 0 {
        log::warn!("skipped {rejected} non-finite points");
    }
    let cloud = if has_attrs {
        PointCloud::with_attrs(points, attrs)
    } else {
        PointCloud::new(points)
    };
    Ok(SweepRead { cloud, rejected })
}

fn decode_kitti(bytes: &[u8]) -> SweepRead {
    let mut c = Cursor::new(bytes);
    let mut points = Vec::with_capacity(bytes.len() / KITTI_STRIDE);
    let mut rejected = 0;
    for _ in 0..bytes.len() / KITTI_STRIDE {
        let p = Point3::new(c.f32() as f64, c.f32() as f64, c.f32() as f64);
        let _intensity = c.f32();
        if p.is_finite() {
            points.push(p);
        } else {
            rejected += 1;
        }
    }
    if rejected > 0 {
        log::warn!("skipped {rejected} non-finite points");
    }
    SweepRead {
        cloud: PointCloud::new(points),
        rejected,
    }
}

pub fn write_sweep(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_sweep(cloud))?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<PointCloud, IoError> {
    Ok(decode_sweep(&fs::read(path)?)?.cloud)
}

pub fn encode_rays(rays: &[RayRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAYS_HEADER + rays.len() * RAY_RECORD);
    out.extend_from_slice(RAYS_MAGIC);
    out.extend_from_slice(&RAYS_VERSION.to_le_bytes());
    out.extend_from_slice(&(rays.len() as u64).to_le_bytes());
    for r in rays {
        let d = r.ray.direction();
        for v in [d.x, d.y, d.z, r.range] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(r.is_hit() as u8);
        out.extend_from_slice(&r.attr.ring_id.to_le_bytes());
        out.extend_from_slice(&r.attr.azimuth.to_le_bytes());
        out.extend_from_slice(&r.attr.timestamp.to_le_bytes());
    }
    out
}

pub fn decode_rays(bytes: &[u8]) -> Result<Vec<RayRecord>, IoError> {
    if bytes.len() < 4 || &bytes[..4] != RAYS_MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < RAYS_HEADER {
        return Err(IoError::TruncatedFile {
            expected: RAYS_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    let mut c = Cursor::new(bytes);
    c.pos = 4;
    let version = c.u16();
    if version != RAYS_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let count = c.u64();
    let expected = (RAYS_HEADER as u64).saturating_add(count.saturating_mul(RAY_RECORD as u64));
    if (bytes.len() as u64) < expected {
        return Err(IoError::TruncatedFile {
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let d = Point3::new(c.f64(), c.f64(), c.f64());
        let range = c.f64();
        let range = if c.take::<1>()[0] == 0 { f64::INFINITY } else { range };
        let attr = ScanlineAttr {
            ring_id: c.u16(),
            azimuth: c.f32(),
            timestamp: c.f32(),
        };
        // stored directions are unit already; renormalizing would perturb the last bit
        let ray = if (d.norm() - 1.0).abs() < 1e-12 {
            Ray::from_unit(d)
        } else {
            Ray::new(d).map_err(|e| IoError::Parse(format!("ray direction: {e}")))?
        };
        out.push(RayRecord { ray, range, attr });
    }
    Ok(out)
}

/// File names inside a sweep-pair directory.
pub const SPARSE_FILE: &str = "sparse.rdns";
pub const SPARSE_RAYS_FILE: &str = "sparse_rays.rdry";
pub const DENSE_FILE: &str = "dense.rdns";
pub const GT_RAYS_FILE: &str = "gt_rays.rdry";

/// Writes the four files of a pair into `dir`, creating it.
pub fn write_pair(pair: &SweepPair, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    write_sweep(&pair.sparse, &dir.join(SPARSE_FILE))?;
    write_rays(&pair.sparse_rays, &dir.join(SPARSE_RAYS_FILE))?;
    write_sweep(&pair.dense_gt, &dir.join(DENSE_FILE))?;
    write_rays(&pair.gt_rays, &dir.join(GT_RAYS_FILE))
}

pub fn read_pair(dir: &Path) -> Result<SweepPair, IoError> {
    Ok(SweepPair {
        sparse: read_sweep(&dir.join(SPARSE_FILE))?,
        sparse_rays: read_rays(&dir.join(SPARSE_RAYS_FILE))?,
        dense_gt: read_sweep(&dir.join(DENSE_FILE))?,
        gt_rays: read_rays(&dir.join(GT_RAYS_FILE))?,
    })
}

/// Pair directories directly under `dir`, sorted by name.
pub fn list_pairs(dir: &Path) -> Result<Vec<std::path::PathBuf>, IoError> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.join(SPARSE_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_rays(rays: &[RayRecord], path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_rays(rays))?;
    Ok(())
}

pub fn read_rays(path: &Path) -> Result<Vec<RayRecord>, IoError> {
    decode_rays(&fs::read(path)?)
}

/// Per-vertex color source for PLY export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorBy<'a> {
    None,
    /// Uncertainty scale per point, mapped blue (low) to red (high).
    BHat(&'a [f64]),
    /// Occupancy probability per point.
    Occupancy(&'a [f64]),
    /// Indices of violating points, drawn red; the rest gray.
    Violation(&'a [usize]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * t).round() as u8, (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8, (255.0 * (1.0 - t)).round() as u8]
}

fn colors(n: usize, color_by: ColorBy) -> Option<Vec<[u8; 3]>> {
    let scalar = |v: &[f64], lo: f64, hi: f64| -> Vec<[u8; 3]> {
        let span = if hi > lo { hi - lo } else { 1.0 };
        v.iter().map(|x| ramp((x - lo) / span)).collect()
    };
    match color_by {
        ColorBy::None => None,
        ColorBy::BHat(v) => {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(scalar(v, lo, hi))
        }
        ColorBy::Occupancy(v) => Some(scalar(v, 0.0, 1.0)),
        ColorBy::Violation(idx) => {
            let mut c = vec![[160u8, 160, 160]; n];
            for &i in idx {
                if i < n {
                    c[i] = [230, 30, 30];
                }
            }
            Some(c)
        }
    }
}

pub fn write_ply(cloud: &PointCloud, path: &Path, color_by: ColorBy, format: PlyFormat) -> Result<(), IoError> {
    if cloud.is_empty() {
        return Err(IoError::Parse("refusing to write an empty PLY".into()));
    }
    if let ColorBy::BHat(v) | ColorBy::Occupancy(v) = color_by {
        if v.len() != cloud.len() {
            return Err(IoError::Parse(format!("{} color values for {} points", v.len(), cloud.len())));
        }
    }
    let cols = colors(cloud.len(), color_by);
    let mut w = BufWriter::new(fs::File::create(path)?);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if cols.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {}", xyz[0], xyz[1], xyz[2])?;
                if let Some(c) = &cols {
                    write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in xyz {
                    w.write_all(&v.to_le_bytes())?;
                }
                if let Some(c) = &cols {
                    w.write_all(&c[i])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads PLY files in the layout [`write_ply`] produces.
pub fn read_ply(path: &Path) -> Result<(Vec<[f32; 3]>, Option<Vec<[u8; 3]>>), IoError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| IoError::Parse(format!("ply: {m}"));
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("no end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not utf-8"))?;
    if !header.starts_with("ply\n") {
        return Err(IoError::BadMagic);
    }
    let mut n = 0usize;
    let mut binary = false;
    let mut has_color = false;
    for line in header.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", f, _] => binary = *f == "binary_little_endian",
            ["element", "vertex", c] => n = c.parse().map_err(|_| bad("vertex count"))?,
            ["property", "uchar", "red"] => has_color = true,
            _ => {}
        }
    }
    let body = &bytes[end + 11..];
    let mut pts = Vec::with_capacity(n);
    let mut cols = has_color.then(|| Vec::with_capacity(n));
    if binary {
        let stride = 12 + if has_color { 3 } else { 0 };
        if body.len() < n * stride {
            return Err(IoError::TruncatedFile {
                expected: (n * stride) as u64,
                found: body.len() as u64,
            });
        }
        let mut c = Cursor::new(body);
        for _ in 0..n {
            pts.push([c.f32(), c.f32(), c.f32()]);
            if let Some(cs) = &mut cols {
                cs.push(c.take::<3>());
            }
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| bad("body is not utf-8"))?;
        for line in text.lines().take(n) {
            let v: Vec<&str> = line.split_whitespace().collect();
            let f = |s: &str| s.parse::<f32>().map_err(|_| bad("coordinate"));
            pts.push([f(v[0])?, f(v[1])?, f(v[2])?]);
            if let Some(cs) = &mut cols {
                let u = |s: &str| s.parse::<u8>().map_err(|_| bad("color"));
                cs.push([u(v[3])?, u(v[4])?, u(v[5])?]);
            }
        }
        if pts.len() != n {
            return Err(bad("fewer vertices than declared"));
        }
    }
    Ok((pts, cols))
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.config.hash().to_le_bytes());
    out.extend_from_slice(&(net.params.tensors.len() as u32).to_le_bytes());
    for t in &net.params.tensors {
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Rebuilds a network for `config` from checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8], config: &NetworkConfig) -> Result<Network, IoError> {
    let truncated = |expected: usize| IoError::TruncatedFile {
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < 18 {
        return Err(truncated(18));
    }
    let mut c = Cursor::new(bytes);
    c.pos = 4;
    let version = c.u16();
    if version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let found = c.u64();
    let expected = config.hash();
    if found != expected {
        return Err(IoError::CheckpointMismatch { expected, found });
    }
    let count = c.u32() as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        if c.pos + 8 > bytes.len() {
            return Err(truncated(c.pos + 8));
        }
        let rows = c.u32() as usize;
        let cols = c.u32() as usize;
        let need = c.pos + rows * cols * 4;
        if need > bytes.len() {
            return Err(truncated(need));
        }
        let data = (0..rows * cols).map(|_| c.f32() as f64).collect();
        tensors.push(Tensor::from_vec(rows, cols, data));
    }
    let mut net = Network::new(config.clone(), 0).map_err(|e| IoError::Parse(e.to_string()))?;
    net.load_tensors(tensors).map_err(|e| IoError::Parse(e.to_string()))?;
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, config: &NetworkConfig) -> Result<Network, IoError> {
    decode_checkpoint(&fs::read(path)?, config)
}

/// Rounds every parameter through f32, matching what a checkpoint stores.
pub fn quantize_params(net: &mut Network) {
    for t in &mut net.params.tensors {
        for v in &mut t.data {
            *v = *v as f32 as f64;
        }
    }
}
