//! Versioned little-endian binary cache of a [`Hierarchy`].
//!
//! Layout: magic, format version, source digest, configuration, the base
//! quantization plan and cloud, then per level the positions, frames and
//! selection plan, then the pooling plans. Encoding is a pure function of the
//! hierarchy, so identical inputs give byte-identical files.

use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ConvPlan, Hierarchy, HierarchyConfig, Interpolation, Level, LevelGeometry, PoolPlan};
use crate::geometry::TangentFrame;
use crate::io::PointCloud;

const MAGIC: &[u8; 8] = b"TCPLAN\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("plan cache i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a plan cache (bad magic bytes)")]
    BadMagic,
    #[error("unsupported plan cache version {0} (expected {VERSION})")]
    Version(u32),
    #[error("corrupt plan cache: {0}")]
    Corrupt(String),
    #[error("plan cache was built from a different cloud or configuration")]
    StaleSource,
}

/// Digest of the cloud positions and the hierarchy configuration.
pub fn source_hash(cloud: &PointCloud, config: &HierarchyConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((cloud.len() as u64).to_le_bytes());
    for p in cloud.positions() {
        for c in p {
            h.update(c.to_le_bytes());
        }
    }
    let mut cfg = Vec::new();
    write_config(&mut cfg, config).expect("writing to a vec");
    h.update(&cfg);
    h.finalize().into()
}

fn write_config(w: &mut impl Write, c: &HierarchyConfig) -> io::Result<()> {
    w.write_f64::<LE>(c.base_cell)?;
    w.write_f64::<LE>(c.r0)?;
    w.write_u32::<LE>(c.levels as u32)?;
    w.write_u32::<LE>(c.image_size as u32)?;
    match c.interpolation {
        Interpolation::Nearest => {
            w.write_u8(0)?;
            w.write_u32::<LE>(1)?;
            w.write_f64::<LE>(0.0)
        }
        Interpolation::Gaussian { k, sigma_factor } => {
            w.write_u8(1)?;
            w.write_u32::<LE>(k as u32)?;
            w.write_f64::<LE>(sigma_factor)
        }
    }
}

fn read_config(r: &mut impl Read) -> Result<HierarchyConfig, CacheError> {
    let base_cell = r.read_f64::<LE>()?;
    let r0 = r.read_f64::<LE>()?;
    let levels = r.read_u32::<LE>()? as usize;
    let image_size = r.read_u32::<LE>()? as usize;
    let tag = r.read_u8()?;
    let k = r.read_u32::<LE>()? as usize;
    let sigma_factor = r.read_f64::<LE>()?;
    let interpolation = match tag {
        0 => Interpolation::Nearest,
        1 => Interpolation::Gaussian { k, sigma_factor },
        t => return Err(CacheError::Corrupt(format!("interpolation tag {t}"))),
    };
    let config = HierarchyConfig {
        base_cell,
        r0,
        levels,
        image_size,
        interpolation,
    };
    config
        .validate()
        .map_err(|e| CacheError::Corrupt(e.to_string()))?;
    Ok(config)
}

fn write_len(w: &mut impl Write, n: usize) -> io::Result<()> {
    w.write_u64::<LE>(n as u64)
}

/// Length prefix, rejected if it exceeds what the remaining bytes could hold.
fn read_len(r: &mut Cursor<&[u8]>, elem_bytes: usize) -> Result<usize, CacheError> {
    let n = r.read_u64::<LE>()? as usize;
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u128) * (elem_bytes as u128) > remaining as u128 {
        return Err(CacheError::Corrupt(format!("length {n} exceeds file size")));
    }
    Ok(n)
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    write_len(w, v.len())?;
    v.iter().try_for_each(|x| w.write_f64::<LE>(*x))
}

fn read_f64s(r: &mut Cursor<&[u8]>) -> Result<Vec<f64>, CacheError> {
    let n = read_len(r, 8)?;
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_u32s(w: &mut impl Write, v: &[u32]) -> io::Result<()> {
    write_len(w, v.len())?;
    v.iter().try_for_each(|x| w.write_u32::<LE>(*x))
}

fn read_u32s(r: &mut Cursor<&[u8]>) -> Result<Vec<u32>, CacheError> {
    let n = read_len(r, 4)?;
    let mut v = vec![0; n];
    r.read_u32_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_vec3s(w: &mut impl Write, v: &[[f64; 3]]) -> io::Result<()> {
    write_f64s(w, &v.iter().flatten().copied().collect::<Vec<_>>())
}

fn read_vec3s(r: &mut Cursor<&[u8]>) -> Result<Vec<[f64; 3]>, CacheError> {
    let flat = read_f64s(r)?;
    if flat.len() % 3 != 0 {
        return Err(CacheError::Corrupt("vector array not a multiple of 3".into()));
    }
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn write_bools(w: &mut impl Write, v: &[bool]) -> io::Result<()> {
    write_len(w, v.len())?;
    w.write_all(&v.iter().map(|&b| b as u8).collect::<Vec<_>>())
}

fn read_bools(r: &mut Cursor<&[u8]>) -> Result<Vec<bool>, CacheError> {
    let n = read_len(r, 1)?;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    Ok(raw.into_iter().map(|b| b != 0).collect())
}

fn write_pool(w: &mut impl Write, p: &PoolPlan) -> io::Result<()> {
    write_u32s(w, &p.offsets)?;
    write_u32s(w, &p.members)?;
    write_u32s(w, &p.parent)?;
    write_vec3s(w, &p.positions)
}

fn read_pool(r: &mut Cursor<&[u8]>) -> Result<PoolPlan, CacheError> {
    let plan = PoolPlan {
        offsets: read_u32s(r)?,
        members: read_u32s(r)?,
        parent: read_u32s(r)?,
        positions: read_vec3s(r)?,
    };
    let ok = !plan.offsets.is_empty()
        && plan.offsets[0] == 0
        && plan.offsets.windows(2).all(|w| w[0] < w[1])
        && *plan.offsets.last().unwrap() as usize == plan.members.len()
        && plan.positions.len() == plan.rows()
        && plan.members.len() == plan.parent.len()
        && plan.members.iter().all(|&m| (m as usize) < plan.parent.len())
        && plan.parent.iter().all(|&p| (p as usize) < plan.rows());
    if !ok {
        return Err(CacheError::Corrupt("inconsistent pooling plan".into()));
    }
    Ok(plan)
}

fn write_frames(w: &mut impl Write, frames: &[TangentFrame]) -> io::Result<()> {
    write_len(w, frames.len())?;
    for f in frames {
        for v in [f.normal, f.i, f.j, f.eigenvalues] {
            v.iter().try_for_each(|x| w.write_f64::<LE>(*x))?;
        }
        w.write_u8(f.degenerate as u8)?;
    }
    Ok(())
}

fn read_frames(r: &mut Cursor<&[u8]>) -> Result<Vec<TangentFrame>, CacheError> {
    let n = read_len(r, 97)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = [[0.0; 3]; 4];
        for a in v.iter_mut() {
            r.read_f64_into::<LE>(a)?;
        }
        out.push(TangentFrame {
            normal: v[0],
            i: v[1],
            j: v[2],
            eigenvalues: v[3],
            degenerate: r.read_u8()? != 0,
        });
    }
    Ok(out)
}

fn write_cloud(w: &mut impl Write, c: &PointCloud) -> io::Result<()> {
    write_vec3s(w, c.positions())?;
    w.write_u8(c.colors().is_some() as u8)?;
    if let Some(colors) = c.colors() {
        write_vec3s(w, colors)?;
    }
    w.write_u8(c.labels().is_some() as u8)?;
    if let Some(labels) = c.labels() {
        write_u32s(w, labels)?;
    }
    w.write_u8(c.intensity().is_some() as u8)?;
    if let Some(intensity) = c.intensity() {
        write_f64s(w, intensity)?;
    }
    Ok(())
}

fn read_cloud(r: &mut Cursor<&[u8]>) -> Result<PointCloud, CacheError> {
    let corrupt = |e: crate::io::CloudError| CacheError::Corrupt(e.to_string());
    let mut cloud = PointCloud::new(read_vec3s(r)?).map_err(corrupt)?;
    if r.read_u8()? != 0 {
        cloud = cloud.with_colors(read_vec3s(r)?).map_err(corrupt)?;
    }
    if r.read_u8()? != 0 {
        cloud = cloud.with_labels(read_u32s(r)?).map_err(corrupt)?;
    }
    if r.read_u8()? != 0 {
        cloud = cloud.with_intensity(read_f64s(r)?).map_err(corrupt)?;
    }
    Ok(cloud)
}

/// Serialize a hierarchy.
pub fn encode_hierarchy(h: &Hierarchy) -> Vec<u8> {
    let mut w = Vec::new();
    let res: io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_all(&h.source_hash)?;
        write_config(&mut w, &h.config)?;
        write_pool(&mut w, &h.base)?;
        write_cloud(&mut w, &h.base_cloud)?;
        w.write_u32::<LE>(h.levels.len() as u32)?;
        for level in &h.levels {
            let g = &level.geometry;
            let c = &level.conv;
            w.write_u32::<LE>(g.level as u32)?;
            w.write_f64::<LE>(g.pixel_size)?;
            w.write_f64::<LE>(g.radius)?;
            w.write_u32::<LE>(g.image_size as u32)?;
            write_vec3s(&mut w, &g.positions)?;
            write_frames(&mut w, &g.frames)?;
            w.write_u64::<LE>(c.points as u64)?;
            w.write_u32::<LE>(c.pixels as u32)?;
            w.write_u32::<LE>(c.k as u32)?;
            write_u32s(&mut w, &c.indices)?;
            write_f64s(&mut w, &c.weights)?;
            write_f64s(&mut w, &c.distances)?;
            write_bools(&mut w, &c.valid)?;
        }
        w.write_u32::<LE>(h.pools.len() as u32)?;
        for p in &h.pools {
            write_pool(&mut w, p)?;
        }
        Ok(())
    })();
    res.expect("writing to a vec");
    w
}

/// Deserialize a hierarchy, validating shapes and index ranges.
pub fn decode_hierarchy(bytes: &[u8]) -> Result<Hierarchy, CacheError> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CacheError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(CacheError::Version(version));
    }
    let mut source_hash = [0u8; 32];
    r.read_exact(&mut source_hash)?;
    let config = read_config(&mut r)?;
    let base = read_pool(&mut r)?;
    let base_cloud = read_cloud(&mut r)?;
    if base_cloud.len() != base.rows() {
        return Err(CacheError::Corrupt("base cloud does not match its plan".into()));
    }
    let n_levels = r.read_u32::<LE>()? as usize;
    if n_levels != config.levels {
        return Err(CacheError::Corrupt("level count mismatch".into()));
    }
    let mut levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let level = r.read_u32::<LE>()? as usize;
        let pixel_size = r.read_f64::<LE>()?;
        let radius = r.read_f64::<LE>()?;
        let image_size = r.read_u32::<LE>()? as usize;
        let positions = read_vec3s(&mut r)?;
        let frames = read_frames(&mut r)?;
        let points = r.read_u64::<LE>()? as usize;
        let pixels = r.read_u32::<LE>()? as usize;
        let k = r.read_u32::<LE>()? as usize;
        let conv = ConvPlan {
            points,
            pixels,
            k,
            indices: read_u32s(&mut r)?,
            weights: read_f64s(&mut r)?,
            distances: read_f64s(&mut r)?,
            valid: read_bools(&mut r)?,
        };
        let n = positions.len();
        let ok = frames.len() == n
            && points == n
            && pixels == image_size * image_size
            && k == config.interpolation.k()
            && conv.indices.len() == k * n * pixels
            && conv.weights.len() == k * n * pixels
            && conv.distances.len() == n * pixels
            && conv.valid.len() == n * pixels
            && conv.indices.iter().all(|&i| (i as usize) < n);
        if !ok {
            return Err(CacheError::Corrupt(format!("inconsistent plan at level {level}")));
        }
        levels.push(Level {
            geometry: LevelGeometry {
                level,
                positions,
                frames,
                pixel_size,
                radius,
                image_size,
            },
            conv,
        });
    }
    let n_pools = r.read_u32::<LE>()? as usize;
    if n_pools + 1 != n_levels {
        return Err(CacheError::Corrupt("pool count mismatch".into()));
    }
    let mut pools = Vec::with_capacity(n_pools);
    for i in 0..n_pools {
        let p = read_pool(&mut r)?;
        if p.fine_len() != levels[i].geometry.len() || p.rows() != levels[i + 1].geometry.len() {
            return Err(CacheError::Corrupt(format!("pool {i} does not match its levels")));
        }
        pools.push(p);
    }
    if levels[0].geometry.len() != base.rows() {
        return Err(CacheError::Corrupt("level 0 does not match base plan".into()));
    }
    if r.position() as usize != bytes.len() {
        return Err(CacheError::Corrupt("trailing bytes".into()));
    }
    Ok(Hierarchy {
        config,
        source_hash,
        base,
        base_cloud,
        levels,
        pools,
    })
}

pub fn write_hierarchy(path: &Path, h: &Hierarchy) -> Result<(), CacheError> {
    std::fs::write(path, encode_hierarchy(h))?;
    Ok(())
}

pub fn read_hierarchy(path: &Path) -> Result<Hierarchy, CacheError> {
    decode_hierarchy(&std::fs::read(path)?)
}

/// Read a cache and check it was built from `cloud` with `config`.
pub fn read_hierarchy_for(
    path: &Path,
    cloud: &PointCloud,
    config: &HierarchyConfig,
) -> Result<Hierarchy, CacheError> {
    let h = read_hierarchy(path)?;
    if h.source_hash != source_hash(cloud, config) {
        return Err(CacheError::StaleSource);
    }
    Ok(h)
}
