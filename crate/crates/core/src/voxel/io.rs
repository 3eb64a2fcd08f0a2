//! `VXSC` scene files and the JSON dataset manifest.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "VXSC" | version: u16 | R: u16 | M: u16 | categories: u16 | category: u16 |
//!   R³ state bytes (0 Empty, 1 Central, 2 + k Interacting with label k) |
//!   s: 3 x f32 | t: 3 x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneGrid, SegmentedScene, TransformParams, VoxelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VXSC";
const VERSION: u16 = 1;

/// A labeled scene as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub seg: SegmentedScene,
    pub num_categories: usize,
    pub category: usize,
    pub transform: TransformParams,
}

fn u16_field(what: &str, v: usize) -> Result<[u8; 2]> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| Error::invalid(format!("{what} {v} does not fit the scene header")))
}

pub fn write_scene(mut w: impl Write, rec: &SceneRecord) -> Result<()> {
    if rec.category >= rec.num_categories {
        return Err(Error::invalid(format!(
            "category {} out of range for {} categories",
            rec.category, rec.num_categories
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u16_field("resolution", rec.seg.res())?)?;
    w.write_all(&u16_field("label count", rec.seg.num_labels())?)?;
    w.write_all(&u16_field("category count", rec.num_categories)?)?;
    w.write_all(&u16_field("category", rec.category)?)?;
    let body: Vec<u8> = rec
        .seg
        .scene()
        .states()
        .iter()
        .zip(rec.seg.labels())
        .map(|(&s, &l)| match s {
            VoxelState::Empty => 0,
            VoxelState::Central => 1,
            VoxelState::Interacting => 2 + l.expect("interacting voxels are labeled"),
        })
        .collect();
    w.write_all(&body)?;
    for v in rec.transform.s.iter().chain(&rec.transform.t) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("scene", format!("truncated: {e}")))?;
    Ok(b)
}

pub fn read_scene(mut r: impl Read) -> Result<SceneRecord> {
    if &take::<4>(&mut r)? != MAGIC {
        return Err(Error::format("scene", "bad magic"));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::format("scene", format!("unsupported version {version}")));
    }
    let res = u16::from_le_bytes(take(&mut r)?) as usize;
    let num_labels = u16::from_le_bytes(take(&mut r)?) as usize;
    let num_categories = u16::from_le_bytes(take(&mut r)?) as usize;
    let category = u16::from_le_bytes(take(&mut r)?) as usize;
    if category >= num_categories {
        return Err(Error::format(
            "scene",
            format!("category {category} out of range for {num_categories}"),
        ));
    }
    let mut body = vec![0u8; res.pow(3)];
    r.read_exact(&mut body)
        .map_err(|e| Error::format("scene", format!("truncated voxel body: {e}")))?;
    let mut states = Vec::with_capacity(body.len());
    let mut labels = Vec::with_capacity(body.len());
    for &code in &body {
        let (s, l) = match code {
            0 => (VoxelState::Empty, None),
            1 => (VoxelState::Central, None),
            c => (VoxelState::Interacting, Some(c - 2)),
        };
        states.push(s);
        labels.push(l);
    }
    let mut tf = [0f32; 6];
    for v in &mut tf {
        *v = f32::from_le_bytes(take(&mut r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("scene", "trailing bytes"));
    }
    let scene = SceneGrid::new(res, states).map_err(|e| Error::format("scene", e.to_string()))?;
    let seg = SegmentedScene::new(scene, labels, num_labels)
        .map_err(|e| Error::format("scene", e.to_string()))?;
    Ok(SceneRecord {
        seg,
        num_categories,
        category,
        transform: TransformParams {
            s: [tf[0], tf[1], tf[2]],
            t: [tf[3], tf[4], tf[5]],
        },
    })
}

pub fn write_scene_file(path: impl AsRef<Path>, rec: &SceneRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_scene(&mut w, rec)?;
    w.flush()?;
    Ok(())
}

pub fn read_scene_file(path: impl AsRef<Path>) -> Result<SceneRecord> {
    read_scene(BufReader::new(File::open(path)?))
}

/// Index of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: usize,
    pub categories: Vec<String>,
    pub labels: Vec<String>,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub category: usize,
    pub seed: u64,
}

pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, m)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
