//! Scene export: native VXSC, cube-mesh OBJ with one material per label,
//! and a CSV voxel list.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::datagen::LABEL_NAMES;
use crate::error::{Error, Result};
use crate::voxel::{voxel_coord, write_scene_file, SceneRecord, SegmentedScene, VoxelState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Vxsc,
    Obj,
    Csv,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vxsc" => Ok(ExportFormat::Vxsc),
            "obj" => Ok(ExportFormat::Obj),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::invalid(format!("unknown export format {other:?}"))),
        }
    }
}

impl ExportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::invalid(format!("{} has no file extension", path.display())))?
            .parse()
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.60, 0.60, 0.60],
    [0.89, 0.45, 0.20],
    [0.25, 0.55, 0.85],
    [0.30, 0.70, 0.35],
    [0.85, 0.25, 0.45],
    [0.60, 0.40, 0.80],
    [0.90, 0.80, 0.25],
    [0.30, 0.75, 0.75],
];

pub const CENTRAL_MATERIAL: &str = "central";

/// Material name of an interaction label.
pub fn label_material(label: usize) -> String {
    match LABEL_NAMES.get(label) {
        Some(name) => format!("label_{name}"),
        None => format!("label_{label}"),
    }
}

/// Material names in file order: the central object, then labels.
pub fn materials(num_labels: usize) -> Vec<String> {
    std::iter::once(CENTRAL_MATERIAL.to_string())
        .chain((0..num_labels).map(label_material))
        .collect()
}

pub fn write_mtl(mut w: impl Write, num_labels: usize) -> Result<()> {
    for (i, name) in materials(num_labels).iter().enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        writeln!(w, "newmtl {name}\nKd {r:.3} {g:.3} {b:.3}\n")?;
    }
    Ok(())
}

/// Unit-cube mesh: 8 vertices and 6 quads per occupied voxel, grouped by
/// material.
pub fn write_obj(mut w: impl Write, seg: &SegmentedScene, mtllib: Option<&str>) -> Result<()> {
    let res = seg.res();
    let states = seg.scene().states();
    let labels = seg.labels();
    if let Some(lib) = mtllib {
        writeln!(w, "mtllib {lib}")?;
    }
    let groups = std::iter::once(None).chain((0..seg.num_labels()).map(Some));
    let mut vertex = 1usize;
    for (group, name) in groups.zip(materials(seg.num_labels())) {
        let voxels: Vec<usize> = (0..states.len())
            .filter(|&v| match group {
                None => states[v] == VoxelState::Central,
                Some(l) => labels[v] == Some(l as u8),
            })
            .collect();
        if voxels.is_empty() {
            continue;
        }
        writeln!(w, "g {name}\nusemtl {name}")?;
        for v in voxels {
            let [x, y, z] = voxel_coord(res, v);
            for corner in 0..8 {
                let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                writeln!(w, "v {} {} {}", x + dx, y + dy, z + dz)?;
            }
            let b = vertex;
            for f in [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]] {
                writeln!(w, "f {} {} {} {}", b + f[0], b + f[1], b + f[2], b + f[3])?;
            }
            vertex += 8;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VoxelRow<'a> {
    x: usize,
    y: usize,
    z: usize,
    state: &'a str,
    label: Option<u8>,
}

/// One row per non-empty voxel: `x,y,z,state,label`.
pub fn write_csv(w: impl Write, seg: &SegmentedScene) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let res = seg.res();
    for (v, (&s, &label)) in seg.scene().states().iter().zip(seg.labels()).enumerate() {
        let state = match s {
            VoxelState::Empty => continue,
            VoxelState::Central => "central",
            VoxelState::Interacting => "interacting",
        };
        let [x, y, z] = voxel_coord(res, v);
        out.serialize(VoxelRow { x, y, z, state, label })
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `rec` to `path` in `format`; OBJ also writes a sibling `.mtl`.
pub fn export_scene(path: impl AsRef<Path>, rec: &SceneRecord, format: ExportFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ExportFormat::Vxsc => write_scene_file(path, rec),
        ExportFormat::Obj => {
            let mtl = path.with_extension("mtl");
            write_mtl(std::io::BufWriter::new(std::fs::File::create(&mtl)?), rec.seg.num_labels())?;
            let lib = mtl.file_name().and_then(|n| n.to_str()).map(str::to_string);
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_obj(&mut w, &rec.seg, lib.as_deref())?;
            w.flush()?;
            Ok(())
        }
        ExportFormat::Csv => write_csv(std::io::BufWriter::new(std::fs::File::create(path)?), &rec.seg),
    }
}
