use super::{mask_points, neighbor_offsets, voxel_coord, voxel_index, Coord, SegmentedScene};
use crate::error::{Error, Result};

/// Components smaller than this fraction of their label's largest component
/// are removed by [`prune_components`].
pub const PRUNE_FRACTION: f64 = 0.1;
const PRUNE_DENOMINATOR: usize = 10;

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k] {
                // z[0] is -inf, so this never underflows.
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let d = qf - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every cell of a `dims` box to the
/// nearest `true` cell. Cells are stored x-major like voxel grids.
pub fn edt_squared(mask: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let longest = dims.iter().copied().max().unwrap_or(0);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 0 {
            continue;
        }
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..n {
                    f[k] = g[base + k * strides[axis]];
                }
                dt_1d(&f[..n], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
                for k in 0..n {
                    // Saturate so unreachable cells stay "far" rather than
                    // accumulating spurious finite values.
                    g[base + k * strides[axis]] = out[k].min(FAR);
                }
            }
        }
    }
    g
}

fn box_of(a: &[Coord], b: &[Coord]) -> ([usize; 3], [usize; 3]) {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for p in a.iter().chain(b) {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, std::array::from_fn(|k| hi[k] - lo[k] + 1))
}

fn directed_sum(from: &[Coord], to_field: &[f64], lo: [usize; 3], dims: [usize; 3]) -> u64 {
    from.iter()
        .map(|p| {
            let i = ((p[0] - lo[0]) * dims[1] + (p[1] - lo[1])) * dims[2] + (p[2] - lo[2]);
            to_field[i] as u64
        })
        .sum()
}

/// Symmetric Chamfer distance with squared Euclidean point distances.
///
/// Nearest-neighbour distances come from an exact distance transform over
/// the joint bounding box, so the result equals the brute-force double loop
/// bit for bit.
pub fn chamfer(a: &[Coord], b: &[Coord]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty point set"));
    }
    let (lo, dims) = box_of(a, b);
    let n: usize = dims.iter().product();
    let mut ma = vec![false; n];
    let mut mb = vec![false; n];
    let local = |p: &Coord| ((p[0] - lo[0]) * dims[1] + (p[1] - lo[1])) * dims[2] + (p[2] - lo[2]);
    for p in a {
        ma[local(p)] = true;
    }
    for p in b {
        mb[local(p)] = true;
    }
    let da = edt_squared(&ma, dims);
    let db = edt_squared(&mb, dims);
    let ab = directed_sum(a, &db, lo, dims);
    let ba = directed_sum(b, &da, lo, dims);
    Ok(ab as f64 / a.len() as f64 + ba as f64 / b.len() as f64)
}

/// [`chamfer`] on two occupancy masks of the same cubic grid.
pub fn chamfer_grid(res: usize, a: &[bool], b: &[bool]) -> Result<f64> {
    chamfer(&mask_points(res, a), &mask_points(res, b))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Maximal 26-connected components of a cubic mask, as sorted voxel index
/// lists. Larger components come first; equal sizes are ordered by their
/// lowest voxel index.
pub fn connected_components(res: usize, mask: &[bool]) -> Vec<Vec<usize>> {
    let n = mask.len();
    let mut parent: Vec<usize> = (0..n).collect();
    // Visiting only the 13 "forward" neighbours covers every edge once.
    let forward: Vec<[isize; 3]> = neighbor_offsets()
        .filter(|o| (o[0], o[1], o[2]) > (0, 0, 0))
        .collect();
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let c = voxel_coord(res, i);
        for o in &forward {
            let q: [isize; 3] = std::array::from_fn(|a| c[a] as isize + o[a]);
            if q.iter().any(|&v| v < 0 || v >= res as isize) {
                continue;
            }
            let j = voxel_index(res, q.map(|v| v as usize));
            if mask[j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if mask[i] {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = comps.len();
                comps.push(Vec::new());
            }
            comps[slot[r]].push(i);
        }
    }
    // Components were created in order of their lowest index; a stable sort
    // keeps that order among equal sizes.
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps
}

/// Per label, turns components smaller than 10% of the label's largest
/// component into Empty voxels.
pub fn prune_components(seg: &SegmentedScene) -> SegmentedScene {
    let res = seg.res();
    let mut labels = seg.labels().to_vec();
    for label in 0..seg.num_labels() {
        let comps = connected_components(res, &seg.label_mask(label));
        let Some(largest) = comps.first().map(Vec::len) else {
            continue;
        };
        for c in &comps[1..] {
            // Strict "< 10%", in integers to avoid rounding at the boundary.
            if c.len() * PRUNE_DENOMINATOR < largest {
                for &i in c {
                    labels[i] = None;
                }
            }
        }
    }
    let central = seg.scene().central_mask();
    SegmentedScene::from_label_field(res, &central, &labels, seg.num_labels())
        .expect("pruning only removes interacting voxels")
}
