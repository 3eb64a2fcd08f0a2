//! Trilinear resampling under a per-axis scale and translation.
//!
//! Coordinates are normalized to `[-1, 1]` per axis with voxel centers at
//! `(2i + 1) / n - 1`. The output voxel at `u` reads the input at
//! `(u - t) / s`; samples outside the volume read zero.

use super::Real;

#[inline]
pub(crate) fn source_coord<T: Real>(i: usize, n: usize, s: T, t: T) -> T {
    // Arranged so that s = 1, t = 0 yields exactly i.
    let nf = T::from_usize(n).unwrap();
    let two = T::one() + T::one();
    let num = T::from_usize(2 * i + 1).unwrap() - nf * (T::one() + t);
    (num / s + nf - T::one()) / two
}

struct Corner<T> {
    base: [isize; 3],
    frac: [T; 3],
}

#[inline]
fn corner<T: Real>(p: [T; 3]) -> Corner<T> {
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    Corner {
        base: [
            f[0].to_isize().unwrap_or(isize::MIN / 2),
            f[1].to_isize().unwrap_or(isize::MIN / 2),
            f[2].to_isize().unwrap_or(isize::MIN / 2),
        ],
        frac: [p[0] - f[0], p[1] - f[1], p[2] - f[2]],
    }
}

#[inline]
fn offset(dims: [usize; 3], idx: [isize; 3]) -> Option<usize> {
    for a in 0..3 {
        if idx[a] < 0 || idx[a] as usize >= dims[a] {
            return None;
        }
    }
    Some((idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize)
}

/// Resamples a single-channel volume; plain (non-recording) version.
pub fn resample_volume<T: Real>(volume: &[T], dims: [usize; 3], s: [T; 3], t: [T; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); volume.len()];
    forward_into(volume, dims, s, t, &mut out);
    out
}

pub(crate) fn forward_into<T: Real>(
    volume: &[T],
    dims: [usize; 3],
    s: [T; 3],
    t: [T; 3],
    out: &mut [T],
) {
    let xs: Vec<T> = (0..dims[0]).map(|i| source_coord(i, dims[0], s[0], t[0])).collect();
    let ys: Vec<T> = (0..dims[1]).map(|i| source_coord(i, dims[1], s[1], t[1])).collect();
    let zs: Vec<T> = (0..dims[2]).map(|i| source_coord(i, dims[2], s[2], t[2])).collect();
    let mut o = 0;
    for &px in &xs {
        for &py in &ys {
            for &pz in &zs {
                let c = corner([px, py, pz]);
                let mut acc = T::zero();
                for k in 0..8 {
                    let bits = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
                    let idx = [
                        c.base[0] + bits[0] as isize,
                        c.base[1] + bits[1] as isize,
                        c.base[2] + bits[2] as isize,
                    ];
                    if let Some(off) = offset(dims, idx) {
                        let mut w = T::one();
                        for a in 0..3 {
                            w = w * if bits[a] == 1 { c.frac[a] } else { T::one() - c.frac[a] };
                        }
                        acc = acc + w * volume[off];
                    }
                }
                out[o] = acc;
                o += 1;
            }
        }
    }
}

/// Accumulates gradients for one batch item. `dvol` may be `None` when the
/// volume does not require gradients.
pub(crate) fn backward_item<T: Real>(
    volume: &[T],
    dims: [usize; 3],
    s: [T; 3],
    t: [T; 3],
    dy: &[T],
    mut dvol: Option<&mut [T]>,
    ds: &mut [T; 3],
    dt: &mut [T; 3],
) {
    let two = T::one() + T::one();
    let nf = [
        T::from_usize(dims[0]).unwrap(),
        T::from_usize(dims[1]).unwrap(),
        T::from_usize(dims[2]).unwrap(),
    ];
    let mut o = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for l in 0..dims[2] {
                let g = dy[o];
                o += 1;
                let ii = [i, j, l];
                let mut p = [T::zero(); 3];
                let mut u = [T::zero(); 3];
                for a in 0..3 {
                    u[a] = T::from_usize(2 * ii[a] + 1).unwrap() / nf[a] - T::one();
                    p[a] = source_coord(ii[a], dims[a], s[a], t[a]);
                }
                let c = corner(p);
                let mut dp = [T::zero(); 3];
                for k in 0..8 {
                    let bits = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
                    let idx = [
                        c.base[0] + bits[0] as isize,
                        c.base[1] + bits[1] as isize,
                        c.base[2] + bits[2] as isize,
                    ];
                    let Some(off) = offset(dims, idx) else {
                        continue;
                    };
                    let wa: [T; 3] = std::array::from_fn(|a| {
                        if bits[a] == 1 {
                            c.frac[a]
                        } else {
                            T::one() - c.frac[a]
                        }
                    });
                    if let Some(dv) = dvol.as_deref_mut() {
                        dv[off] = dv[off] + g * wa[0] * wa[1] * wa[2];
                    }
                    let val = volume[off];
                    for a in 0..3 {
                        let sign = if bits[a] == 1 { T::one() } else { -T::one() };
                        let mut w = sign;
                        for b in 0..3 {
                            if b != a {
                                w = w * wa[b];
                            }
                        }
                        dp[a] = dp[a] + w * val;
                    }
                }
                for a in 0..3 {
                    let scale = nf[a] / (two * s[a]);
                    dt[a] = dt[a] - g * dp[a] * scale;
                    ds[a] = ds[a] - g * dp[a] * scale * (u[a] - t[a]) / s[a];
                }
            }
        }
    }
}
