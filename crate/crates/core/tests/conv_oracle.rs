//! Convolution forward passes against direct loops.

use funcnet::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[allow(clippy::too_many_arguments)]
fn direct_conv(
    x: &[f64], xs: [usize; 5], w: &[f64], co: usize, k: usize, b: &[f64], stride: usize, pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, d, h, wd] = xs;
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let os = [n, co, o(d), o(h), o(wd)];
    let mut y = vec![0.0; os.iter().product()];
    for bn in 0..n {
        for c in 0..co {
            for i in 0..os[2] {
                for j in 0..os[3] {
                    for l in 0..os[4] {
                        let mut acc = b[c];
                        for q in 0..ci {
                            for a in 0..k {
                                for bb in 0..k {
                                    for cc in 0..k {
                                        let zi = (i * stride + a) as isize - pad as isize;
                                        let zj = (j * stride + bb) as isize - pad as isize;
                                        let zl = (l * stride + cc) as isize - pad as isize;
                                        if zi < 0 || zj < 0 || zl < 0 {
                                            continue;
                                        }
                                        let (zi, zj, zl) = (zi as usize, zj as usize, zl as usize);
                                        if zi >= d || zj >= h || zl >= wd {
                                            continue;
                                        }
                                        let xv = x[(((bn * ci + q) * d + zi) * h + zj) * wd + zl];
                                        let wv = w[(((c * ci + q) * k + a) * k + bb) * k + cc];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[(((bn * co + c) * os[2] + i) * os[3] + j) * os[4] + l] = acc;
                    }
                }
            }
        }
    }
    (y, os)
}

#[allow(clippy::too_many_arguments)]
fn direct_conv_transpose(
    x: &[f64], xs: [usize; 5], w: &[f64], co: usize, k: usize, b: &[f64], stride: usize, pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, d, h, wd] = xs;
    let o = |e: usize| (e - 1) * stride + k - 2 * pad;
    let os = [n, co, o(d), o(h), o(wd)];
    let mut y = vec![0.0; os.iter().product()];
    for bn in 0..n {
        for c in 0..co {
            for v in 0..os[2] * os[3] * os[4] {
                y[(bn * co + c) * os[2] * os[3] * os[4] + v] = b[c];
            }
        }
        for q in 0..ci {
            for i in 0..d {
                for j in 0..h {
                    for l in 0..wd {
                        let xv = x[(((bn * ci + q) * d + i) * h + j) * wd + l];
                        for c in 0..co {
                            for a in 0..k {
                                for bb in 0..k {
                                    for cc in 0..k {
                                        let zi = (i * stride + a) as isize - pad as isize;
                                        let zj = (j * stride + bb) as isize - pad as isize;
                                        let zl = (l * stride + cc) as isize - pad as isize;
                                        if zi < 0 || zj < 0 || zl < 0 {
                                            continue;
                                        }
                                        let (zi, zj, zl) = (zi as usize, zj as usize, zl as usize);
                                        if zi >= os[2] || zj >= os[3] || zl >= os[4] {
                                            continue;
                                        }
                                        let wv = w[(((q * co + c) * k + a) * k + bb) * k + cc];
                                        y[(((bn * co + c) * os[2] + zi) * os[3] + zj) * os[4] + zl] +=
                                            xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, os)
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(b) {
        assert!((p - q).abs() < 1e-10, "{p} vs {q}");
    }
}

#[test]
fn conv3d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(xs, co, k, stride, pad) in &[
        ([2, 3, 6, 5, 4], 4, 3, 1, 1),
        ([1, 2, 8, 8, 8], 3, 4, 2, 1),
        ([1, 1, 5, 5, 5], 2, 2, 2, 0),
    ] {
        let x = rand_vec(&mut rng, xs.iter().product());
        let w = rand_vec(&mut rng, co * xs[1] * k * k * k);
        let b = rand_vec(&mut rng, co);
        let (want, os) = direct_conv(&x, xs, &w, co, k, &b, stride, pad);
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new(xs.to_vec(), x).unwrap());
        let wv = g.input(Tensor::new(vec![co, xs[1], k, k, k], w).unwrap());
        let bv = g.input(Tensor::new(vec![co], b).unwrap());
        let y = g.conv3d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.shape(y), &os);
        assert_close(g.value(y).data(), &want);
    }
}

#[test]
fn conv_transpose3d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(xs, co, k, stride, pad) in &[
        ([2, 3, 2, 2, 2], 2, 4, 2, 1),
        ([1, 2, 3, 4, 2], 3, 3, 1, 1),
        ([1, 1, 2, 3, 2], 1, 2, 2, 0),
    ] {
        let x = rand_vec(&mut rng, xs.iter().product());
        let w = rand_vec(&mut rng, xs[1] * co * k * k * k);
        let b = rand_vec(&mut rng, co);
        let (want, os) = direct_conv_transpose(&x, xs, &w, co, k, &b, stride, pad);
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new(xs.to_vec(), x).unwrap());
        let wv = g.input(Tensor::new(vec![xs[1], co, k, k, k], w).unwrap());
        let bv = g.input(Tensor::new(vec![co], b).unwrap());
        let y = g.conv_transpose3d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.shape(y), &os);
        assert_close(g.value(y).data(), &want);
    }
}
