//! Central finite-difference checks of every differentiable operator, in f64.
#![allow(dead_code)]

use funcnet::nn::hinge_mean;
use funcnet::tensor::{Graph, ParamStore, Tensor, Var};
use funcnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
    /// Tolerance the operator is expected to meet.
    pub tol: f64,
    /// Whether the case exercises the resampler.
    pub resampler: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `±[lo, hi)`, away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let l = build(&mut g, &vars).unwrap();
    g.value(l).item()
}

/// Largest `|numeric − analytic| / (1 + |numeric|)` over every input element.
pub fn max_error(case: &GradCase) -> f64 {
    let inputs = &case.inputs;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let l = (case.build)(&mut g, &vars).unwrap();
    g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&*case.build, &plus) - eval(&*case.build, &minus)) / (2.0 * H);
            worst = worst.max((numeric - analytic[i]).abs() / (1.0 + numeric.abs()));
        }
    }
    worst
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, tol: f64, build: Box<Build>) -> GradCase {
    GradCase {
        name,
        inputs,
        build,
        tol,
        resampler: false,
    }
}

pub fn suite() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();

    out.push(case(
        "conv3d",
        vec![
            rand_tensor(&mut rng, &[2, 2, 4, 4, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 2, 4, 4, 4], -0.5, 0.5),
            rand_tensor(&mut rng, &[3], -0.5, 0.5),
        ],
        1e-6,
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], v[2], 2, 1)?;
            weighted_sum(g, y, 11)
        }),
    ));
    out.push(case(
        "conv3d_k3",
        vec![
            rand_tensor(&mut rng, &[1, 1, 3, 4, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 1, 3, 3, 3], -0.5, 0.5),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
        ],
        1e-6,
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], v[2], 1, 1)?;
            weighted_sum(g, y, 12)
        }),
    ));
    out.push(case(
        "conv_transpose3d",
        vec![
            rand_tensor(&mut rng, &[2, 3, 2, 2, 2], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 2, 4, 4, 4], -0.5, 0.5),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
        ],
        1e-6,
        Box::new(|g, v| {
            let y = g.conv_transpose3d(v[0], v[1], v[2], 2, 1)?;
            weighted_sum(g, y, 13)
        }),
    ));
    out.push(case(
        "linear",
        vec![
            rand_tensor(&mut rng, &[3, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[4, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[4], -1.0, 1.0),
        ],
        1e-7,
        Box::new(|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, 14)
        }),
    ));
    // Relu inputs stay away from the kink.
    out.push(case(
        "activations",
        vec![off_zero(&mut rng, &[2, 6], 0.05, 2.0), rand_tensor(&mut rng, &[2, 6], -2.0, 2.0)],
        1e-7,
        Box::new(|g, v| {
            let r = g.relu(v[0]);
            let s = g.sigmoid(v[1]);
            let p = g.softplus(v[0]);
            let a = g.add(r, s)?;
            let m = g.mul(a, p)?;
            let d = g.sub(m, v[1])?;
            let c = g.add_scalar(d, 0.3);
            let k = g.scale(c, -1.7);
            weighted_sum(g, k, 15)
        }),
    ));
    let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    out.push(case(
        "softmax",
        vec![x.clone()],
        1e-7,
        Box::new(|g, v| {
            let mut acc = Vec::new();
            for axis in 0..3 {
                let y = g.softmax(v[0], axis)?;
                acc.push(weighted_sum(g, y, 16 + axis as u64)?);
            }
            let a = g.add(acc[0], acc[1])?;
            g.add(a, acc[2])
        }),
    ));
    out.push(case(
        "log_softmax",
        vec![x.clone()],
        1e-7,
        Box::new(|g, v| {
            let y = g.log_softmax(v[0], 1)?;
            weighted_sum(g, y, 17)
        }),
    ));
    out.push(case(
        "log_sum_exp",
        vec![x],
        1e-7,
        Box::new(|g, v| {
            let y = g.log_sum_exp(v[0], 2)?;
            weighted_sum(g, y, 18)
        }),
    ));
    out.push(case(
        "shape_ops",
        vec![rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0), rand_tensor(&mut rng, &[2, 1, 2], -1.0, 1.0)],
        1e-7,
        Box::new(|g, v| {
            let c = g.concat(&[v[0], v[1], v[0]], 1)?;
            let n = g.narrow(c, 1, 2, 4)?;
            let r = g.reshape(n, &[4, 4])?;
            let q = g.row_norm(r)?;
            let m = g.mean(q);
            let s = weighted_sum(g, r, 19)?;
            g.add(m, s)
        }),
    ));
    let target: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let mask: Vec<bool> = (0..10).map(|i| i != 4).collect();
    out.push(case(
        "binary_cross_entropy",
        vec![rand_tensor(&mut rng, &[10], 0.1, 0.9)],
        1e-7,
        Box::new(move |g, v| g.masked_bce_mean(v[0], &target, &mask)),
    ));
    let labels = vec![0, 3, 2, 1, 1, 0];
    let cmask = vec![true, true, false, true, true, true];
    out.push(case(
        "categorical_cross_entropy",
        vec![rand_tensor(&mut rng, &[2, 4, 3], -2.0, 2.0)],
        1e-7,
        Box::new(move |g, v| g.categorical_ce_mean(v[0], &labels, &cmask)),
    ));
    let mut resample = case(
        "trilinear_resample",
        vec![
            rand_tensor(&mut rng, &[2, 1, 4, 5, 3], 0.0, 1.0),
            rand_tensor(&mut rng, &[2, 3], 0.6, 1.4),
            rand_tensor(&mut rng, &[2, 3], -0.4, 0.4),
        ],
        1e-5,
        Box::new(|g, v| {
            let y = g.trilinear_resample(v[0], v[1], v[2])?;
            weighted_sum(g, y, 20)
        }),
    );
    resample.resampler = true;
    out.push(resample);

    let (b, n, d) = (2, 3, 4);
    out.push(case(
        "gmm_expectation",
        vec![
            rand_tensor(&mut rng, &[b, n], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], 0.5, 1.5),
            rand_tensor(&mut rng, &[b, d], -1.0, 1.0),
        ],
        1e-6,
        Box::new(|g, v| {
            let lw = g.log_softmax(v[0], 1)?;
            let e = g.gmm_nll(lw, v[1], v[2], v[3])?;
            weighted_sum(g, e, 21)
        }),
    ));
    // Object-to-scene triplet: one mixture, two scene features. The margin
    // keeps every hinge strictly active.
    out.push(case(
        "triplet_object_to_scene",
        vec![
            rand_tensor(&mut rng, &[b, n], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], 0.5, 1.5),
            rand_tensor(&mut rng, &[b, d], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, d], -1.0, 1.0),
        ],
        1e-6,
        Box::new(|g, v| {
            let lw = g.log_softmax(v[0], 1)?;
            let pos = g.gmm_nll(lw, v[1], v[2], v[3])?;
            let neg = g.gmm_nll(lw, v[1], v[2], v[4])?;
            hinge_mean(g, pos, neg, 100.0)
        }),
    ));
    // Scene-to-object triplet: one scene feature, two mixtures.
    out.push(case(
        "triplet_scene_to_object",
        vec![
            rand_tensor(&mut rng, &[b, n], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], 0.5, 1.5),
            rand_tensor(&mut rng, &[b, n], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], -1.0, 1.0),
            rand_tensor(&mut rng, &[b, n, d], 0.5, 1.5),
            rand_tensor(&mut rng, &[b, d], -1.0, 1.0),
        ],
        1e-6,
        Box::new(|g, v| {
            let lp = g.log_softmax(v[0], 1)?;
            let ln = g.log_softmax(v[3], 1)?;
            let pos = g.gmm_nll(lp, v[1], v[2], v[6])?;
            let neg = g.gmm_nll(ln, v[4], v[5], v[6])?;
            hinge_mean(g, pos, neg, 100.0)
        }),
    ));

    // A small network mixing every layer type.
    let mut store = ParamStore::<f64>::new();
    let ids = [store.add_he("c.w", &[2, 1, 4, 4, 4], 64, &mut rng).unwrap(),
        store.add_zeros("c.b", &[2]).unwrap(),
        store.add_he("l.w", &[6, 16], 16, &mut rng).unwrap(),
        store.add_zeros("l.b", &[6]).unwrap(),
        store.add_he("t.w", &[6, 1, 4, 4, 4], 6, &mut rng).unwrap(),
        store.add_zeros("t.b", &[1]).unwrap()];
    let x = rand_tensor(&mut rng, &[1, 1, 4, 4, 4], 0.0, 1.0);
    let target: Vec<f64> = (0..64).map(|i| ((i * 7) % 5 < 2) as u8 as f64).collect();
    let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.value(id).clone()).collect();
    // He init can leave a relu unit near zero; nudge biases off the kink.
    inputs[1] = Tensor::new(vec![2], vec![0.11, -0.07]).unwrap();
    inputs[3] = rand_tensor(&mut rng, &[6], 0.05, 0.2);
    out.push(case(
        "composite_network",
        inputs,
        1e-5,
        Box::new(move |g, v| {
            let xi = g.input(x.clone());
            let h = g.conv3d(xi, v[0], v[1], 2, 1)?;
            let h = g.relu(h);
            let h = g.reshape(h, &[1, 16])?;
            let h = g.linear(h, v[2], v[3])?;
            let h = g.relu(h);
            let h = g.reshape(h, &[1, 6, 1, 1, 1])?;
            let y = g.conv_transpose3d(h, v[4], v[5], 4, 0)?;
            let p = g.sigmoid(y);
            g.masked_bce_mean(p, &target, &[true; 64])
        }),
    ));
    out
}
