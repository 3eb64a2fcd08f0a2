//! GMM density oracle in an extended-exponent representation.

use funcnet::fsim::GmmParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `m · 2^e` with `m ∈ [1, 2)`, so densities far below the f64 range stay
/// representable.
#[derive(Clone, Copy, Debug)]
pub struct Wide {
    m: f64,
    e: i64,
}

impl Wide {
    const ZERO: Wide = Wide { m: 0.0, e: 0 };

    fn norm(mut m: f64, mut e: i64) -> Wide {
        if m == 0.0 {
            return Wide::ZERO;
        }
        while m >= 2.0 {
            m /= 2.0;
            e += 1;
        }
        while m < 1.0 {
            m *= 2.0;
            e -= 1;
        }
        Wide { m, e }
    }

    fn from_f64(v: f64) -> Wide {
        Wide::norm(v, 0)
    }

    /// `exp(x)` split as `2^n · exp(x − n ln 2)`.
    fn exp(x: f64) -> Wide {
        let n = (x / std::f64::consts::LN_2).floor();
        Wide::norm((x - n * std::f64::consts::LN_2).exp(), n as i64)
    }

    fn mul(self, o: Wide) -> Wide {
        Wide::norm(self.m * o.m, self.e + o.e)
    }

    fn add(self, o: Wide) -> Wide {
        if self.m == 0.0 {
            return o;
        }
        if o.m == 0.0 {
            return self;
        }
        let (hi, lo) = if self.e >= o.e { (self, o) } else { (o, self) };
        let shift = (hi.e - lo.e).min(2000) as i32;
        Wide::norm(hi.m + lo.m * 2f64.powi(-shift), hi.e)
    }

    fn ln(self) -> f64 {
        self.m.ln() + self.e as f64 * std::f64::consts::LN_2
    }
}

/// Negative log density, summed term by term in the wide representation.
pub fn wide_nll(g: &GmmParams, f: &[f64]) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = Wide::ZERO;
    for k in 0..g.weights.len() {
        let mut p = Wide::from_f64(g.weights[k]);
        for j in 0..f.len() {
            let s = g.sigmas[k][j];
            let z = (f[j] - g.means[k][j]) / s;
            p = p.mul(Wide::from_f64(norm / s)).mul(Wide::exp(-0.5 * z * z));
        }
        total = total.add(p);
    }
    -total.ln()
}

/// Instances cycle through moderate, `σ = 1e-6`, and far (`‖f − μ‖ ≤ 50`) cases.
pub fn random_instance(rng: &mut ChaCha8Rng, case: usize) -> (GmmParams, Vec<f64>) {
    let d = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=5);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let sigmas = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| match case % 3 {
                    1 if rng.gen_bool(0.5) => 1e-6,
                    _ => 10f64.powf(rng.gen_range(-2.0..0.5)),
                })
                .collect()
        })
        .collect();
    // Distance from the first mean: small, or anywhere up to 50.
    let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dist = if case % 3 == 2 { rng.gen_range(0.0..50.0) } else { rng.gen_range(0.0..1.0) };
    let f = (0..d).map(|j| means[0][j] + dist * dir[j] / len).collect();
    (GmmParams { weights, means, sigmas }, f)
}

