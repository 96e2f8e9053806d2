#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rice_em::scheme::AcquisitionScheme;
use rice_em::synth::{self, GroundTruth};
use rice_em::tensor::{TensorOrder, TensorParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rotation from a uniformly random unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        q.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>();
        if n > 1e-3 && n <= 1.0 {
            q.iter_mut().for_each(|v| *v /= n.sqrt());
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `R diag(l) R'` with eigenvalues drawn from `[0.1, 2.0] x 1e-3`.
pub fn random_spd(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let r = random_rotation(rng);
    let l: Vec<f64> = (0..3).map(|_| rng.random_range(0.1e-3..2.0e-3)).collect();
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = (0..3).map(|k| r[i][k] * l[k] * r[j][k]).sum();
        }
    }
    d
}

pub fn random_tensor(rng: &mut ChaCha8Rng, order: TensorOrder) -> TensorParams {
    match order {
        TensorOrder::Two => TensorParams::from_matrix(&random_spd(rng)).unwrap(),
        TensorOrder::Four => {
            let a = random_spd(rng);
            let mut b = random_spd(rng);
            b.iter_mut().flatten().for_each(|v| *v /= 0.8e-3);
            TensorParams::quartic_product(&a, &b).unwrap()
        }
    }
}

/// Factorial scheme with `m` in `[lo, hi]`, built from a prefix of the
/// default knots (always including b = 0).
pub fn random_scheme(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> AcquisitionScheme {
    let all = synth::default_knots();
    loop {
        let dirs = rng.random_range(16..=32);
        let n_knots = rng.random_range(3..=all.len());
        let reps = rng.random_range(1..=3);
        let m = dirs * n_knots * reps;
        if (lo..=hi).contains(&m) {
            return synth::make_scheme(dirs, all[..n_knots].to_vec(), reps).unwrap();
        }
    }
}

/// Truth with `S0 = 250` and `sigma = S0 / snr`.
pub fn truth_with_snr(theta: TensorParams, snr: f64, seed: u64) -> GroundTruth {
    let s0 = 250.0;
    GroundTruth::new(theta, s0, (s0 / snr).powi(2), seed).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// `max_j |a_j - b_j| / max_j |b_j|`.
pub fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

// Bessel oracles, written from the textbook series independently of the
// library kernels.

/// `(log I0(x), I1(x) / I0(x))` by the ascending power series.
pub fn bessel_series(x: f64) -> (f64, f64) {
    let q = x * x / 4.0;
    let (mut t0, mut s0) = (1.0f64, 1.0f64);
    let (mut t1, mut s1) = (1.0f64, 1.0f64);
    for k in 1..400 {
        let k = k as f64;
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < 1e-18 * s0 && t1 < 1e-18 * s1 {
            break;
        }
    }
    (s0.ln(), x / 2.0 * s1 / s0)
}

/// `(log I0(x), I1(x) / I0(x))` from the Hankel expansion
/// `I_v(x) ~ e^x / sqrt(2 pi x) sum_k (-1)^k a_k(v) / x^k`, truncated at the
/// smallest term. Accurate to rounding for `x >= 25`.
pub fn bessel_asymptotic(x: f64) -> (f64, f64) {
    let sum = |nu: f64| {
        let mu = 4.0 * nu * nu;
        let (mut term, mut s) = (1.0f64, 1.0f64);
        for k in 1..200 {
            let kf = k as f64;
            let next = -term * (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
            if next.abs() >= term.abs() {
                break;
            }
            term = next;
            s += term;
            if term.abs() < 1e-18 * s.abs() {
                break;
            }
        }
        s
    };
    let (s0, s1) = (sum(0.0), sum(1.0));
    (x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + s0.ln(), s1 / s0)
}

/// `log I0(x)` by the trapezoid rule on `I0(x) e^-x = (1/pi) int_0^pi
/// exp(x (cos t - 1)) dt`, which converges geometrically for this periodic
/// integrand. Used as a third, structurally different check for moderate x.
pub fn log_i0_quadrature(x: f64) -> f64 {
    let n = 4000 + (40.0 * x.sqrt()) as usize;
    let h = std::f64::consts::PI / n as f64;
    let f = |t: f64| (x * (t.cos() - 1.0)).exp();
    let mut s = 0.5 * (f(0.0) + f(std::f64::consts::PI));
    for i in 1..n {
        s += f(i as f64 * h);
    }
    x + (s * h / std::f64::consts::PI).ln()
}

pub fn bessel_oracle(x: f64) -> (f64, f64) {
    if x <= 25.0 {
        bessel_series(x)
    } else {
        bessel_asymptotic(x)
    }
}
