//! Independent 64-bit reference implementations and a finite-difference
//! gradient checker.
//!
//! Everything here is deliberately naive — triple loops, sliding windows,
//! textbook formulas — and shares no code with the production kernels. The
//! test suites (unit and acceptance) compare the engine against these.

/// Triple-loop matrix product in f64.
pub fn matmul_ref(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Sliding-window cross-correlation with bias in f64.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    input: &[f32],
    kernel: &[f32],
    bias: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut out = vec![0.0f64; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for r in 0..oh {
                for s in 0..ow {
                    let mut acc = bias[fi] as f64;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let x = input[((ni * c + ci) * h + r + i) * w + s + j] as f64;
                                let kv = kernel[((fi * c + ci) * kh + i) * kw + j] as f64;
                                acc += x * kv;
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + r) * ow + s] = acc;
                }
            }
        }
    }
    out
}

/// Mean softmax cross-entropy in f64, no stabilization tricks needed at
/// oracle precision for moderate logits.
pub fn softmax_ce_ref(logits: &[f32], labels: &[usize], n: usize, classes: usize) -> f64 {
    let mut total = 0.0f64;
    for i in 0..n {
        let row: Vec<f64> = logits[i * classes..(i + 1) * classes]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        total += z.ln() - (row[labels[i]] - mx);
    }
    total / n as f64
}

/// −⟨|a|,|b|⟩ / (‖a‖·‖b‖) in f64.
pub fn neg_abs_cosine_ref(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += (x as f64).abs() * (y as f64).abs();
        na += (x as f64) * (x as f64);
        nb += (y as f64) * (y as f64);
    }
    -dot / (na.sqrt() * nb.sqrt())
}

/// Central-difference gradient check on selected coordinates.
///
/// `f` evaluates the scalar objective at a parameter vector; `analytic` is
/// the gradient under test. Returns the worst relative error, where the
/// error at each coordinate is |analytic − fd| / max(1, |fd|).
pub fn finite_diff_max_err(
    f: &mut dyn FnMut(&[f32]) -> f32,
    x: &[f32],
    analytic: &[f32],
    coords: &[usize],
    eps: f32,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for &c in coords {
        let orig = xp[c];
        xp[c] = orig + eps;
        let up = f(&xp) as f64;
        xp[c] = orig - eps;
        let down = f(&xp) as f64;
        xp[c] = orig;
        let fd = (up - down) / (2.0 * eps as f64);
        let err = (analytic[c] as f64 - fd).abs() / fd.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Medians in f64, averaging the middle pair for even lengths.
pub fn median_ref(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
