//! Raw numeric kernels shared by the autodiff graph and plain inference.
//!
//! Every kernel reduces in a fixed left-to-right order so that repeated runs
//! on identical inputs are bitwise identical.

/// C\[m×n\] = A\[m×k\] · B\[k×n\], row-major.
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// C\[m×n\] = A\[m×k\] · Bᵀ where B is n×k row-major.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// C\[m×n\] = Aᵀ · B where A is k×m and B is k×n, row-major.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
}

/// Valid cross-correlation with stride 1 plus per-filter bias.
///
/// input: N×C×H×W, kernel: F×C×kh×kw, bias: F, out: N×F×OH×OW.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd(
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
    out: &mut [f32],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    debug_assert_eq!(out.len(), n * f * oh * ow);
    for ni in 0..n {
        let in_img = &input[ni * c * h * w..(ni + 1) * c * h * w];
        for fi in 0..f {
            let out_map = &mut out[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            out_map.fill(bias[fi]);
            for ci in 0..c {
                let in_ch = &in_img[ci * h * w..(ci + 1) * h * w];
                let k_ch = &kernel[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                for i in 0..kh {
                    for j in 0..kw {
                        let wgt = k_ch[i * kw + j];
                        for r in 0..oh {
                            let in_row = &in_ch[(r + i) * w + j..(r + i) * w + j + ow];
                            let out_row = &mut out_map[r * ow..(r + 1) * ow];
                            for (o, &x) in out_row.iter_mut().zip(in_row) {
                                *o += wgt * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_fwd`] with respect to input (optional), kernel, bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    input: &[f32],
    kernel: &[f32],
    gout: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    need_dinput: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut dkernel = vec![0.0f32; f * c * kh * kw];
    let mut dbias = vec![0.0f32; f];
    let mut dinput = if need_dinput {
        Some(vec![0.0f32; n * c * h * w])
    } else {
        None
    };
    for ni in 0..n {
        let in_img = &input[ni * c * h * w..(ni + 1) * c * h * w];
        for fi in 0..f {
            let g_map = &gout[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            let mut acc = 0.0f32;
            for &g in g_map {
                acc += g;
            }
            dbias[fi] += acc;
            for ci in 0..c {
                let in_ch = &in_img[ci * h * w..(ci + 1) * h * w];
                let k_ch = &kernel[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                let dk_ch = &mut dkernel[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                for i in 0..kh {
                    for j in 0..kw {
                        let mut acc = 0.0f32;
                        for r in 0..oh {
                            let in_row = &in_ch[(r + i) * w + j..(r + i) * w + j + ow];
                            let g_row = &g_map[r * ow..(r + 1) * ow];
                            for (&g, &x) in g_row.iter().zip(in_row) {
                                acc += g * x;
                            }
                        }
                        dk_ch[i * kw + j] += acc;
                        if let Some(di) = dinput.as_deref_mut() {
                            let wgt = k_ch[i * kw + j];
                            let di_ch = &mut di[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            for r in 0..oh {
                                let di_row = &mut di_ch[(r + i) * w + j..(r + i) * w + j + ow];
                                let g_row = &g_map[r * ow..(r + 1) * ow];
                                for (d, &g) in di_row.iter_mut().zip(g_row) {
                                    *d += wgt * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dinput, dkernel, dbias)
}

/// 2×2 max pooling with stride 2 and floor semantics for odd extents.
///
/// Returns pooled values and the flat input index of each selected maximum;
/// ties picked in scan order (top-left first) so replay is deterministic.
pub(crate) fn maxpool2x2_fwd(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for img in 0..n * c {
        let base = img * h * w;
        let obase = img * oh * ow;
        for r in 0..oh {
            for s in 0..ow {
                let mut best_idx = base + (2 * r) * w + 2 * s;
                let mut best = x[best_idx];
                for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + (2 * r + di) * w + 2 * s + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out[obase + r * ow + s] = best;
                argmax[obase + r * ow + s] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

/// Mean softmax cross-entropy over a batch, stabilized by max subtraction.
///
/// Returns the scalar loss and the softmax probabilities (kept for backward).
pub(crate) fn softmax_ce_fwd(
    logits: &[f32],
    labels: &[usize],
    n: usize,
    classes: usize,
) -> (f32, Vec<f32>) {
    debug_assert_eq!(logits.len(), n * classes);
    debug_assert_eq!(labels.len(), n);
    let mut probs = vec![0.0f32; n * classes];
    let mut loss = 0.0f32;
    for i in 0..n {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let prow = &mut probs[i * classes..(i + 1) * classes];
        let mut z = 0.0f32;
        for (p, &v) in prow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *p = e;
            z += e;
        }
        let inv = 1.0 / z;
        for p in prow.iter_mut() {
            *p *= inv;
        }
        loss += z.ln() - (row[labels[i]] - mx);
    }
    (loss / n as f32, probs)
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
