//! Independent f64 oracles for gradient checking, plus the reusable
//! per-op check cases shared by the gradient tests and the acceptance
//! suite.
//!
//! Everything here re-implements the forward math from scratch in f64 —
//! deliberately sharing no code with the library — so central finite
//! differences computed through these functions are an independent check on
//! the library's analytic f32 gradients.

// Each integration-test binary compiles its own copy and uses a subset.
#![allow(dead_code)]

use jstr_core::tensor::{Graph, TensorId};

pub const FD_H: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

/// Central finite differences of a scalar-valued f64 function.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// Relative-error comparison with a floor so exact zeros compare cleanly.
pub fn assert_grads_close(analytic: &[f32], fd: &[f64], context: &str) {
    assert_eq!(analytic.len(), fd.len(), "{context}: length");
    for (i, (&a, &d)) in analytic.iter().zip(fd).enumerate() {
        let denom = (a as f64).abs().max(d.abs()).max(1e-3);
        let rel = ((a as f64) - d).abs() / denom;
        assert!(
            rel <= FD_REL_TOL,
            "{context}: grad[{i}] analytic {a} vs fd {d} (rel {rel:.2e})"
        );
    }
}

// ── f64 forward re-implementations ─────────────────────────────────────

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn softmax_row64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax64(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        out.extend(softmax_row64(&x[r * cols..(r + 1) * cols]));
    }
    out
}

pub fn layer_norm64(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

pub fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn cross_entropy_masked64(logits: &[f64], targets: &[usize], mask: &[bool], v: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[tgt];
        n += 1;
    }
    total / n as f64
}

/// One causal attention head in f64: q, k, v are `[t, d]`, the head reads
/// columns `offset..offset+hd`, output is `[t, hd]`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attn_head64(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    offset: usize,
    hd: usize,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; t * hd];
    for i in 0..t {
        let mut scores = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let mut s = 0.0;
            for c in 0..hd {
                s += q[i * d + offset + c] * k[j * d + offset + c];
            }
            scores.push(s * scale);
        }
        let w = softmax_row64(&scores);
        for (j, &wj) in w.iter().enumerate() {
            for c in 0..hd {
                out[i * hd + c] += wj * v[j * d + offset + c];
            }
        }
    }
    out
}

/// Fixed pseudo-random weights so test losses depend on every output
/// element (a plain sum would zero out softmax gradients).
pub fn loss_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .collect()
}

pub fn weighted_sum64(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Deterministic test-input generator (local to the oracle suite).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed)
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 33) as f64 / (1u64 << 31) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n
    }
}

// ── reusable per-op gradient check cases ───────────────────────────────

/// loss = Σ_r dot(x_r, w_r), built from graph ops.
pub fn rowdot_loss(g: &mut Graph, x: TensorId, w: &[f64], rows: usize, cols: usize) -> TensorId {
    let wt = g.leaf_owned(vec![rows, cols], to_f32(w), false);
    let mut pieces = Vec::new();
    for r in 0..rows {
        let x_row = g.slice_rows(x, r, 1).unwrap();
        let w_row = g.slice_rows(wt, r, 1).unwrap();
        pieces.push(g.matmul_nt(x_row, w_row).unwrap());
    }
    let stacked = g.concat_rows(&pieces).unwrap();
    g.sum_all(stacked)
}

pub fn check_matmul(case: u64, m: usize, k: usize, n: usize) {
    let mut rng = TestRng::new(100 + case);
    let a = rng.vec(m * k, -1.5, 1.5);
    let b = rng.vec(k * n, -1.5, 1.5);
    let w = loss_weights(m * n, 7 + case);

    let mut g = Graph::new();
    let at = g.leaf_owned(vec![m, k], to_f32(&a), true);
    let bt = g.leaf_owned(vec![k, n], to_f32(&b), true);
    let c = g.matmul(at, bt).unwrap();
    let loss = rowdot_loss(&mut g, c, &w, m, n);
    g.backward(loss).unwrap();

    let fd_a = central_diff(&|xs: &[f64]| weighted_sum64(&matmul64(xs, &b, m, k, n), &w), &a, FD_H);
    let fd_b = central_diff(&|xs: &[f64]| weighted_sum64(&matmul64(&a, xs, m, k, n), &w), &b, FD_H);
    assert_grads_close(g.grad(at).unwrap(), &fd_a, &format!("matmul dA case {case}"));
    assert_grads_close(g.grad(bt).unwrap(), &fd_b, &format!("matmul dB case {case}"));
}

pub fn check_matmul_nt(case: u64, m: usize, k: usize, n: usize) {
    let mut rng = TestRng::new(200 + case);
    let a = rng.vec(m * k, -1.0, 1.0);
    let b = rng.vec(n * k, -1.0, 1.0);
    let w = loss_weights(m * n, 17 + case);

    let mut g = Graph::new();
    let at = g.leaf_owned(vec![m, k], to_f32(&a), true);
    let bt = g.leaf_owned(vec![n, k], to_f32(&b), true);
    let c = g.matmul_nt(at, bt).unwrap();
    let loss = rowdot_loss(&mut g, c, &w, m, n);
    g.backward(loss).unwrap();

    let c64 = |a_: &[f64], b_: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a_[i * k + p] * b_[j * k + p]).sum();
            }
        }
        out
    };
    let fd_a = central_diff(&|xs: &[f64]| weighted_sum64(&c64(xs, &b), &w), &a, FD_H);
    let fd_b = central_diff(&|xs: &[f64]| weighted_sum64(&c64(&a, xs), &w), &b, FD_H);
    assert_grads_close(g.grad(at).unwrap(), &fd_a, &format!("matmul_nt dA case {case}"));
    assert_grads_close(g.grad(bt).unwrap(), &fd_b, &format!("matmul_nt dB case {case}"));
}

pub fn check_softmax(case: u64, rows: usize, cols: usize) {
    let mut rng = TestRng::new(300 + case);
    let x = rng.vec(rows * cols, -3.0, 3.0);
    let w = loss_weights(rows * cols, 29 + case);

    let mut g = Graph::new();
    let xt = g.leaf_owned(vec![rows, cols], to_f32(&x), true);
    let s = g.softmax_lastdim(xt).unwrap();
    let loss = rowdot_loss(&mut g, s, &w, rows, cols);
    g.backward(loss).unwrap();

    for row in g.data(s).chunks_exact(cols) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
    }

    let fd = central_diff(&|xs: &[f64]| weighted_sum64(&softmax64(xs, rows, cols), &w), &x, FD_H);
    assert_grads_close(g.grad(xt).unwrap(), &fd, &format!("softmax case {case}"));
}

pub fn check_layer_norm(case: u64, rows: usize, d: usize) {
    let mut rng = TestRng::new(400 + case);
    let x = rng.vec(rows * d, -2.0, 2.0);
    let gamma = rng.vec(d, 0.5, 1.5);
    let beta = rng.vec(d, -0.5, 0.5);
    let w = loss_weights(rows * d, 31 + case);
    let eps = 1e-5f64;

    let mut g = Graph::new();
    let xt = g.leaf_owned(vec![rows, d], to_f32(&x), true);
    let gt = g.leaf_owned(vec![d], to_f32(&gamma), true);
    let bt = g.leaf_owned(vec![d], to_f32(&beta), true);
    let out = g.layer_norm(xt, gt, bt, eps as f32).unwrap();
    let loss = rowdot_loss(&mut g, out, &w, rows, d);
    g.backward(loss).unwrap();

    let f = |xs: &[f64], gs: &[f64], bs: &[f64]| {
        weighted_sum64(&layer_norm64(xs, gs, bs, eps, rows, d), &w)
    };
    let fd_x = central_diff(&|xs: &[f64]| f(xs, &gamma, &beta), &x, FD_H);
    let fd_g = central_diff(&|gs: &[f64]| f(&x, gs, &beta), &gamma, FD_H);
    let fd_b = central_diff(&|bs: &[f64]| f(&x, &gamma, bs), &beta, FD_H);
    assert_grads_close(g.grad(xt).unwrap(), &fd_x, &format!("layer_norm dx case {case}"));
    assert_grads_close(g.grad(gt).unwrap(), &fd_g, &format!("layer_norm dgamma case {case}"));
    assert_grads_close(g.grad(bt).unwrap(), &fd_b, &format!("layer_norm dbeta case {case}"));
}

pub fn check_gelu(case: u64, n: usize) {
    let mut rng = TestRng::new(500 + case);
    let x = rng.vec(n, -4.0, 4.0);
    let w = loss_weights(n, 37 + case);

    let mut g = Graph::new();
    let xt = g.leaf_owned(vec![1, n], to_f32(&x), true);
    let y = g.gelu(xt);
    let loss = rowdot_loss(&mut g, y, &w, 1, n);
    g.backward(loss).unwrap();

    let fd = central_diff(
        &|xs: &[f64]| weighted_sum64(&xs.iter().map(|&v| gelu64(v)).collect::<Vec<_>>(), &w),
        &x,
        FD_H,
    );
    assert_grads_close(g.grad(xt).unwrap(), &fd, &format!("gelu case {case}"));
}

pub fn check_cross_entropy(case: u64, t: usize, v: usize) {
    let mut rng = TestRng::new(600 + case);
    let logits = rng.vec(t * v, -2.0, 2.0);
    let targets: Vec<usize> = (0..t).map(|_| rng.below(v)).collect();
    let mask: Vec<bool> = (0..t).map(|r| r % 2 == 0 || r == t - 1).collect();

    let mut g = Graph::new();
    let lt = g.leaf_owned(vec![t, v], to_f32(&logits), true);
    let loss = g.cross_entropy_masked(lt, &targets, &mask).unwrap();
    g.backward(loss).unwrap();

    let fd = central_diff(&|xs: &[f64]| cross_entropy_masked64(xs, &targets, &mask, v), &logits, FD_H);
    assert_grads_close(g.grad(lt).unwrap(), &fd, &format!("cross_entropy case {case}"));

    let expect = cross_entropy_masked64(&logits, &targets, &mask, v);
    assert!((g.value(loss) as f64 - expect).abs() < 1e-5);
}

pub fn check_attn_head(case: u64, t: usize, d: usize, offset: usize, hd: usize) {
    let mut rng = TestRng::new(700 + case);
    let q = rng.vec(t * d, -1.0, 1.0);
    let k = rng.vec(t * d, -1.0, 1.0);
    let v = rng.vec(t * d, -1.0, 1.0);
    let w = loss_weights(t * hd, 41 + case);
    let scale = 1.0 / (hd as f64).sqrt();

    let mut g = Graph::new();
    let qt = g.leaf_owned(vec![t, d], to_f32(&q), true);
    let kt = g.leaf_owned(vec![t, d], to_f32(&k), true);
    let vt = g.leaf_owned(vec![t, d], to_f32(&v), true);
    let out = g.causal_attn_head(qt, kt, vt, offset, hd, scale as f32).unwrap();
    let loss = rowdot_loss(&mut g, out, &w, t, hd);
    g.backward(loss).unwrap();

    let f = |qs: &[f64], ks: &[f64], vs: &[f64]| {
        weighted_sum64(&causal_attn_head64(qs, ks, vs, t, d, offset, hd, scale), &w)
    };
    let fd_q = central_diff(&|xs: &[f64]| f(xs, &k, &v), &q, FD_H);
    let fd_k = central_diff(&|xs: &[f64]| f(&q, xs, &v), &k, FD_H);
    let fd_v = central_diff(&|xs: &[f64]| f(&q, &k, xs), &v, FD_H);
    assert_grads_close(g.grad(qt).unwrap(), &fd_q, &format!("attn dq case {case}"));
    assert_grads_close(g.grad(kt).unwrap(), &fd_k, &format!("attn dk case {case}"));
    assert_grads_close(g.grad(vt).unwrap(), &fd_v, &format!("attn dv case {case}"));
}

pub fn check_chain(seed: u64) {
    let (t, d0, d1, d2, v) = (4usize, 6usize, 5usize, 7usize, 9usize);
    let mut rng = TestRng::new(800 + seed);
    let x = rng.vec(t * d0, -1.0, 1.0);
    let w1 = rng.vec(d0 * d1, -0.7, 0.7);
    let w2 = rng.vec(d1 * d2, -0.7, 0.7);
    let w3 = rng.vec(d2 * v, -0.7, 0.7);
    let targets: Vec<usize> = (0..t).map(|_| rng.below(v)).collect();
    let mask = vec![true; t];

    let mut g = Graph::new();
    let xt = g.leaf_owned(vec![t, d0], to_f32(&x), false);
    let w1t = g.leaf_owned(vec![d0, d1], to_f32(&w1), true);
    let w2t = g.leaf_owned(vec![d1, d2], to_f32(&w2), true);
    let w3t = g.leaf_owned(vec![d2, v], to_f32(&w3), true);
    let h1 = g.matmul(xt, w1t).unwrap();
    let a1 = g.gelu(h1);
    let h2 = g.matmul(a1, w2t).unwrap();
    let a2 = g.gelu(h2);
    let logits = g.matmul(a2, w3t).unwrap();
    let loss = g.cross_entropy_masked(logits, &targets, &mask).unwrap();
    g.backward(loss).unwrap();

    let chain = |w1_: &[f64], w2_: &[f64], w3_: &[f64]| -> f64 {
        let h1 = matmul64(&x, w1_, t, d0, d1);
        let a1: Vec<f64> = h1.iter().map(|&z| gelu64(z)).collect();
        let h2 = matmul64(&a1, w2_, t, d1, d2);
        let a2: Vec<f64> = h2.iter().map(|&z| gelu64(z)).collect();
        let logits = matmul64(&a2, w3_, t, d2, v);
        cross_entropy_masked64(&logits, &targets, &mask, v)
    };
    let fd1 = central_diff(&|p: &[f64]| chain(p, &w2, &w3), &w1, FD_H);
    let fd2 = central_diff(&|p: &[f64]| chain(&w1, p, &w3), &w2, FD_H);
    let fd3 = central_diff(&|p: &[f64]| chain(&w1, &w2, p), &w3, FD_H);
    assert_grads_close(g.grad(w1t).unwrap(), &fd1, "chain dW1");
    assert_grads_close(g.grad(w2t).unwrap(), &fd2, "chain dW2");
    assert_grads_close(g.grad(w3t).unwrap(), &fd3, "chain dW3");
}

/// The full randomized gradient suite; returns the number of cases run.
pub fn run_gradient_suite() -> usize {
    let mut cases = 0;
    for (i, &(m, k, n)) in
        [(4usize, 3usize, 2usize), (2, 5, 4), (1, 7, 3), (6, 2, 6), (3, 8, 1), (5, 5, 5)]
            .iter()
            .enumerate()
    {
        check_matmul(i as u64, m, k, n);
        cases += 1;
    }
    for (i, &(m, k, n)) in [(3usize, 4usize, 2usize), (2, 8, 5), (5, 3, 5)].iter().enumerate() {
        check_matmul_nt(i as u64, m, k, n);
        cases += 1;
    }
    for (i, &(rows, cols)) in [(2usize, 5usize), (1, 9), (4, 3), (3, 7)].iter().enumerate() {
        check_softmax(i as u64, rows, cols);
        cases += 1;
    }
    for (i, &(rows, d)) in [(3usize, 8usize), (1, 16), (5, 4), (2, 12)].iter().enumerate() {
        check_layer_norm(i as u64, rows, d);
        cases += 1;
    }
    for (i, &n) in [12usize, 30, 7].iter().enumerate() {
        check_gelu(i as u64, n);
        cases += 1;
    }
    for (i, &(t, v)) in [(5usize, 41usize), (3, 11), (7, 41)].iter().enumerate() {
        check_cross_entropy(i as u64, t, v);
        cases += 1;
    }
    for (i, &(t, d, off, hd)) in
        [(4usize, 8usize, 0usize, 4usize), (6, 8, 4, 4), (3, 16, 8, 8)].iter().enumerate()
    {
        check_attn_head(i as u64, t, d, off, hd);
        cases += 1;
    }
    check_chain(0);
    cases += 1;
    cases
}
