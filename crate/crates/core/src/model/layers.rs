//! Building blocks shared by all three architectures, each with its backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure_len, invalid, Result};
use crate::linalg::{axpy, dot, matmul, matmul_nt, matmul_tn, Matrix};
use crate::router::ExpertBank;

use super::config::{LAYER_NORM_EPS, ROPE_BASE};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub(crate) fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let (t, d) = x.shape();
        let mut y = Matrix::zeros(t, d);
        let mut xhat = Matrix::zeros(t, d);
        let mut rstd = Vec::with_capacity(t);
        for r in 0..t {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd.push(s);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            let out = y.row_mut(r);
            for c in 0..d {
                out[c] = self.gamma[c] * xh[c] + self.beta[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    /// Returns `dx`, accumulating parameter gradients into `grad`.
    pub(crate) fn backward(&self, dy: &Matrix, cache: &LnCache, grad: &mut LayerNorm) -> Matrix {
        let (t, d) = dy.shape();
        let mut dx = Matrix::zeros(t, d);
        let mut dxhat = vec![0.0; d];
        for r in 0..t {
            let g = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                grad.gamma[c] += g[c] * xh[c];
                grad.beta[c] += g[c];
                dxhat[c] = g[c] * self.gamma[c];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
            let s = cache.rstd[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = s * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// cos/sin of `pos · base^{-2j/head_dim}` for every position and pair `j`.
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(head_dim: usize, positions: impl Iterator<Item = usize>) -> Self {
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|j| libm::pow(ROPE_BASE, -2.0 * j as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::new();
        let mut sin = Vec::new();
        for pos in positions {
            for f in &freqs {
                let angle = pos as f64 * f;
                cos.push(libm::cos(angle));
                sin.push(libm::sin(angle));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head-sized slice at table row `row` (or un-rotates when `inverse`).
    #[inline]
    pub(crate) fn rotate(&self, x: &mut [f64], row: usize, inverse: bool) {
        let base = row * self.half;
        for j in 0..self.half {
            let (c, s) = (self.cos[base + j], self.sin[base + j]);
            let s = if inverse { -s } else { s };
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = a * c - b * s;
            x[2 * j + 1] = a * s + b * c;
        }
    }
}

/// Rotary position embedding of `x`, one `head_dim`-wide row per position.
pub fn rope_apply(x: &[f64], head_dim: usize, positions: &[usize]) -> Result<Vec<f64>> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "rotary embedding needs an even head dimension, got {head_dim}"
        )));
    }
    ensure_len("rope input", positions.len() * head_dim, x.len())?;
    let table = RopeTable::new(head_dim, positions.iter().copied());
    let mut out = x.to_vec();
    for (r, chunk) in out.chunks_mut(head_dim).enumerate() {
        table.rotate(chunk, r, false);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

pub(crate) struct AttnCache {
    xn: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per (lane, head): L×L causal probabilities.
    probs: Vec<f64>,
    context: Matrix,
}

impl Attention {
    pub(crate) fn zeros(dim: usize) -> Self {
        Self {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
        }
    }

    fn project(x: &Matrix, w: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.cols());
        matmul(
            x.as_slice(),
            w.as_slice(),
            out.as_mut_slice(),
            x.rows(),
            x.cols(),
            w.cols(),
        );
        out
    }

    /// Causal multi-head attention over `lanes` independent sequences of
    /// `seq_len` rows each.
    pub(crate) fn forward(
        &self,
        xn: Matrix,
        lanes: usize,
        seq_len: usize,
        n_heads: usize,
        rope: &RopeTable,
    ) -> (Matrix, AttnCache) {
        let d = xn.cols();
        let hd = d / n_heads;
        let mut q = Self::project(&xn, &self.wq);
        let mut k = Self::project(&xn, &self.wk);
        let v = Self::project(&xn, &self.wv);
        for t in 0..xn.rows() {
            let pos = t % seq_len;
            for h in 0..n_heads {
                rope.rotate(&mut q.row_mut(t)[h * hd..(h + 1) * hd], pos, false);
                rope.rotate(&mut k.row_mut(t)[h * hd..(h + 1) * hd], pos, false);
            }
        }
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut probs = vec![0.0; lanes * n_heads * seq_len * seq_len];
        let mut context = Matrix::zeros(xn.rows(), d);
        let mut row_scores = vec![0.0; seq_len];
        for b in 0..lanes {
            for h in 0..n_heads {
                let cols = h * hd..(h + 1) * hd;
                let p_base = (b * n_heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &q.row(b * seq_len + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = scale * dot(qi, &k.row(b * seq_len + j)[cols.clone()]);
                        row_scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for s in row_scores.iter_mut().take(i + 1) {
                        *s = libm::exp(*s - max);
                        sum += *s;
                    }
                    let p_row = &mut probs[p_base + i * seq_len..p_base + (i + 1) * seq_len];
                    for j in 0..=i {
                        p_row[j] = row_scores[j] / sum;
                    }
                    let out = &mut context.row_mut(b * seq_len + i)[cols.clone()];
                    for j in 0..=i {
                        axpy(p_row[j], &v.row(b * seq_len + j)[cols.clone()], out);
                    }
                }
            }
        }
        let out = Self::project(&context, &self.wo);
        (
            out,
            AttnCache {
                xn,
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    /// Returns `d xn`, accumulating weight gradients into `grad`.
    pub(crate) fn backward(
        &self,
        dout: &Matrix,
        cache: &AttnCache,
        lanes: usize,
        seq_len: usize,
        n_heads: usize,
        rope: &RopeTable,
        grad: &mut Attention,
    ) -> Matrix {
        let (t_total, d) = dout.shape();
        let hd = d / n_heads;
        let scale = 1.0 / libm::sqrt(hd as f64);

        matmul_tn(
            cache.context.as_slice(),
            dout.as_slice(),
            grad.wo.as_mut_slice(),
            t_total,
            d,
            d,
        );
        let mut dcontext = Matrix::zeros(t_total, d);
        matmul_nt(
            dout.as_slice(),
            self.wo.as_slice(),
            dcontext.as_mut_slice(),
            t_total,
            d,
            d,
        );

        let mut dq = Matrix::zeros(t_total, d);
        let mut dk = Matrix::zeros(t_total, d);
        let mut dv = Matrix::zeros(t_total, d);
        let mut dp = vec![0.0; seq_len];
        for b in 0..lanes {
            for h in 0..n_heads {
                let cols = h * hd..(h + 1) * hd;
                let p_base = (b * n_heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let ti = b * seq_len + i;
                    let p_row = &cache.probs[p_base + i * seq_len..p_base + (i + 1) * seq_len];
                    let d_out = &dcontext.row(ti)[cols.clone()];
                    let mut inner = 0.0;
                    for j in 0..=i {
                        let tj = b * seq_len + j;
                        dp[j] = dot(d_out, &cache.v.row(tj)[cols.clone()]);
                        inner += p_row[j] * dp[j];
                        axpy(p_row[j], d_out, &mut dv.row_mut(tj)[cols.clone()]);
                    }
                    for j in 0..=i {
                        let tj = b * seq_len + j;
                        let ds = scale * p_row[j] * (dp[j] - inner);
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(
                            ds,
                            &cache.k.row(tj)[cols.clone()],
                            &mut dq.row_mut(ti)[cols.clone()],
                        );
                        axpy(
                            ds,
                            &cache.q.row(ti)[cols.clone()],
                            &mut dk.row_mut(tj)[cols.clone()],
                        );
                    }
                }
            }
        }
        for t in 0..t_total {
            let pos = t % seq_len;
            for h in 0..n_heads {
                rope.rotate(&mut dq.row_mut(t)[h * hd..(h + 1) * hd], pos, true);
                rope.rotate(&mut dk.row_mut(t)[h * hd..(h + 1) * hd], pos, true);
            }
        }

        let mut dxn = Matrix::zeros(t_total, d);
        for (dproj, w, gw) in [
            (&dq, &self.wq, &mut grad.wq),
            (&dk, &self.wk, &mut grad.wk),
            (&dv, &self.wv, &mut grad.wv),
        ] {
            matmul_tn(
                cache.xn.as_slice(),
                dproj.as_slice(),
                gw.as_mut_slice(),
                t_total,
                d,
                d,
            );
            matmul_nt(
                dproj.as_slice(),
                w.as_slice(),
                dxn.as_mut_slice(),
                t_total,
                d,
                d,
            );
        }
        dxn
    }
}

/// Two-layer GELU feed-forward network, `D → hidden → D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Activations of one expert over the rows routed to it.
pub(crate) struct FfnActs {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
    pub(crate) out: Matrix,
}

impl ExpertFfn {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w_in: Matrix::zeros(dim, hidden),
            b_in: vec![0.0; hidden],
            w_out: Matrix::zeros(hidden, dim),
            b_out: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    pub fn n_params(&self) -> usize {
        2 * self.dim() * self.hidden() + self.dim() + self.hidden()
    }

    /// `w_out · GELU(w_in · h + b_in) + b_out` for a single vector.
    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        ensure_len("expert input", self.dim(), h.len())?;
        let input = Matrix::from_vec(1, h.len(), h.to_vec())?;
        Ok(self.forward_rows(input).out.into_vec())
    }

    pub(crate) fn forward_rows(&self, input: Matrix) -> FfnActs {
        let (n, d) = input.shape();
        let f = self.hidden();
        let mut pre = Matrix::zeros(n, f);
        for r in 0..n {
            pre.row_mut(r).copy_from_slice(&self.b_in);
        }
        matmul(
            input.as_slice(),
            self.w_in.as_slice(),
            pre.as_mut_slice(),
            n,
            d,
            f,
        );
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&self.b_out);
        }
        matmul(
            hidden.as_slice(),
            self.w_out.as_slice(),
            out.as_mut_slice(),
            n,
            f,
            d,
        );
        FfnActs {
            input,
            pre,
            hidden,
            out,
        }
    }

    /// Returns `d input`, accumulating weight gradients into `grad`.
    pub(crate) fn backward_rows(
        &self,
        dout: &Matrix,
        acts: &FfnActs,
        grad: &mut ExpertFfn,
    ) -> Matrix {
        let (n, d) = dout.shape();
        let f = self.hidden();
        matmul_tn(
            acts.hidden.as_slice(),
            dout.as_slice(),
            grad.w_out.as_mut_slice(),
            n,
            f,
            d,
        );
        for r in 0..n {
            axpy(1.0, dout.row(r), &mut grad.b_out);
        }
        let mut dpre = Matrix::zeros(n, f);
        matmul_nt(
            dout.as_slice(),
            self.w_out.as_slice(),
            dpre.as_mut_slice(),
            n,
            d,
            f,
        );
        for (g, &x) in dpre.as_mut_slice().iter_mut().zip(acts.pre.as_slice()) {
            *g *= gelu_grad(x);
        }
        matmul_tn(
            acts.input.as_slice(),
            dpre.as_slice(),
            grad.w_in.as_mut_slice(),
            n,
            d,
            f,
        );
        for r in 0..n {
            axpy(1.0, dpre.row(r), &mut grad.b_in);
        }
        let mut dinput = Matrix::zeros(n, d);
        matmul_nt(
            dpre.as_slice(),
            self.w_in.as_slice(),
            dinput.as_mut_slice(),
            n,
            f,
            d,
        );
        dinput
    }
}

impl ExpertBank for [ExpertFfn] {
    fn n_experts(&self) -> usize {
        self.len()
    }

    fn dim(&self) -> usize {
        self.first().map_or(0, ExpertFfn::dim)
    }

    fn apply(&self, expert: usize, input: &[f64], output: &mut [f64]) {
        let y = self[expert]
            .forward(input)
            .expect("expert bank dimension checked by caller");
        output.copy_from_slice(&y);
    }
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1 / (1 - p)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect()
}
