//! Layer primitives with explicit forward and backward passes.
//!
//! Image activations use a channel-major batched layout `(C, N, H, W)` so that
//! a convolution over a whole sequence of frames is a single matrix product.
//! Every down/up-sampling layer is a 4x4 kernel with stride 2 and padding 1,
//! which halves or doubles the spatial size exactly.

use rand::Rng;

use crate::scalar::{gemm, Scalar};

pub(crate) const KERNEL: usize = 4;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::ZERO; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Uniform in `[-bound, bound]`.
    pub(crate) fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = S::from_f64(rng.random_range(-bound..=bound));
        }
        t
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect() }
    }

    pub(crate) fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// LeCun-style fan-in scaling: variance `1 / fan_in`.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[inline]
pub(crate) fn elu<S: Scalar>(x: S) -> S {
    if x > S::ZERO { x } else { x.exp() - S::ONE }
}

/// Derivative of ELU expressed through its output.
#[inline]
pub(crate) fn elu_grad_from_output<S: Scalar>(y: S) -> S {
    if y > S::ZERO { S::ONE } else { y + S::ONE }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

pub(crate) fn elu_inplace<S: Scalar>(v: &mut [S]) {
    v.iter_mut().for_each(|x| *x = elu(*x));
}

/// `dy *= elu'(y)` elementwise.
pub(crate) fn elu_backward_inplace<S: Scalar>(y: &[S], dy: &mut [S]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        *g *= elu_grad_from_output(o);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    /// `out x in`, row-major.
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub(crate) fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::uniform(&[output, input], fan_in_bound(input), rng),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape[0]
    }

    /// `y = x W^T + b` for `n` stacked rows.
    pub(crate) fn forward(&self, x: &[S], n: usize) -> Vec<S> {
        let (o, i) = (self.output_dim(), self.input_dim());
        let mut y = vec![S::ZERO; n * o];
        for row in y.chunks_exact_mut(o) {
            row.copy_from_slice(&self.b.data);
        }
        gemm(n, i, o, x, false, &self.w.data, true, &mut y, true);
        y
    }

    /// Accumulates parameter gradients and returns `dx` when requested.
    pub(crate) fn backward(&self, x: &[S], dy: &[S], n: usize, grad: &mut Dense<S>, want_dx: bool) -> Option<Vec<S>> {
        let (o, i) = (self.output_dim(), self.input_dim());
        gemm(o, n, i, dy, true, x, false, &mut grad.w.data, true);
        for row in dy.chunks_exact(o) {
            for (gb, &d) in grad.b.data.iter_mut().zip(row) {
                *gb += d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![S::ZERO; n * i];
            gemm(n, o, i, dy, false, &self.w.data, false, &mut dx, false);
            dx
        })
    }
}

/// Unfolds `(c, n, h, w)` into `(c*16) x (n*h/2*w/2)` patches.
pub(crate) fn im2col<S: Scalar>(x: &[S], c: usize, n: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (h / 2, w / 2);
    let cols_n = n * ho * wo;
    let mut cols = vec![S::ZERO; c * TAPS * cols_n];
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ch * TAPS) + ky * KERNEL + kx) * cols_n..][..cols_n];
                for b in 0..n {
                    let plane = &x[(ch * n + b) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[(b * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patches back, summing overlaps.
pub(crate) fn col2im<S: Scalar>(cols: &[S], c: usize, n: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (h / 2, w / 2);
    let cols_n = n * ho * wo;
    let mut x = vec![S::ZERO; c * n * h * w];
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ch * TAPS) + ky * KERNEL + kx) * cols_n..][..cols_n];
                for b in 0..n {
                    let plane = &mut x[(ch * n + b) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[(b * ho + oy) * wo..][..wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Strided downsampling convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<S> {
    /// `c_out x (c_in*16)`.
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Conv<S> {
    pub(crate) fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::uniform(&[c_out, c_in * TAPS], fan_in_bound(c_in * TAPS), rng),
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.shape[1] / TAPS
    }

    pub fn c_out(&self) -> usize {
        self.w.shape[0]
    }

    /// Returns `(cols, y)`; `y` is `(c_out, n, h/2, w/2)` before activation.
    pub(crate) fn forward(&self, x: &[S], n: usize, h: usize, w: usize) -> (Vec<S>, Vec<S>) {
        let cols = im2col(x, self.c_in(), n, h, w);
        let m = n * (h / 2) * (w / 2);
        let mut y = vec![S::ZERO; self.c_out() * m];
        for (row, &b) in y.chunks_exact_mut(m).zip(&self.b.data) {
            row.iter_mut().for_each(|v| *v = b);
        }
        gemm(self.c_out(), self.c_in() * TAPS, m, &self.w.data, false, &cols, false, &mut y, true);
        (cols, y)
    }

    pub(crate) fn backward(
        &self, cols: &[S], dy: &[S], n: usize, h: usize, w: usize,
        grad: &mut Conv<S>, want_dx: bool,
    ) -> Option<Vec<S>> {
        let m = n * (h / 2) * (w / 2);
        let k = self.c_in() * TAPS;
        gemm(self.c_out(), m, k, dy, false, cols, true, &mut grad.w.data, true);
        for (gb, row) in grad.b.data.iter_mut().zip(dy.chunks_exact(m)) {
            *gb += row.iter().copied().sum::<S>();
        }
        want_dx.then(|| {
            let mut dcols = vec![S::ZERO; k * m];
            gemm(k, self.c_out(), m, &self.w.data, true, dy, false, &mut dcols, false);
            col2im(&dcols, self.c_in(), n, h, w)
        })
    }
}

/// Transposed (upsampling) convolution without bias: `(c_in, n, h, w)` to
/// `(c_out, n, 2h, 2w)`. `weight` is `c_in x (c_out*16)`.
pub(crate) fn conv_transpose<S: Scalar>(weight: &Tensor<S>, x: &[S], n: usize, h: usize, w: usize) -> Vec<S> {
    let c_in = weight.shape[0];
    let k = weight.shape[1];
    let m = n * h * w;
    let mut cols = vec![S::ZERO; k * m];
    gemm(k, c_in, m, &weight.data, true, x, false, &mut cols, false);
    col2im(&cols, k / TAPS, n, 2 * h, 2 * w)
}

/// Backward of [`conv_transpose`]; `dy` is `(c_out, n, 2h, 2w)`.
pub(crate) fn conv_transpose_backward<S: Scalar>(
    weight: &Tensor<S>, x: &[S], dy: &[S], n: usize, h: usize, w: usize,
    grad: &mut Tensor<S>, want_dx: bool,
) -> Option<Vec<S>> {
    let c_in = weight.shape[0];
    let k = weight.shape[1];
    let m = n * h * w;
    let dcols = im2col(dy, k / TAPS, n, 2 * h, 2 * w);
    gemm(c_in, m, k, x, false, &dcols, true, &mut grad.data, true);
    want_dx.then(|| {
        let mut dx = vec![S::ZERO; c_in * m];
        gemm(c_in, k, m, &weight.data, false, &dcols, false, &mut dx, false);
        dx
    })
}

/// Single-layer LSTM with gate order `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<S> {
    pub w_ih: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![S::ZERO; hidden], c: vec![S::ZERO; hidden] }
    }
}

/// Everything the backward pass needs from one forward sweep.
#[derive(Clone, Debug)]
pub(crate) struct LstmTrace<S> {
    pub t: usize,
    pub x: Vec<S>,
    /// Activated gates, `t x 4R`.
    pub gates: Vec<S>,
    /// Hidden states `h_0..h_t`, `(t+1) x R`.
    pub h: Vec<S>,
    /// Cell states `c_0..c_t`, `(t+1) x R`.
    pub c: Vec<S>,
    pub tanh_c: Vec<S>,
}

impl<S> LstmTrace<S> {
    /// Hidden outputs `h_1..h_t` as a `t x R` block.
    pub fn outputs(&self, hidden: usize) -> &[S] {
        &self.h[hidden..]
    }
}

impl<S: Scalar> Lstm<S> {
    pub(crate) fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = S::ONE);
        Self {
            w_ih: Tensor::uniform(&[4 * hidden, input], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape[1]
    }

    pub(crate) fn forward_seq(&self, xs: &[S], t: usize, init: &LstmState<S>) -> LstmTrace<S> {
        let (r, i) = (self.hidden_dim(), self.input_dim());
        let g4 = 4 * r;
        let mut pre = vec![S::ZERO; t * g4];
        for row in pre.chunks_exact_mut(g4) {
            row.copy_from_slice(&self.b.data);
        }
        gemm(t, i, g4, xs, false, &self.w_ih.data, true, &mut pre, true);

        let mut h = vec![S::ZERO; (t + 1) * r];
        let mut c = vec![S::ZERO; (t + 1) * r];
        h[..r].copy_from_slice(&init.h);
        c[..r].copy_from_slice(&init.c);
        let mut tanh_c = vec![S::ZERO; t * r];
        for step in 0..t {
            let gates = &mut pre[step * g4..][..g4];
            gemm(g4, r, 1, &self.w_hh.data, false, &h[step * r..][..r], false, gates, true);
            for j in 0..r {
                gates[j] = crate::nn::sigmoid(gates[j]);
                gates[r + j] = crate::nn::sigmoid(gates[r + j]);
                gates[2 * r + j] = gates[2 * r + j].tanh();
                gates[3 * r + j] = crate::nn::sigmoid(gates[3 * r + j]);
                let c_new = gates[r + j] * c[step * r + j] + gates[j] * gates[2 * r + j];
                let tc = c_new.tanh();
                c[(step + 1) * r + j] = c_new;
                tanh_c[step * r + j] = tc;
                h[(step + 1) * r + j] = gates[3 * r + j] * tc;
            }
        }
        LstmTrace { t, x: xs.to_vec(), gates: pre, h, c, tanh_c }
    }

    /// Backpropagates `dh` (gradient w.r.t. each output `h_1..h_t`) through time.
    /// Returns `(dx, d_initial_state)`.
    pub(crate) fn backward_seq(
        &self, trace: &LstmTrace<S>, dh_out: &[S], grad: &mut Lstm<S>,
    ) -> (Vec<S>, LstmState<S>) {
        let (r, i, t) = (self.hidden_dim(), self.input_dim(), trace.t);
        let g4 = 4 * r;
        let mut dgates = vec![S::ZERO; t * g4];
        let mut dh_next = vec![S::ZERO; r];
        let mut dc_next = vec![S::ZERO; r];
        for step in (0..t).rev() {
            let gates = &trace.gates[step * g4..][..g4];
            let c_prev = &trace.c[step * r..][..r];
            let tc = &trace.tanh_c[step * r..][..r];
            let dg = &mut dgates[step * g4..][..g4];
            for j in 0..r {
                let dh = dh_out[step * r + j] + dh_next[j];
                let (ig, fg, gg, og) = (gates[j], gates[r + j], gates[2 * r + j], gates[3 * r + j]);
                let dc = dc_next[j] + dh * og * (S::ONE - tc[j] * tc[j]);
                dg[j] = dc * gg * ig * (S::ONE - ig);
                dg[r + j] = dc * c_prev[j] * fg * (S::ONE - fg);
                dg[2 * r + j] = dc * ig * (S::ONE - gg * gg);
                dg[3 * r + j] = dh * tc[j] * og * (S::ONE - og);
                dc_next[j] = dc * fg;
            }
            gemm(r, g4, 1, &self.w_hh.data, true, dg, false, &mut dh_next, false);
        }
        gemm(g4, t, i, &dgates, true, &trace.x, false, &mut grad.w_ih.data, true);
        gemm(g4, t, r, &dgates, true, &trace.h[..t * r], false, &mut grad.w_hh.data, true);
        for row in dgates.chunks_exact(g4) {
            for (gb, &d) in grad.b.data.iter_mut().zip(row) {
                *gb += d;
            }
        }
        let mut dx = vec![S::ZERO; t * i];
        gemm(t, g4, i, &dgates, false, &self.w_ih.data, false, &mut dx, false);
        (dx, LstmState { h: dh_next, c: dc_next })
    }
}
