//! Dense row-major `f64` arrays and the raw kernels the tape is built on.

use crate::error::{Error, Result};

/// An n-dimensional array of 64-bit reals in row-major order.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to match; for internal kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k]ᵀ · g[m,n]` giving `[k,n]`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g[m,n] · b[k,n]ᵀ` giving `[m,k]`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Geometry of a same-padded, stride-1 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Output columns `x` for which input column `x + dx` is in bounds.
    fn span(len: usize, offset: isize) -> (usize, usize) {
        let lo = (-offset).max(0) as usize;
        let hi = (len as isize - offset).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = h * w;
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let out_plane = &mut out[(n * g.out_ch + o) * plane..(n * g.out_ch + o + 1) * plane];
            out_plane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.in_ch {
                let in_plane = &input[(n * g.in_ch + c) * plane..(n * g.in_ch + c + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - g.pad();
                    let (y0, y1) = ConvGeom::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - g.pad();
                        let (x0, x1) = ConvGeom::span(w, dx);
                        let wv = weight[((o * g.in_ch + c) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let src_y = (y as isize + dy) as usize;
                            let src = &in_plane[src_y * w..(src_y + 1) * w];
                            let dst = &mut out_plane[y * w..(y + 1) * w];
                            let sx0 = (x0 as isize + dx) as usize;
                            for (d, s) in dst[x0..x1].iter_mut().zip(&src[sx0..]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`; `d_input` only when requested.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: ConvGeom,
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = h * w;
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; g.out_ch];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let g_plane = &grad_out[(n * g.out_ch + o) * plane..(n * g.out_ch + o + 1) * plane];
            d_b[o] += g_plane.iter().sum::<f64>();
            for c in 0..g.in_ch {
                let base = (n * g.in_ch + c) * plane;
                let in_plane = &input[base..base + plane];
                for ky in 0..k {
                    let dy = ky as isize - g.pad();
                    let (y0, y1) = ConvGeom::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - g.pad();
                        let (x0, x1) = ConvGeom::span(w, dx);
                        let widx = ((o * g.in_ch + c) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let sx0 = (x0 as isize + dx) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src_y = (y as isize + dy) as usize;
                            let gr = &g_plane[y * w + x0..y * w + x1];
                            let src = &in_plane[src_y * w + sx0..];
                            acc += gr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(d_in) = d_in.as_mut() {
                                let dst = &mut d_in[base + src_y * w + sx0..];
                                for (d, gv) in dst.iter_mut().zip(gr) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        d_w[widx] += acc;
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}
