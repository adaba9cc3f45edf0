//! Small neural-network toolkit: named parameters, circular 1-D and zero-padded
//! 2-D convolutions with hand-written backward passes, and optimizers.
//!
//! Activations are 2-D arrays with one row per position (contour vertex or
//! grid cell) and one column per channel. Batches stack blocks of rows.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, shaped, row-major parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: &str, shape: &[usize]) -> Param {
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform(name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Param {
        let mut p = Param::zeros(name, shape);
        p.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..=bound));
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The parameter viewed as a `rows × cols` matrix, where `cols` is the
    /// product of all trailing dimensions.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        let rows = self.shape[0];
        ArrayView2::from_shape((rows, self.data.len() / rows), &self.data).expect("param shape")
    }
}

/// Gradient buffers laid out like a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(params: &[Param]) -> Grads {
        Grads(params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn matrix_mut(&mut self, idx: usize, rows: usize) -> ArrayViewMut2<'_, f64> {
        let buf = &mut self.0[idx];
        let cols = buf.len() / rows;
        ArrayViewMut2::from_shape((rows, cols), buf).expect("grad shape")
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }
}

/// Checks that two parameter lists have the same names and shapes.
pub fn check_layout(expected: &[Param], got: &[Param]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter arrays, found {}",
            expected.len(),
            got.len()
        )));
    }
    for (e, g) in expected.iter().zip(got) {
        if e.name != g.name || e.shape != g.shape {
            return Err(Error::Shape(format!(
                "parameter {} {:?} does not match {} {:?}",
                g.name, g.shape, e.name, e.shape
            )));
        }
    }
    Ok(())
}

/// Gathers the circular `k`-tap neighborhood of every row: column block `t`
/// of row `i` holds input row `(i + t - (k-1)/2) mod n` of the same contour.
fn im2col_circular(x: ArrayView2<'_, f64>, n: usize, k: usize) -> Array2<f64> {
    let (rows, d) = x.dim();
    let half = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((rows, k * d));
    for base in (0..rows).step_by(n) {
        for i in 0..n {
            let mut out = cols.row_mut(base + i);
            let out = out.as_slice_mut().expect("contiguous");
            for t in 0..k {
                let src = (i as isize + t as isize - half).rem_euclid(n as isize) as usize;
                out[t * d..(t + 1) * d].copy_from_slice(
                    x.row(base + src).as_slice().expect("contiguous input rows"),
                );
            }
        }
    }
    cols
}

fn col2im_circular(dcols: ArrayView2<'_, f64>, n: usize, k: usize, d: usize) -> Array2<f64> {
    let rows = dcols.nrows();
    let half = (k / 2) as isize;
    let mut dx = Array2::<f64>::zeros((rows, d));
    for base in (0..rows).step_by(n) {
        for i in 0..n {
            let src = dcols.row(base + i);
            for t in 0..k {
                let dst = (i as isize + t as isize - half).rem_euclid(n as isize) as usize;
                let mut row = dx.row_mut(base + dst);
                row += &src.slice(s![t * d..(t + 1) * d]);
            }
        }
    }
    dx
}

/// Circular 1-D convolution over blocks of `n` rows.
/// `weight` is `d_out × (k · d_in)` with taps outermost.
pub fn conv1d_circular(
    x: ArrayView2<'_, f64>,
    n: usize,
    k: usize,
    weight: ArrayView2<'_, f64>,
    bias: &[f64],
) -> Array2<f64> {
    debug_assert_eq!(x.nrows() % n, 0);
    let y = if k == 1 {
        x.dot(&weight.t())
    } else {
        im2col_circular(x, n, k).dot(&weight.t())
    };
    add_bias(y, bias)
}

/// Backward pass of [`conv1d_circular`]: accumulates into `dw` / `db` and
/// returns the input gradient.
pub fn conv1d_circular_backward(
    x: ArrayView2<'_, f64>,
    n: usize,
    k: usize,
    weight: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    mut dw: ArrayViewMut2<'_, f64>,
    db: &mut [f64],
) -> Array2<f64> {
    accumulate_bias_grad(dy, db);
    if k == 1 {
        dw += &dy.t().dot(&x);
        return dy.dot(&weight);
    }
    let cols = im2col_circular(x, n, k);
    dw += &dy.t().dot(&cols);
    let dcols = dy.dot(&weight);
    col2im_circular(dcols.view(), n, k, x.ncols())
}

/// Circular 1-D convolution of one contour with a `d_out × d_in × k` kernel.
pub fn circular_conv1d(
    input: ArrayView2<'_, f64>,
    kernel: &ndarray::Array3<f64>,
    bias: &[f64],
) -> Result<Array2<f64>> {
    let (d_out, d_in, k) = kernel.dim();
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
    }
    if input.ncols() != d_in || bias.len() != d_out {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {d_in}; bias {} for {d_out} outputs",
            input.ncols(),
            bias.len()
        )));
    }
    // Reorder to taps-outermost columns.
    let mut w = Array2::<f64>::zeros((d_out, k * d_in));
    for o in 0..d_out {
        for c in 0..d_in {
            for t in 0..k {
                w[[o, t * d_in + c]] = kernel[[o, c, t]];
            }
        }
    }
    let x = input.as_standard_layout();
    Ok(conv1d_circular(x.view(), input.nrows(), k, w.view(), bias))
}

/// Geometry of a square 2-D convolution on `height × width` grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dShape {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv2dShape {
    fn cells(&self) -> usize {
        self.height * self.width
    }
}

fn im2col_2d(x: ArrayView2<'_, f64>, g: Conv2dShape) -> Array2<f64> {
    let (rows, c) = x.dim();
    let k = g.kernel;
    let half = (k / 2) as isize;
    let dil = g.dilation as isize;
    let mut cols = Array2::<f64>::zeros((rows, k * k * c));
    for base in (0..rows).step_by(g.cells()) {
        for r in 0..g.height {
            for q in 0..g.width {
                let mut out = cols.row_mut(base + r * g.width + q);
                let out = out.as_slice_mut().expect("contiguous");
                for tr in 0..k {
                    let rr = r as isize + (tr as isize - half) * dil;
                    if rr < 0 || rr >= g.height as isize {
                        continue;
                    }
                    for tq in 0..k {
                        let qq = q as isize + (tq as isize - half) * dil;
                        if qq < 0 || qq >= g.width as isize {
                            continue;
                        }
                        let src = base + rr as usize * g.width + qq as usize;
                        let t = tr * k + tq;
                        out[t * c..(t + 1) * c]
                            .copy_from_slice(x.row(src).as_slice().expect("contiguous"));
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(dcols: ArrayView2<'_, f64>, g: Conv2dShape, c: usize) -> Array2<f64> {
    let rows = dcols.nrows();
    let k = g.kernel;
    let half = (k / 2) as isize;
    let dil = g.dilation as isize;
    let mut dx = Array2::<f64>::zeros((rows, c));
    for base in (0..rows).step_by(g.cells()) {
        for r in 0..g.height {
            for q in 0..g.width {
                let src = dcols.row(base + r * g.width + q);
                for tr in 0..k {
                    let rr = r as isize + (tr as isize - half) * dil;
                    if rr < 0 || rr >= g.height as isize {
                        continue;
                    }
                    for tq in 0..k {
                        let qq = q as isize + (tq as isize - half) * dil;
                        if qq < 0 || qq >= g.width as isize {
                            continue;
                        }
                        let t = tr * k + tq;
                        let mut row = dx.row_mut(base + rr as usize * g.width + qq as usize);
                        row += &src.slice(s![t * c..(t + 1) * c]);
                    }
                }
            }
        }
    }
    dx
}

/// Zero-padded ("same") 2-D convolution over blocks of `height·width` rows.
/// `weight` is `d_out × (k·k·d_in)`, taps row-major and outermost.
pub fn conv2d(
    x: ArrayView2<'_, f64>,
    g: Conv2dShape,
    weight: ArrayView2<'_, f64>,
    bias: &[f64],
) -> Array2<f64> {
    let y = if g.kernel == 1 {
        x.dot(&weight.t())
    } else {
        im2col_2d(x, g).dot(&weight.t())
    };
    add_bias(y, bias)
}

pub fn conv2d_backward(
    x: ArrayView2<'_, f64>,
    g: Conv2dShape,
    weight: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    mut dw: ArrayViewMut2<'_, f64>,
    db: &mut [f64],
) -> Array2<f64> {
    accumulate_bias_grad(dy, db);
    if g.kernel == 1 {
        dw += &dy.t().dot(&x);
        return dy.dot(&weight);
    }
    let cols = im2col_2d(x, g);
    dw += &dy.t().dot(&cols);
    let dcols = dy.dot(&weight);
    col2im_2d(dcols.view(), g, x.ncols())
}

/// The `k × k` dilated neighborhood of one cell, flattened like a row of the
/// 2-D im2col matrix. Used to evaluate a convolution at a few cells only.
pub fn gather_patch(x: ArrayView2<'_, f64>, g: Conv2dShape, base: usize, row: usize, col: usize) -> Vec<f64> {
    let c = x.ncols();
    let k = g.kernel;
    let half = (k / 2) as isize;
    let dil = g.dilation as isize;
    let mut out = vec![0.0; k * k * c];
    for tr in 0..k {
        let rr = row as isize + (tr as isize - half) * dil;
        if rr < 0 || rr >= g.height as isize {
            continue;
        }
        for tq in 0..k {
            let qq = col as isize + (tq as isize - half) * dil;
            if qq < 0 || qq >= g.width as isize {
                continue;
            }
            let src = base + rr as usize * g.width + qq as usize;
            let t = tr * k + tq;
            for ch in 0..c {
                out[t * c + ch] = x[[src, ch]];
            }
        }
    }
    out
}

/// Adds a patch gradient produced by [`gather_patch`] back into `dx`.
pub fn scatter_patch(
    dx: &mut Array2<f64>,
    g: Conv2dShape,
    base: usize,
    row: usize,
    col: usize,
    dpatch: &[f64],
) {
    let c = dx.ncols();
    let k = g.kernel;
    let half = (k / 2) as isize;
    let dil = g.dilation as isize;
    for tr in 0..k {
        let rr = row as isize + (tr as isize - half) * dil;
        if rr < 0 || rr >= g.height as isize {
            continue;
        }
        for tq in 0..k {
            let qq = col as isize + (tq as isize - half) * dil;
            if qq < 0 || qq >= g.width as isize {
                continue;
            }
            let dst = base + rr as usize * g.width + qq as usize;
            let t = tr * k + tq;
            for ch in 0..c {
                dx[[dst, ch]] += dpatch[t * c + ch];
            }
        }
    }
}

fn add_bias(mut y: Array2<f64>, bias: &[f64]) -> Array2<f64> {
    for mut row in y.rows_mut() {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

fn accumulate_bias_grad(dy: ArrayView2<'_, f64>, db: &mut [f64]) {
    let sums = dy.sum_axis(Axis(0));
    db.iter_mut().zip(sums.iter()).for_each(|(d, s)| *d += s);
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum 0.9.
    Momentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "momentum" | "sgd" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub const MOMENTUM: f64 = 0.9;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, params: &[Param]) -> Optimizer {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Optimizer {
            kind,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [Param], grads: &Grads, lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Momentum => {
                for ((p, g), m) in params.iter_mut().zip(&grads.0).zip(&mut self.first) {
                    for ((w, &gi), mi) in p.data.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = Self::MOMENTUM * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - Self::BETA1.powi(t);
                let c2 = 1.0 - Self::BETA2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(&grads.0)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), vi) in
                        p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi;
                        *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}
