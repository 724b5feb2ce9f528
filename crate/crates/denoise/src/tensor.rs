//! Dense NHWC tensors and the differentiable numeric kernels.
//!
//! Layout is row-major `(batch, height, width, channels)`; the channel index
//! varies fastest. All math runs at 64-bit precision so finite-difference
//! gradient checks have headroom; a convolution result from the fast path
//! (im2col + GEMM) may differ from a naive summation only in summation
//! order, bounded by 1e-12 relative.
//!
//! Conventions pinned here because tests depend on them:
//!
//! - `Same` convolutions zero-pad the border. Mirror padding is applied
//!   once, at the image boundary, by whole-image inference — not per layer.
//! - The ReLU subgradient at exactly 0 is 0.
//! - Kernels are fixed at 3x3, stride 1.
//!
//! Every operation is a pure function of its inputs. Batch loops may run on
//! multiple threads; each batch element owns a disjoint output slice and is
//! computed with a fixed summation order, so results are independent of
//! thread count.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{Error, Result};

thread_local! {
    static SCRATCH_POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable thread-local buffer of at least `len` values.
///
/// Contents are unspecified on entry — callers must overwrite everything
/// they read. Reuse keeps the per-step conv workspace out of the allocator,
/// which matters because im2col buffers run to tens of megabytes.
pub(crate) fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH_POOL
        .with(|p| p.borrow_mut().pop())
        .unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let r = f(&mut buf[..len]);
    SCRATCH_POOL.with(|p| p.borrow_mut().push(buf));
    r
}

/// Dense 4-D array of `f64` in `(n, h, w, c)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

/// Border handling for 3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output spatial extent equals the input extent.
    Same,
    /// No padding; the output shrinks by 2 in each spatial dimension.
    Valid,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor {
            shape: [n, h, w, c],
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!(
                    "data length {} does not match shape ({n},{h},{w},{c})",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: [n, h, w, c],
            data,
        })
    }

    pub fn filled(n: usize, h: usize, w: usize, c: usize, value: f64) -> Self {
        Tensor {
            shape: [n, h, w, c],
            data: vec![value; n * h * w * c],
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let [n, h, w, c] = self.shape;
        (n, h, w, c)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        let [_, h, w, ch] = self.shape;
        self.data[((n * h + y) * w + x) * ch + c]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, y: usize, x: usize, c: usize) -> &mut f64 {
        let [_, h, w, ch] = self.shape;
        &mut self.data[((n * h + y) * w + x) * ch + c]
    }

    /// Number of values per batch element.
    #[inline]
    pub(crate) fn elem_len(&self) -> usize {
        let [_, h, w, c] = self.shape;
        h * w * c
    }

    #[inline]
    pub(crate) fn elem(&self, n: usize) -> &[f64] {
        let len = self.elem_len();
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub(crate) fn elem_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.elem_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute value, 0 for the empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    fn check_kernel_input(&self, op: &'static str) -> Result<()> {
        if self.shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                op,
                format!("all extents must be >= 1, got {:?}", self.shape),
            ));
        }
        Ok(())
    }
}

/// Weights and bias of one 3x3 convolution.
///
/// `weights` has shape `(3, 3, c_in, c_out)`; gradients with respect to a
/// convolution's parameters reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let (kh, kw, _, c_out) = weights.shape();
        if kh != 3 || kw != 3 {
            return Err(Error::shape(
                "ConvParams::new",
                format!("kernel spatial extent must be 3x3, got {kh}x{kw}"),
            ));
        }
        if bias.len() != c_out {
            return Err(Error::shape(
                "ConvParams::new",
                format!("bias length {} does not match c_out {c_out}", bias.len()),
            ));
        }
        Ok(ConvParams { weights, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvParams {
            weights: Tensor::zeros(3, 3, c_in, c_out),
            bias: vec![0.0; c_out],
        }
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        // Weight shape is (3, 3, c_in, c_out).
        self.weights.width()
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.weights.channels()
    }

    /// Total number of scalar parameters (weights plus bias).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Spatial extent of the output of a 3x3 stride-1 convolution.
fn conv_output_extent(h: usize, w: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => Ok((h, w)),
        Padding::Valid => {
            if h < 3 || w < 3 {
                Err(Error::shape(
                    "conv2d",
                    format!("valid convolution needs spatial extent >= 3, got {h}x{w}"),
                ))
            } else {
                Ok((h - 2, w - 2))
            }
        }
    }
}

/// 3x3 stride-1 convolution.
///
/// `Same` zero-pads the border so the output is `(n, h, w, c_out)`; `Valid`
/// yields `(n, h-2, w-2, c_out)`.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams, padding: Padding) -> Result<Tensor> {
    input.check_kernel_input("conv2d_forward")?;
    let (n, h, w, c_in) = input.shape();
    let (_, _, k_cin, c_out) = params.weights.shape();
    if k_cin != c_in {
        return Err(Error::shape(
            "conv2d_forward",
            format!("input has {c_in} channels but kernel expects {k_cin}"),
        ));
    }
    let (oh, ow) = conv_output_extent(h, w, padding)?;
    let mut out = Tensor::zeros(n, oh, ow, c_out);
    let in_len = input.elem_len();
    let out_len = out.elem_len();
    let k = 9 * c_in;

    let run = |src: &[f64], dst: &mut [f64]| {
        with_scratch(oh * ow * k, |cols| {
            im2col(src, h, w, c_in, padding, &Window::full(oh, ow), cols);
            gemm_nn(oh * ow, k, c_out, cols, params.weights.data(), 0.0, dst);
        });
        add_bias(dst, &params.bias);
    };

    if n == 1 {
        run(input.elem(0), out.elem_mut(0));
    } else {
        out.data
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(i, dst)| run(&input.data[i * in_len..(i + 1) * in_len], dst));
    }
    Ok(out)
}

/// Exact gradients of `sum(grad_out * conv2d_forward(input))` with respect
/// to the input, weights, and bias.
///
/// Work is restricted to the bounding box of nonzero `grad_out` values per
/// batch element; entries outside it contribute exact zeros, so the result
/// is unchanged.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
    padding: Padding,
) -> Result<(Tensor, ConvParams)> {
    input.check_kernel_input("conv2d_backward")?;
    let (n, h, w, c_in) = input.shape();
    let (_, _, k_cin, c_out) = params.weights.shape();
    if k_cin != c_in {
        return Err(Error::shape(
            "conv2d_backward",
            format!("input has {c_in} channels but kernel expects {k_cin}"),
        ));
    }
    let (oh, ow) = conv_output_extent(h, w, padding)?;
    if grad_out.shape() != (n, oh, ow, c_out) {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} does not match output shape ({n},{oh},{ow},{c_out})",
                grad_out.shape()
            ),
        ));
    }

    let k = 9 * c_in;
    let in_len = input.elem_len();
    let go_len = grad_out.elem_len();
    let mut grad_input = Tensor::zeros(n, h, w, c_in);

    // Per-element partial parameter gradients, reduced in element order below.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_input
        .data
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(i, gi)| {
            let src = &input.data[i * in_len..(i + 1) * in_len];
            let go = &grad_out.data[i * go_len..(i + 1) * go_len];
            let mut dw = vec![0.0; k * c_out];
            let mut db = vec![0.0; c_out];
            let win = match nonzero_window(go, oh, ow, c_out) {
                Some(win) => win,
                None => return (dw, db),
            };
            let m = win.rows();
            with_scratch(m * c_out, |go_rows| {
                gather_rows(go, ow, c_out, &win, go_rows);
                with_scratch(m * k, |cols| {
                    im2col(src, h, w, c_in, padding, &win, cols);
                    // dW = cols^T (k x m) * go_rows (m x c_out)
                    gemm_tn(k, m, c_out, cols, go_rows, 0.0, &mut dw);
                });
                for row in go_rows.chunks_exact(c_out) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                // dX: (m x c_out) * W^T (c_out x k) scattered over the window.
                with_scratch(m * k, |gcols| {
                    gemm_nt(m, c_out, k, go_rows, params.weights.data(), 0.0, gcols);
                    col2im_add(gcols, h, w, c_in, padding, &win, gi);
                });
            });
            (dw, db)
        })
        .collect();

    let mut grad_w = vec![0.0; k * c_out];
    let mut grad_b = vec![0.0; c_out];
    for (dw, db) in &partials {
        for (acc, &v) in grad_w.iter_mut().zip(dw) {
            *acc += v;
        }
        for (acc, &v) in grad_b.iter_mut().zip(db) {
            *acc += v;
        }
    }

    let grads = ConvParams {
        weights: Tensor::from_vec(3, 3, c_in, c_out, grad_w)?,
        bias: grad_b,
    };
    Ok((grad_input, grads))
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Masks `grad_out` where the forward input was <= 0.
///
/// The subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape,
        data,
    })
}

/// Mirror-pads the spatial borders by `margin` pixels, reflecting about the
/// edge sample (the edge pixel itself is not repeated at the fold).
pub fn pad_symmetric(input: &Tensor, margin: usize) -> Result<Tensor> {
    let (n, h, w, c) = input.shape();
    if margin >= h.min(w) {
        return Err(Error::InvalidArg(format!(
            "pad margin {margin} must be smaller than min spatial extent {}",
            h.min(w)
        )));
    }
    if margin == 0 {
        return Ok(input.clone());
    }
    let m = margin as isize;
    let reflect = |v: isize, extent: usize| -> usize {
        let e = extent as isize;
        let r = if v < 0 {
            -v
        } else if v >= e {
            2 * e - 2 - v
        } else {
            v
        };
        r as usize
    };
    let mut out = Tensor::zeros(n, h + 2 * margin, w + 2 * margin, c);
    let (_, nh, nw, _) = out.shape();
    for b in 0..n {
        for y in 0..nh {
            let sy = reflect(y as isize - m, h);
            for x in 0..nw {
                let sx = reflect(x as isize - m, w);
                for ch in 0..c {
                    *out.at_mut(b, y, x, ch) = input.at(b, sy, sx, ch);
                }
            }
        }
    }
    Ok(out)
}

/// Removes `margin` rows and columns from each spatial side.
pub fn crop_center(input: &Tensor, margin: usize) -> Result<Tensor> {
    let (n, h, w, c) = input.shape();
    if 2 * margin >= h.min(w) {
        return Err(Error::InvalidArg(format!(
            "crop margin {margin} too large for {h}x{w}"
        )));
    }
    if margin == 0 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h - 2 * margin, w - 2 * margin);
    let mut out = Tensor::zeros(n, oh, ow, c);
    for b in 0..n {
        for y in 0..oh {
            let src_off = ((b * h + y + margin) * w + margin) * c;
            let dst_off = ((b * oh + y) * ow) * c;
            out.data[dst_off..dst_off + ow * c]
                .copy_from_slice(&input.data[src_off..src_off + ow * c]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Internal kernels shared with the network fast paths.
// ---------------------------------------------------------------------------

/// Half-open output-pixel region `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Window {
    pub(crate) fn full(oh: usize, ow: usize) -> Self {
        Window {
            y0: 0,
            y1: oh,
            x0: 0,
            x1: ow,
        }
    }

    #[inline]
    pub(crate) fn rows(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Bounding box of output pixels with any nonzero channel value, or `None`
/// if the gradient is identically zero.
pub(crate) fn nonzero_window(elem: &[f64], oh: usize, ow: usize, c: usize) -> Option<Window> {
    let mut y0 = oh;
    let mut y1 = 0;
    let mut x0 = ow;
    let mut x1 = 0;
    for y in 0..oh {
        let row = &elem[y * ow * c..(y + 1) * ow * c];
        for x in 0..ow {
            if row[x * c..(x + 1) * c].iter().any(|&v| v != 0.0) {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y1 == 0 {
        None
    } else {
        Some(Window { y0, y1, x0, x1 })
    }
}

/// Copies the window rows of a `(oh, ow, c)` element into a dense `m x c`
/// matrix, `m = window.rows()`.
pub(crate) fn gather_rows(elem: &[f64], ow: usize, c: usize, win: &Window, out: &mut [f64]) {
    let width = win.x1 - win.x0;
    for (i, y) in (win.y0..win.y1).enumerate() {
        let src = &elem[(y * ow + win.x0) * c..(y * ow + win.x1) * c];
        out[i * width * c..(i + 1) * width * c].copy_from_slice(src);
    }
    debug_assert_eq!(out.len(), win.rows() * c);
}

/// Builds im2col rows for the output pixels in `win`.
///
/// Row layout matches the `(3, 3, c_in, c_out)` weight layout: index
/// `(dy * 3 + dx) * c_in + i`. Out-of-bounds taps are zero (`Same` only).
pub(crate) fn im2col(
    elem: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    padding: Padding,
    win: &Window,
    cols: &mut [f64],
) {
    let k = 9 * c_in;
    debug_assert_eq!(cols.len(), win.rows() * k);
    // Offset from output pixel to top-left input tap.
    let base = match padding {
        Padding::Same => -1isize,
        Padding::Valid => 0,
    };
    let mut row = 0;
    for oy in win.y0..win.y1 {
        for ox in win.x0..win.x1 {
            let out_row = &mut cols[row * k..(row + 1) * k];
            for dy in 0..3usize {
                let iy = oy as isize + dy as isize + base;
                for dx in 0..3usize {
                    let ix = ox as isize + dx as isize + base;
                    let dst = &mut out_row[(dy * 3 + dx) * c_in..(dy * 3 + dx + 1) * c_in];
                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let off = ((iy as usize) * w + ix as usize) * c_in;
                        dst.copy_from_slice(&elem[off..off + c_in]);
                    }
                }
            }
            row += 1;
        }
    }
}

/// Scatter-adds im2col-space gradients back onto the input element.
///
/// Accumulation order is fixed (window row-major, then tap order), so the
/// result does not depend on thread count.
pub(crate) fn col2im_add(
    gcols: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    padding: Padding,
    win: &Window,
    elem: &mut [f64],
) {
    let k = 9 * c_in;
    debug_assert_eq!(gcols.len(), win.rows() * k);
    let base = match padding {
        Padding::Same => -1isize,
        Padding::Valid => 0,
    };
    let mut row = 0;
    for oy in win.y0..win.y1 {
        for ox in win.x0..win.x1 {
            let src_row = &gcols[row * k..(row + 1) * k];
            for dy in 0..3usize {
                let iy = oy as isize + dy as isize + base;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let ix = ox as isize + dx as isize + base;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &src_row[(dy * 3 + dx) * c_in..(dy * 3 + dx + 1) * c_in];
                    let off = ((iy as usize) * w + ix as usize) * c_in;
                    for (d, &s) in elem[off..off + c_in].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            row += 1;
        }
    }
}

pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `C = A (m x k) * B (k x n) + beta * C`, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m x n) = A^T * B + beta * C` where `A` is stored `rows x m` row-major
/// and `B` is stored `rows x n` row-major.
pub(crate) fn gemm_tn(m: usize, rows: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * m);
    debug_assert_eq!(b.len(), rows * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            rows,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m x n) = A (m x k) * B^T` where `B` is stored `n x k` row-major.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-loop convolution, the reference the fast path is
    /// checked against.
    fn naive_conv2d(input: &Tensor, params: &ConvParams, padding: Padding) -> Tensor {
        let (n, h, w, c_in) = input.shape();
        let c_out = params.c_out();
        let (oh, ow) = conv_output_extent(h, w, padding).unwrap();
        let base = match padding {
            Padding::Same => -1isize,
            Padding::Valid => 0,
        };
        let mut out = Tensor::zeros(n, oh, ow, c_out);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..c_out {
                        let mut acc = params.bias[o];
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let iy = oy as isize + dy as isize + base;
                                let ix = ox as isize + dx as isize + base;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for i in 0..c_in {
                                    acc += input.at(b, iy as usize, ix as usize, i)
                                        * params.weights.at(dy, dx, i, o);
                                }
                            }
                        }
                        *out.at_mut(b, oy, ox, o) = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg_fill(tensor: &mut Tensor, seed: u64) {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for v in tensor.data_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
        }
    }

    fn random_tensor(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(n, h, w, c);
        lcg_fill(&mut t, seed);
        t
    }

    fn random_params(c_in: usize, c_out: usize, seed: u64) -> ConvParams {
        let mut w = Tensor::zeros(3, 3, c_in, c_out);
        lcg_fill(&mut w, seed);
        let mut b = Tensor::zeros(1, 1, 1, c_out);
        lcg_fill(&mut b, seed ^ 0xb1a5);
        ConvParams::new(w, b.into_data()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-9);
            assert!(
                (x - y).abs() / denom <= rel,
                "index {i}: {x} vs {y} (rel {})",
                (x - y).abs() / denom
            );
        }
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let input = Tensor::zeros(1, 5, 5, 1);
        let params = random_params(1, 2, 7);
        let out = conv2d_forward(&input, &params, Padding::Same).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(out.at(0, y, x, 0), params.bias[0]);
                assert_eq!(out.at(0, y, x, 1), params.bias[1]);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let input = random_tensor(2, 6, 7, 1, 3);
        let mut params = ConvParams::zeros(1, 1);
        *params.weights.at_mut(1, 1, 0, 0) = 1.0;
        let out = conv2d_forward(&input, &params, Padding::Same).unwrap();
        // Bit-exact: the only nonzero product is x * 1.0.
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_all_ones_valid_sums_nine() {
        let input = Tensor::filled(1, 3, 3, 1, 1.0);
        let params = ConvParams {
            weights: Tensor::filled(3, 3, 1, 1, 1.0),
            bias: vec![0.0],
        };
        let out = conv2d_forward(&input, &params, Padding::Valid).unwrap();
        assert_eq!(out.shape(), (1, 1, 1, 1));
        assert_eq!(out.at(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn conv_matches_naive_reference() {
        for (padding, seed) in [(Padding::Same, 11), (Padding::Valid, 12)] {
            let input = random_tensor(1, 8, 8, 2, seed);
            let params = random_params(2, 3, seed + 100);
            let fast = conv2d_forward(&input, &params, padding).unwrap();
            let slow = naive_conv2d(&input, &params, padding);
            assert_eq!(fast.shape(), slow.shape());
            assert_close(fast.data(), slow.data(), 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let input = random_tensor(1, 4, 4, 2, 1);
        let params = random_params(3, 1, 2);
        assert!(conv2d_forward(&input, &params, Padding::Same).is_err());
        let grad = Tensor::zeros(1, 4, 4, 1);
        assert!(conv2d_backward(&input, &params, &grad, Padding::Same).is_err());
    }

    #[test]
    fn conv_is_linear_in_input() {
        let x = random_tensor(1, 6, 6, 2, 21);
        let y = random_tensor(1, 6, 6, 2, 22);
        let params = ConvParams {
            bias: vec![0.0; 3],
            ..random_params(2, 3, 23)
        };
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_vec(
            1,
            6,
            6,
            2,
            x.data().iter().zip(y.data()).map(|(&u, &v)| a * u + b * v).collect(),
        )
        .unwrap();
        let lhs = conv2d_forward(&mixed, &params, Padding::Same).unwrap();
        let cx = conv2d_forward(&x, &params, Padding::Same).unwrap();
        let cy = conv2d_forward(&y, &params, Padding::Same).unwrap();
        let rhs: Vec<f64> = cx
            .data()
            .iter()
            .zip(cy.data())
            .map(|(&u, &v)| a * u + b * v)
            .collect();
        assert_close(lhs.data(), &rhs, 1e-12);
    }

    #[test]
    fn conv_backward_zero_grad_gives_zero() {
        let input = random_tensor(1, 5, 5, 2, 31);
        let params = random_params(2, 2, 32);
        let grad = Tensor::zeros(1, 5, 5, 2);
        let (gi, gp) = conv2d_backward(&input, &params, &grad, Padding::Same).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gp.weights.data().iter().all(|&v| v == 0.0));
        assert!(gp.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_identity_adjoint_is_identity() {
        let input = random_tensor(1, 5, 5, 1, 41);
        let mut params = ConvParams::zeros(1, 1);
        *params.weights.at_mut(1, 1, 0, 0) = 1.0;
        let mut grad = Tensor::zeros(1, 5, 5, 1);
        *grad.at_mut(0, 2, 3, 0) = 2.5;
        let (gi, _) = conv2d_backward(&input, &params, &grad, Padding::Same).unwrap();
        assert_eq!(gi.data(), grad.data());
    }

    /// Central finite differences on a random instance. The loss
    /// `sum(G * conv(x; w, b))` is linear in each argument, so the check is
    /// exact up to roundoff.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let step = 1e-3;
        let padding = Padding::Same;
        let input = random_tensor(1, 5, 5, 2, 51);
        let params = random_params(2, 2, 52);
        let grad_out = random_tensor(1, 5, 5, 2, 53);
        let loss = |inp: &Tensor, par: &ConvParams| -> f64 {
            let out = conv2d_forward(inp, par, padding).unwrap();
            out.data().iter().zip(grad_out.data()).map(|(&o, &g)| o * g).sum()
        };
        let (gi, gp) = conv2d_backward(&input, &params, &grad_out, padding).unwrap();

        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += step;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= step;
            let numeric = (loss(&plus, &params) - loss(&minus, &params)) / (2.0 * step);
            let analytic = gi.data()[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "input grad {idx}: {analytic} vs fd {numeric}"
            );
        }
        for idx in 0..params.weights.len() {
            let mut plus = params.clone();
            plus.weights.data_mut()[idx] += step;
            let mut minus = params.clone();
            minus.weights.data_mut()[idx] -= step;
            let numeric = (loss(&input, &plus) - loss(&input, &minus)) / (2.0 * step);
            let analytic = gp.weights.data()[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "weight grad {idx}: {analytic} vs fd {numeric}"
            );
        }
        for idx in 0..params.bias.len() {
            let mut plus = params.clone();
            plus.bias[idx] += step;
            let mut minus = params.clone();
            minus.bias[idx] -= step;
            let numeric = (loss(&input, &plus) - loss(&input, &minus)) / (2.0 * step);
            let analytic = gp.bias[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "bias grad {idx}: {analytic} vs fd {numeric}"
            );
        }
    }

    #[test]
    fn conv_backward_valid_matches_finite_differences() {
        let step = 1e-3;
        let input = random_tensor(1, 6, 5, 2, 61);
        let params = random_params(2, 3, 62);
        let grad_out = random_tensor(1, 4, 3, 3, 63);
        let loss = |par: &ConvParams| -> f64 {
            let out = conv2d_forward(&input, par, Padding::Valid).unwrap();
            out.data().iter().zip(grad_out.data()).map(|(&o, &g)| o * g).sum()
        };
        let (_, gp) = conv2d_backward(&input, &params, &grad_out, Padding::Valid).unwrap();
        for idx in 0..params.weights.len() {
            let mut plus = params.clone();
            plus.weights.data_mut()[idx] += step;
            let mut minus = params.clone();
            minus.weights.data_mut()[idx] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let analytic = gp.weights.data()[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!((numeric - analytic).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::from_vec(1, 1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        let out = relu_forward(&input);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let input = random_tensor(1, 4, 4, 2, 71).map(|v| v.abs() + 0.1);
        let out = relu_forward(&input);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn relu_plus_mirrored_relu_is_abs() {
        let input = random_tensor(1, 5, 5, 3, 72);
        let neg = input.map(|v| -v);
        let a = relu_forward(&input);
        let b = relu_forward(&neg);
        for ((&x, &p), &q) in input.data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!(p + q, x.abs());
        }
    }

    #[test]
    fn relu_backward_masks_nonpositive() {
        let input = Tensor::from_vec(1, 1, 4, 1, vec![-2.0, 0.0, 1.0, 3.0]).unwrap();
        let grad = Tensor::from_vec(1, 1, 4, 1, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let gi = relu_backward(&input, &grad).unwrap();
        assert_eq!(gi.data(), &[0.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn pad_zero_margin_is_identity() {
        let input = random_tensor(1, 4, 5, 2, 81);
        let out = pad_symmetric(&input, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn pad_reflects_about_edge_sample() {
        // Middle row [4, 5, 6], margin 1 -> [5, 4, 5, 6, 5]: the edge pixel
        // is not repeated at the fold.
        let input =
            Tensor::from_vec(1, 3, 3, 1, (1..=9).map(f64::from).collect()).unwrap();
        let out = pad_symmetric(&input, 1).unwrap();
        assert_eq!(out.shape(), (1, 5, 5, 1));
        let mid: Vec<f64> = (0..5).map(|x| out.at(0, 2, x, 0)).collect();
        assert_eq!(mid, vec![5.0, 4.0, 5.0, 6.0, 5.0]);
        // Corner reflects both axes: (-1,-1) -> (1,1).
        assert_eq!(out.at(0, 0, 0, 0), 5.0);
    }

    #[test]
    fn pad_margin_too_large_is_error() {
        let input = random_tensor(1, 4, 4, 1, 82);
        assert!(pad_symmetric(&input, 4).is_err());
    }

    #[test]
    fn crop_overcrop_is_error() {
        let input = random_tensor(1, 4, 4, 1, 83);
        assert!(crop_center(&input, 2).is_err());
    }

    #[test]
    fn pad_then_crop_roundtrips() {
        for margin in [1usize, 2, 3] {
            let input = random_tensor(2, 5, 6, 2, 90 + margin as u64);
            let padded = pad_symmetric(&input, margin).unwrap();
            let back = crop_center(&padded, margin).unwrap();
            assert_eq!(back, input);
        }
    }

    #[test]
    fn backward_window_restriction_matches_dense() {
        // A gradient that is zero outside a small interior box must produce
        // the same parameter gradients as the dense path run on the box
        // embedded in zeros.
        let input = random_tensor(1, 9, 9, 2, 95);
        let params = random_params(2, 2, 96);
        let mut grad = Tensor::zeros(1, 9, 9, 2);
        for y in 3..6 {
            for x in 4..7 {
                for c in 0..2 {
                    *grad.at_mut(0, y, x, c) = (y * 7 + x) as f64 * 0.1 - c as f64;
                }
            }
        }
        let (gi, gp) = conv2d_backward(&input, &params, &grad, Padding::Same).unwrap();

        // Independent dense accumulation.
        let mut dw = ConvParams::zeros(2, 2);
        let mut db = vec![0.0; 2];
        let mut gi_ref = Tensor::zeros(1, 9, 9, 2);
        for oy in 0..9usize {
            for ox in 0..9usize {
                for o in 0..2 {
                    let g = grad.at(0, oy, ox, o);
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let iy = oy as isize + dy as isize - 1;
                            let ix = ox as isize + dx as isize - 1;
                            if iy < 0 || iy >= 9 || ix < 0 || ix >= 9 {
                                continue;
                            }
                            for i in 0..2 {
                                *dw.weights.at_mut(dy, dx, i, o) +=
                                    g * input.at(0, iy as usize, ix as usize, i);
                                *gi_ref.at_mut(0, iy as usize, ix as usize, i) +=
                                    g * params.weights.at(dy, dx, i, o);
                            }
                        }
                    }
                }
            }
        }
        assert_close(gp.weights.data(), dw.weights.data(), 1e-12);
        assert_close(&gp.bias, &db, 1e-12);
        assert_close(gi.data(), gi_ref.data(), 1e-12);
    }
}
