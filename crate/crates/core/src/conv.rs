//! The convolutional dictionary and its generative operator.
//!
//! A dictionary holds a kernel of shape `(M, C, k, k)`: `M` signal channels,
//! `C` code channels and odd square atoms. The generative operator maps a
//! code `z` of shape `(n, C, H', W')` to a signal of shape `(n, M, H, W)`:
//!
//! ```text
//! x[m, i, j] = sum_c sum_{u,v} z[c, u, v] * a[m, c, s*u - i, s*v - j]
//! ```
//!
//! where kernel offsets run over `-k0..=k0` (`k = 2*k0 + 1`) and `s` is the
//! stride. For `s = 1` this is the zero-padded correlation
//! `x_m = sum_c a_mc ⋆ z_c`; for larger strides the code lives on the
//! decimated grid `H' = ceil(H / s)` and is placed at every `s`-th position.
//! The adjoint is the matching strided convolution.
//!
//! Both operators run as an im2col/col2im pass around a dense GEMM. They
//! share one index map, `i = s*u - kp + k0` with `kp` the kernel row index,
//! so the adjoint's gather is exactly the transpose of the forward scatter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// `c = a * b` (+ `c` when `accumulate`) for row-major dense blocks with
/// explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolutional dictionary `(M, C, k, k)` with a stride and fixed "same"
/// zero padding of `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDictionary {
    kernel: Tensor,
    stride: usize,
}

impl ConvDictionary {
    pub fn new(kernel: Tensor, stride: usize) -> Result<Self> {
        let [m, c, kh, kw] = kernel.shape();
        if m == 0 || c == 0 {
            return invalid("dictionary needs at least one signal and one code channel");
        }
        if kh != kw {
            return invalid(format!("atoms must be square, got {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return invalid(format!("atom size must be odd, got {kh}"));
        }
        if stride == 0 {
            return invalid("stride must be positive");
        }
        Ok(Self { kernel, stride })
    }

    /// Zero-mean Gaussian atoms with standard deviation `1/sqrt(M k^2)`,
    /// projected onto the normalized set.
    pub fn random<R: Rng + ?Sized>(
        signal_channels: usize,
        code_channels: usize,
        size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((signal_channels * size * size) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = [signal_channels, code_channels, size, size];
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        let dict = Self::new(Tensor::from_vec(shape, data)?, stride)?;
        dict.project_to_normalized()
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor {
        &mut self.kernel
    }

    pub fn into_kernel(self) -> Tensor {
        self.kernel
    }

    /// `M`.
    pub fn signal_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// `C`.
    pub fn code_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.size() / 2
    }

    /// Code-grid extent for a signal of the given spatial size.
    pub fn code_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Applies the generative operator. The output grid is `s*H' x s*W'`.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = z.shape();
        self.apply_sized(z, (h * self.stride, w * self.stride))
    }

    /// Applies the generative operator onto an `out_h x out_w` signal grid.
    pub fn apply_sized(&self, z: &Tensor, (out_h, out_w): (usize, usize)) -> Result<Tensor> {
        let [n, zc, zh, zw] = z.shape();
        let (m_ch, c_ch) = (self.signal_channels(), self.code_channels());
        if zc != c_ch {
            return Err(Error::ShapeMismatch {
                op: "apply",
                left: self.kernel.shape(),
                right: z.shape(),
            });
        }
        if self.code_hw(out_h, out_w) != (zh, zw) {
            return invalid(format!(
                "code grid {zh}x{zw} does not match output {out_h}x{out_w} at stride {}",
                self.stride
            ));
        }
        let kk = self.size() * self.size();
        let rows = m_ch * kk;
        let cols = zh * zw;
        // Rows (m, kp, kq), columns c: element a[m, c, kp, kq] lives at
        // m*C*kk + c*kk + kpq, which is (C*kk, kk) row stride in two parts;
        // re-layout once as a (M*kk) x C matrix.
        let wmat = self.stacked_by_signal();
        let mut out = Tensor::zeros([n, m_ch, out_h, out_w]);
        let mut buf = vec![0.0; rows * cols];
        for b in 0..n {
            gemm(rows, c_ch, cols, &wmat, (c_ch, 1), z.item(b), (cols, 1), &mut buf, false);
            self.col2im(&buf, out.item_mut(b), (zh, zw), (out_h, out_w));
        }
        Ok(out)
    }

    /// Applies the adjoint (transposed) operator, mapping a signal
    /// `(n, M, H, W)` to the code grid `(n, C, ceil(H/s), ceil(W/s))`.
    pub fn adjoint(&self, x: &Tensor) -> Result<Tensor> {
        let [n, xm, h, w] = x.shape();
        let (m_ch, c_ch) = (self.signal_channels(), self.code_channels());
        if xm != m_ch {
            return Err(Error::ShapeMismatch {
                op: "adjoint",
                left: self.kernel.shape(),
                right: x.shape(),
            });
        }
        let (zh, zw) = self.code_hw(h, w);
        let kk = self.size() * self.size();
        let rows = m_ch * kk;
        let cols = zh * zw;
        let wmat = self.stacked_by_signal();
        let mut out = Tensor::zeros([n, c_ch, zh, zw]);
        let mut buf = vec![0.0; rows * cols];
        for b in 0..n {
            self.im2col(x.item(b), &mut buf, (h, w), (zh, zw));
            // (C x M*kk) = transpose of wmat.
            gemm(c_ch, rows, cols, &wmat, (1, c_ch), &buf, (cols, 1), out.item_mut(b), false);
        }
        Ok(out)
    }

    /// Gradient of `<signal, A(code)>` with respect to the kernel, summed
    /// over the batch and accumulated into `grad` (shape `(M, C, k, k)`).
    ///
    /// Because `<A(z), x>` is bilinear in `(kernel, z)`, this single routine
    /// covers every kernel-gradient term of the unrolled iterations.
    pub fn accumulate_kernel_grad(&self, signal: &Tensor, code: &Tensor, grad: &mut Tensor) -> Result<()> {
        let [n, xm, h, w] = signal.shape();
        let [zn, zc, zh, zw] = code.shape();
        let (m_ch, c_ch) = (self.signal_channels(), self.code_channels());
        if xm != m_ch || zc != c_ch || zn != n || self.code_hw(h, w) != (zh, zw) {
            return Err(Error::ShapeMismatch {
                op: "kernel_grad",
                left: signal.shape(),
                right: code.shape(),
            });
        }
        if grad.shape() != self.kernel.shape() {
            return Err(Error::ShapeMismatch {
                op: "kernel_grad",
                left: grad.shape(),
                right: self.kernel.shape(),
            });
        }
        let kk = self.size() * self.size();
        let rows = m_ch * kk;
        let cols = zh * zw;
        let mut buf = vec![0.0; rows * cols];
        let mut acc = vec![0.0; rows * c_ch];
        for b in 0..n {
            self.im2col(signal.item(b), &mut buf, (h, w), (zh, zw));
            // (M*kk x HW') * (HW' x C): code item viewed transposed.
            gemm(rows, cols, c_ch, &buf, (cols, 1), code.item(b), (1, cols), &mut acc, true);
        }
        let g = grad.data_mut();
        for m in 0..m_ch {
            for c in 0..c_ch {
                for kpq in 0..kk {
                    g[(m * c_ch + c) * kk + kpq] += acc[(m * kk + kpq) * c_ch + c];
                }
            }
        }
        Ok(())
    }

    /// Kernel re-laid out as a row-major `(M*k*k) x C` matrix.
    fn stacked_by_signal(&self) -> Vec<f64> {
        let (m_ch, c_ch) = (self.signal_channels(), self.code_channels());
        let kk = self.size() * self.size();
        let src = self.kernel.data();
        let mut out = vec![0.0; m_ch * kk * c_ch];
        for m in 0..m_ch {
            for c in 0..c_ch {
                for kpq in 0..kk {
                    out[(m * kk + kpq) * c_ch + c] = src[(m * c_ch + c) * kk + kpq];
                }
            }
        }
        out
    }

    /// Gathers `cols[(m, kp, kq), (u, v)] = x[m, s*u - kp + k0, s*v - kq + k0]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64], (h, w): (usize, usize), (zh, zw): (usize, usize)) {
        let k = self.size();
        let k0 = self.pad() as isize;
        let s = self.stride as isize;
        let m_ch = self.signal_channels();
        let ncols = zh * zw;
        for m in 0..m_ch {
            let plane = &x[m * h * w..(m + 1) * h * w];
            for kp in 0..k {
                for kq in 0..k {
                    let row = &mut cols[((m * k + kp) * k + kq) * ncols..][..ncols];
                    for u in 0..zh {
                        let i = s * u as isize - kp as isize + k0;
                        let dst = &mut row[u * zw..(u + 1) * zw];
                        if i < 0 || i >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[i as usize * w..(i as usize + 1) * w];
                        for (v, d) in dst.iter_mut().enumerate() {
                            let j = s * v as isize - kq as isize + k0;
                            *d = if j >= 0 && j < w as isize { src[j as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` into a zeroed signal item (transpose of `im2col`).
    fn col2im(&self, cols: &[f64], x: &mut [f64], (zh, zw): (usize, usize), (h, w): (usize, usize)) {
        let k = self.size();
        let k0 = self.pad() as isize;
        let s = self.stride as isize;
        let m_ch = self.signal_channels();
        let ncols = zh * zw;
        for m in 0..m_ch {
            let plane = &mut x[m * h * w..(m + 1) * h * w];
            for kp in 0..k {
                for kq in 0..k {
                    let row = &cols[((m * k + kp) * k + kq) * ncols..][..ncols];
                    for u in 0..zh {
                        let i = s * u as isize - kp as isize + k0;
                        if i < 0 || i >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[i as usize * w..(i as usize + 1) * w];
                        let src = &row[u * zw..(u + 1) * zw];
                        for (v, &val) in src.iter().enumerate() {
                            let j = s * v as isize - kq as isize + k0;
                            if j >= 0 && j < w as isize {
                                dst[j as usize] += val;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Squared ℓ₂ mass of each code channel, `sum_m ||a_mc||^2`.
    pub fn channel_energy(&self) -> Vec<f64> {
        let [m_ch, c_ch, k, _] = self.kernel.shape();
        let kk = k * k;
        let d = self.kernel.data();
        (0..c_ch)
            .map(|c| {
                (0..m_ch)
                    .map(|m| d[(m * c_ch + c) * kk..][..kk].iter().map(|v| v * v).sum::<f64>())
                    .sum()
            })
            .collect()
    }

    /// Projects onto the normalized set: every code channel's atoms get unit
    /// total energy.
    pub fn project_to_normalized(mut self) -> Result<Self> {
        self.normalize_in_place()?;
        Ok(self)
    }

    pub fn normalize_in_place(&mut self) -> Result<()> {
        let energy = self.channel_energy();
        if let Some(c) = energy.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::DegenerateDictionary(format!(
                "code channel {c} has energy {}",
                energy[c]
            )));
        }
        let [m_ch, c_ch, k, _] = self.kernel.shape();
        let kk = k * k;
        let d = self.kernel.data_mut();
        for (c, e) in energy.iter().enumerate() {
            let inv = 1.0 / e.sqrt();
            for m in 0..m_ch {
                d[(m * c_ch + c) * kk..][..kk].iter_mut().for_each(|v| *v *= inv);
            }
        }
        Ok(())
    }
}
