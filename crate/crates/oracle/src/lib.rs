//! Slow, obviously-correct reference computations for tests.
//!
//! Nothing here shares code with `cscnet-core`: arrays are plain row-major
//! `Vec<f64>` with explicit shapes, and every operator is a direct nested
//! loop over its defining sum.

use nalgebra::{DMatrix, SymmetricEigen};

/// Kernel shape `(M, C, k, k)` plus stride.
#[derive(Clone, Copy, Debug)]
pub struct DictShape {
    pub m: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
}

impl DictShape {
    fn at(&self, kernel: &[f64], m: usize, c: usize, p: isize, q: isize) -> f64 {
        let k0 = (self.k / 2) as isize;
        let (kp, kq) = ((p + k0) as usize, (q + k0) as usize);
        kernel[((m * self.c + c) * self.k + kp) * self.k + kq]
    }
}

/// Zero-padded correlation `x_m = sum_c a_mc ⋆ z_c` for stride 1:
/// `(a ⋆ z)[i, j] = sum_{p,q in -k0..=k0} a[p, q] z[i + p, j + q]`.
pub fn correlate(kernel: &[f64], d: DictShape, z: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(d.stride, 1);
    let k0 = (d.k / 2) as isize;
    let mut x = vec![0.0; n * d.m * h * w];
    for b in 0..n {
        for m in 0..d.m {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for c in 0..d.c {
                        for p in -k0..=k0 {
                            for q in -k0..=k0 {
                                let (ii, jj) = (i + p, j + q);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let zv = z[((b * d.c + c) * h + ii as usize) * w + jj as usize];
                                acc += d.at(kernel, m, c, p, q) * zv;
                            }
                        }
                    }
                    x[((b * d.m + m) * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
    }
    x
}

/// Strided generative operator by explicit placement:
/// `x[m, i, j] = sum_c sum_{u,v} z[c, u, v] a[m, c, s*u - i, s*v - j]`.
pub fn place(
    kernel: &[f64],
    d: DictShape,
    z: &[f64],
    n: usize,
    (zh, zw): (usize, usize),
    (h, w): (usize, usize),
) -> Vec<f64> {
    let k0 = (d.k / 2) as isize;
    let s = d.stride as isize;
    let mut x = vec![0.0; n * d.m * h * w];
    for b in 0..n {
        for c in 0..d.c {
            for u in 0..zh as isize {
                for v in 0..zw as isize {
                    let zv = z[((b * d.c + c) * zh + u as usize) * zw + v as usize];
                    if zv == 0.0 {
                        continue;
                    }
                    for m in 0..d.m {
                        for i in 0..h as isize {
                            for j in 0..w as isize {
                                let (p, q) = (s * u - i, s * v - j);
                                if p.abs() > k0 || q.abs() > k0 {
                                    continue;
                                }
                                x[((b * d.m + m) * h + i as usize) * w + j as usize] += zv * d.at(kernel, m, c, p, q);
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Dense matrix of the generative operator for one item, built column by
/// column from delta codes. Rows index the signal `(M, H, W)`, columns the
/// code `(C, H', W')`.
pub fn materialize(kernel: &[f64], d: DictShape, code_hw: (usize, usize), out_hw: (usize, usize)) -> DMatrix<f64> {
    let cols = d.c * code_hw.0 * code_hw.1;
    let rows = d.m * out_hw.0 * out_hw.1;
    let mut a = DMatrix::zeros(rows, cols);
    let mut e = vec![0.0; cols];
    for j in 0..cols {
        e[j] = 1.0;
        let col = place(kernel, d, &e, 1, code_hw, out_hw);
        for (i, v) in col.into_iter().enumerate() {
            a[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    a
}

/// Largest eigenvalue of `AᵀA` by a dense symmetric eigensolve.
pub fn top_gram_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    SymmetricEigen::new(gram).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `lambda ||z||_1 + 0.5 ||x - A z||^2` with a dense operator matrix.
pub fn lasso_objective(a: &DMatrix<f64>, x: &[f64], z: &[f64], lambda: f64) -> f64 {
    let zv = nalgebra::DVector::from_column_slice(z);
    let r = nalgebra::DVector::from_column_slice(x) - a * zv;
    lambda * z.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * r.norm_squared()
}

/// Plain ISTA (no momentum) from zero with step `1 / ||A||^2`.
pub fn ista(a: &DMatrix<f64>, x: &[f64], lambda: f64, iters: usize) -> Vec<f64> {
    let l = top_gram_eigenvalue(a);
    let t = 1.0 / l;
    let gram = a.transpose() * a;
    let atx = a.transpose() * nalgebra::DVector::from_column_slice(x);
    let mut z = nalgebra::DVector::zeros(a.ncols());
    for _ in 0..iters {
        let g = &atx - &gram * &z;
        let v = &z + g * t;
        z = v.map(|e| soft(e, lambda * t));
    }
    z.as_slice().to_vec()
}

/// Central difference `(f(x + h d) - f(x - h d)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a - h * b).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative disagreement `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
