//! Dense real tensors (flat vectors or C×H×W images), elementwise algebra,
//! 2-D correlation, and the unnormalized 2-D DFT.
//!
//! Everything is row-major f64. All states, observations, and estimator
//! outputs in this crate live in a [`TensorGrid`].

use crate::error::{Error, Result};

/// Dense row-major f64 array with an explicit shape, either `[d]` (flat
/// vector) or `[C, H, W]` (image). Entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn ensure_same_shape(a: &TensorGrid, b: &TensorGrid) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    Ok(())
}

impl TensorGrid {
    /// Builds a tensor, checking that the element count matches the shape
    /// product and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Flat 1-D vector with shape `[data.len()]`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; count],
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

    /// Element count (d_x = C·H·W for images).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(C, H, W)` for rank-3 tensors; error otherwise.
    pub fn image_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                got: self.shape.clone(),
            }),
        }
    }

    /// Entry-wise sum.
    pub fn add(&self, other: &TensorGrid) -> Result<TensorGrid> {
        ensure_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(TensorGrid {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Entry-wise difference `self − other`.
    pub fn sub(&self, other: &TensorGrid) -> Result<TensorGrid> {
        ensure_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(TensorGrid {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Entry-wise product.
    pub fn hadamard(&self, other: &TensorGrid) -> Result<TensorGrid> {
        ensure_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(TensorGrid {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Scalar multiple.
    pub fn scale(&self, k: f64) -> TensorGrid {
        TensorGrid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * k).collect(),
        }
    }

    /// `self + k·other`.
    pub fn add_scaled(&self, other: &TensorGrid, k: f64) -> Result<TensorGrid> {
        ensure_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + k * b)
            .collect();
        Ok(TensorGrid {
            shape: self.shape.clone(),
            data,
        })
    }

    /// In-place `self += k·other`; used by the estimator's fixed-order
    /// reduction loops.
    pub fn axpy(&mut self, k: f64, other: &TensorGrid) -> Result<()> {
        ensure_same_shape(self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Entry-wise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorGrid {
        TensorGrid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Inner product `Σ aᵢ·bᵢ`.
    pub fn dot(&self, other: &TensorGrid) -> Result<f64> {
        ensure_same_shape(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm ‖a‖₂.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max-abs norm ‖a‖∞ (0 for empty tensors).
    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Boundary handling for [`conv2d`]. Operators use `Reflect`; `Periodic`
/// exists so the flipped-kernel adjoint identity can be checked directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Mirror about the edge sample without repeating it (…cba|abc|cba…).
    Reflect,
    /// Wrap around.
    Periodic,
}

fn reflect_index(mut idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if idx < 0 {
            idx = -idx;
        } else if idx >= n {
            idx = 2 * (n - 1) - idx;
        } else {
            return idx as usize;
        }
    }
}

fn periodic_index(idx: isize, n: usize) -> usize {
    idx.rem_euclid(n as isize) as usize
}

/// Per-channel 2-D correlation of an image `[C,H,W]` with a square kernel
/// `[k,k]`, k odd. Output has the input shape.
pub fn conv2d(x: &TensorGrid, kernel: &TensorGrid, boundary: Boundary) -> Result<TensorGrid> {
    let (c, h, w) = x.image_dims()?;
    let k = match kernel.shape() {
        [kh, kw] if kh == kw => *kh,
        other => {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                got: other.to_vec(),
            })
        }
    };
    if k % 2 == 0 {
        return Err(Error::InvalidOperator(format!(
            "convolution kernel must have odd size, got {k}"
        )));
    }
    let half = (k / 2) as isize;
    let map = |idx: isize, n: usize| match boundary {
        Boundary::Reflect => reflect_index(idx, n),
        Boundary::Periodic => periodic_index(idx, n),
    };
    let mut out = vec![0.0; c * h * w];
    let kd = kernel.data();
    let xd = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..k {
                    let src_i = map(i as isize + u as isize - half, h);
                    for v in 0..k {
                        let src_j = map(j as isize + v as isize - half, w);
                        acc += kd[u * k + v] * xd[base + src_i * w + src_j];
                    }
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    TensorGrid::new(x.shape().to_vec(), out)
}

/// Exact transpose of [`conv2d`] with reflect padding: scatters each output
/// contribution back through the same index map. Satisfies the dot-product
/// identity to machine precision.
pub(crate) fn conv2d_reflect_adjoint(v: &TensorGrid, kernel: &TensorGrid) -> Result<TensorGrid> {
    let (c, h, w) = v.image_dims()?;
    let k = kernel.shape()[0];
    let half = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    let kd = kernel.data();
    let vd = v.data();
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let coeff = vd[base + i * w + j];
                for u in 0..k {
                    let src_i = reflect_index(i as isize + u as isize - half, h);
                    for vv in 0..k {
                        let src_j = reflect_index(j as isize + vv as isize - half, w);
                        out[base + src_i * w + src_j] += kd[u * k + vv] * coeff;
                    }
                }
            }
        }
    }
    TensorGrid::new(v.shape().to_vec(), out)
}

/// Unnormalized 2-D DFT of a complex field given as separate re/im planes of
/// size H×W. The transform matrix is symmetric (exp(−2πi·k·j/n) in each
/// axis), which the magnitude-spectrum VJP relies on.
pub(crate) fn dft2(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let table = |n: usize| -> (Vec<f64>, Vec<f64>) {
        let mut cs = vec![0.0; n];
        let mut sn = vec![0.0; n];
        for m in 0..n {
            let ang = -2.0 * std::f64::consts::PI * m as f64 / n as f64;
            cs[m] = ang.cos();
            sn[m] = ang.sin();
        }
        (cs, sn)
    };
    let (cw, sw) = table(w);
    let (chh, shh) = table(h);

    // Rows first, then columns.
    let mut row_re = vec![0.0; h * w];
    let mut row_im = vec![0.0; h * w];
    for y in 0..h {
        for kx in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for x in 0..w {
                let m = (kx * x) % w;
                let (c, s) = (cw[m], sw[m]);
                let (vr, vi) = (re[y * w + x], im[y * w + x]);
                ar += vr * c - vi * s;
                ai += vr * s + vi * c;
            }
            row_re[y * w + kx] = ar;
            row_im[y * w + kx] = ai;
        }
    }
    let mut out_re = vec![0.0; h * w];
    let mut out_im = vec![0.0; h * w];
    for ky in 0..h {
        for kx in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for y in 0..h {
                let m = (ky * y) % h;
                let (c, s) = (chh[m], shh[m]);
                let (vr, vi) = (row_re[y * w + kx], row_im[y * w + kx]);
                ar += vr * c - vi * s;
                ai += vr * s + vi * c;
            }
            out_re[ky * w + kx] = ar;
            out_im[ky * w + kx] = ai;
        }
    }
    (out_re, out_im)
}

/// Entry-wise modulus of the unnormalized 2-D DFT of a single-channel image
/// `[1,H,W]`.
pub fn dft2_magnitude(x: &TensorGrid) -> Result<TensorGrid> {
    let (c, h, w) = x.image_dims()?;
    if c != 1 {
        return Err(Error::InvalidOperator(format!(
            "magnitude spectrum needs a single channel, got {c}"
        )));
    }
    let zeros = vec![0.0; h * w];
    let (re, im) = dft2(x.data(), &zeros, h, w);
    let mag = re
        .iter()
        .zip(&im)
        .map(|(r, i)| (r * r + i * i).sqrt())
        .collect();
    TensorGrid::new(vec![1, h, w], mag)
}
