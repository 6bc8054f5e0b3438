//! Degradation operators A, observation noise models, synthesis of y, and
//! reconstruction losses ℓ_y for the inverse problem y = A(x_0) + n.

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::{conv2d, conv2d_reflect_adjoint, dft2, dft2_magnitude, Boundary, TensorGrid};

/// Normalized 2-D Gaussian kernel (odd `size`, entries sum to 1).
pub fn gaussian_kernel(size: usize, std: f64) -> Result<TensorGrid> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::InvalidOperator(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::InvalidOperator(format!(
            "kernel std must be finite and > 0, got {std}"
        )));
    }
    let c = (size / 2) as isize;
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size as isize {
        for q in 0..size as isize {
            let d2 = ((r - c) * (r - c) + (q - c) * (q - c)) as f64;
            data.push((-d2 / (2.0 * std * std)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    TensorGrid::new(vec![size, size], data.iter().map(|v| v / total).collect())
}

/// Normalized line kernel for motion blur: a segment of the given length at
/// `angle_deg` from the horizontal axis, anti-aliased by bilinear splatting of
/// dense sample points.
pub fn motion_kernel(length: usize, angle_deg: f64) -> Result<TensorGrid> {
    if length == 0 {
        return Err(Error::InvalidOperator("motion length must be >= 1".into()));
    }
    if !angle_deg.is_finite() {
        return Err(Error::InvalidOperator("motion angle must be finite".into()));
    }
    let size = if length % 2 == 1 { length } else { length + 1 };
    let c = (size / 2) as f64;
    let mut data = vec![0.0; size * size];
    let theta = angle_deg.to_radians();
    let (dy, dx) = (theta.sin(), theta.cos());
    let half = (length as f64 - 1.0) / 2.0;
    let samples = 8 * length;
    for s in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -half + (2.0 * half) * s as f64 / (samples - 1) as f64
        };
        let (y, x) = (c + t * dy, c + t * dx);
        let (r0, q0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y.floor(), x - x.floor());
        for (dr, dq, w) in [
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ] {
            let (r, q) = (r0 + dr, q0 + dq);
            if r < size && q < size && w > 0.0 {
                data[r * size + q] += w;
            }
        }
    }
    let total: f64 = data.iter().sum();
    TensorGrid::new(vec![size, size], data.iter().map(|v| v / total).collect())
}

/// Forward degradation map A. Linear variants expose an exact adjoint; all
/// variants expose a vector-Jacobian product.
#[derive(Debug, Clone)]
pub enum DegradationOperator {
    /// A(x) = x.
    Identity,
    /// Keeps the listed flat coordinates of an `x_shape` signal.
    Inpaint {
        keep: Vec<usize>,
        x_shape: Vec<usize>,
    },
    /// Block-mean downsampling of [C,H,W] by `factor` in each spatial axis.
    AvgPool { factor: usize },
    /// Convolution with a normalized Gaussian kernel, reflect boundary.
    GaussianBlur { kernel: TensorGrid },
    /// Convolution with a normalized line kernel, reflect boundary.
    MotionBlur { kernel: TensorGrid },
    /// N(x) = B(x) + ½·B(x)⊙B(x) with B a Gaussian blur.
    NonlinearBlur { kernel: TensorGrid },
    /// Entrywise magnitude of the 2-D DFT of a [1,H,W] signal.
    PhaseRetrieval,
}

impl DegradationOperator {
    pub fn identity() -> Self {
        DegradationOperator::Identity
    }

    /// Selection operator keeping strictly increasing flat indices of a
    /// signal with shape `x_shape`.
    pub fn inpaint(keep: Vec<usize>, x_shape: Vec<usize>) -> Result<Self> {
        let n: usize = x_shape.iter().product();
        if x_shape.is_empty() || n == 0 {
            return Err(Error::InvalidOperator("empty signal shape".into()));
        }
        if keep.is_empty() {
            return Err(Error::InvalidOperator("empty keep set".into()));
        }
        if !keep.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidOperator(
                "keep indices must be strictly increasing".into(),
            ));
        }
        if *keep.last().expect("nonempty") >= n {
            return Err(Error::InvalidOperator(format!(
                "keep index {} out of range for {} elements",
                keep.last().expect("nonempty"),
                n
            )));
        }
        Ok(DegradationOperator::Inpaint { keep, x_shape })
    }

    pub fn avg_pool(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidOperator("pool factor must be >= 1".into()));
        }
        Ok(DegradationOperator::AvgPool { factor })
    }

    pub fn gaussian_blur(size: usize, std: f64) -> Result<Self> {
        Ok(DegradationOperator::GaussianBlur {
            kernel: gaussian_kernel(size, std)?,
        })
    }

    pub fn motion_blur(length: usize, angle_deg: f64) -> Result<Self> {
        Ok(DegradationOperator::MotionBlur {
            kernel: motion_kernel(length, angle_deg)?,
        })
    }

    pub fn nonlinear_blur(size: usize, std: f64) -> Result<Self> {
        Ok(DegradationOperator::NonlinearBlur {
            kernel: gaussian_kernel(size, std)?,
        })
    }

    pub fn phase_retrieval() -> Self {
        DegradationOperator::PhaseRetrieval
    }

    /// Short stable name for reports and error messages.
    pub fn kind(&self) -> &'static str {
        match self {
            DegradationOperator::Identity => "identity",
            DegradationOperator::Inpaint { .. } => "inpaint",
            DegradationOperator::AvgPool { .. } => "avgpool",
            DegradationOperator::GaussianBlur { .. } => "gaussian_blur",
            DegradationOperator::MotionBlur { .. } => "motion_blur",
            DegradationOperator::NonlinearBlur { .. } => "nonlinear_blur",
            DegradationOperator::PhaseRetrieval => "phase_retrieval",
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(
            self,
            DegradationOperator::NonlinearBlur { .. } | DegradationOperator::PhaseRetrieval
        )
    }

    /// Output shape for an input of shape `x_shape`.
    pub fn output_shape(&self, x_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            DegradationOperator::Identity => Ok(x_shape.to_vec()),
            DegradationOperator::Inpaint { keep, x_shape: xs } => {
                if x_shape != xs.as_slice() {
                    return Err(Error::ShapeMismatch {
                        expected: xs.clone(),
                        got: x_shape.to_vec(),
                    });
                }
                Ok(vec![keep.len()])
            }
            DegradationOperator::AvgPool { factor } => {
                let (c, h, w) = image_dims_of(x_shape)?;
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::InvalidOperator(format!(
                        "spatial dims {h}x{w} not divisible by pool factor {factor}"
                    )));
                }
                Ok(vec![c, h / factor, w / factor])
            }
            DegradationOperator::GaussianBlur { .. }
            | DegradationOperator::MotionBlur { .. }
            | DegradationOperator::NonlinearBlur { .. } => {
                image_dims_of(x_shape)?;
                Ok(x_shape.to_vec())
            }
            DegradationOperator::PhaseRetrieval => {
                let (c, _, _) = image_dims_of(x_shape)?;
                if c != 1 {
                    return Err(Error::InvalidOperator(format!(
                        "phase retrieval needs a single channel, got {c}"
                    )));
                }
                Ok(x_shape.to_vec())
            }
        }
    }

    /// Forward map A(x).
    pub fn apply(&self, x: &TensorGrid) -> Result<TensorGrid> {
        match self {
            DegradationOperator::Identity => Ok(x.clone()),
            DegradationOperator::Inpaint { keep, x_shape } => {
                if x.shape() != x_shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        expected: x_shape.clone(),
                        got: x.shape().to_vec(),
                    });
                }
                let data: Vec<f64> = keep.iter().map(|&k| x.data()[k]).collect();
                TensorGrid::new(vec![keep.len()], data)
            }
            DegradationOperator::AvgPool { factor } => {
                let out_shape = self.output_shape(x.shape())?;
                let (c, h, w) = x.image_dims()?;
                let f = *factor;
                let (oh, ow) = (h / f, w / f);
                let mut out = Vec::with_capacity(c * oh * ow);
                let norm = 1.0 / (f * f) as f64;
                for ch in 0..c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut acc = 0.0;
                            for dr in 0..f {
                                for dq in 0..f {
                                    acc += x.data()[ch * h * w + (r * f + dr) * w + (q * f + dq)];
                                }
                            }
                            out.push(acc * norm);
                        }
                    }
                }
                TensorGrid::new(out_shape, out)
            }
            DegradationOperator::GaussianBlur { kernel }
            | DegradationOperator::MotionBlur { kernel } => conv2d(x, kernel, Boundary::Reflect),
            DegradationOperator::NonlinearBlur { kernel } => {
                let b = conv2d(x, kernel, Boundary::Reflect)?;
                b.add(&b.hadamard(&b)?.scale(0.5))
            }
            DegradationOperator::PhaseRetrieval => dft2_magnitude(x),
        }
    }

    /// Exact adjoint Aᵀ for linear operators; maps output space back to
    /// x-space so that ⟨A(x), v⟩ = ⟨x, Aᵀ(v)⟩.
    pub fn adjoint(&self, v: &TensorGrid) -> Result<TensorGrid> {
        match self {
            DegradationOperator::Identity => Ok(v.clone()),
            DegradationOperator::Inpaint { keep, x_shape } => {
                if v.shape() != [keep.len()] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![keep.len()],
                        got: v.shape().to_vec(),
                    });
                }
                let mut out = TensorGrid::zeros(x_shape);
                for (slot, &k) in keep.iter().enumerate() {
                    out.data_mut()[k] = v.data()[slot];
                }
                Ok(out)
            }
            DegradationOperator::AvgPool { factor } => {
                let (c, oh, ow) = v.image_dims()?;
                let f = *factor;
                let (h, w) = (oh * f, ow * f);
                let mut out = TensorGrid::zeros(&[c, h, w]);
                let norm = 1.0 / (f * f) as f64;
                for ch in 0..c {
                    for r in 0..h {
                        for q in 0..w {
                            out.data_mut()[ch * h * w + r * w + q] =
                                v.data()[ch * oh * ow + (r / f) * ow + (q / f)] * norm;
                        }
                    }
                }
                Ok(out)
            }
            DegradationOperator::GaussianBlur { kernel }
            | DegradationOperator::MotionBlur { kernel } => conv2d_reflect_adjoint(v, kernel),
            DegradationOperator::NonlinearBlur { .. } | DegradationOperator::PhaseRetrieval => {
                Err(Error::NonlinearAdjoint {
                    kind: self.kind().to_string(),
                })
            }
        }
    }

    /// (∂A/∂x)ᵀ·v at the point x. Equals the adjoint for linear operators and
    /// uses exact Jacobian expressions for the nonlinear ones.
    pub fn operator_vjp(&self, x: &TensorGrid, v: &TensorGrid) -> Result<TensorGrid> {
        match self {
            DegradationOperator::NonlinearBlur { kernel } => {
                // N(x) = B(x) + ½·B(x)², so Jᵀv = Bᵀ((1 + B(x))⊙v).
                if v.shape() != x.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: x.shape().to_vec(),
                        got: v.shape().to_vec(),
                    });
                }
                let b = conv2d(x, kernel, Boundary::Reflect)?;
                let weighted = b.map(|t| 1.0 + t).hadamard(v)?;
                conv2d_reflect_adjoint(&weighted, kernel)
            }
            DegradationOperator::PhaseRetrieval => {
                // A_k = |F_k| with F the (symmetric) DFT matrix applied to x:
                // Jᵀv = Re(DFT(v ⊙ conj(F)/|F|)), zero where |F_k| = 0.
                if v.shape() != x.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: x.shape().to_vec(),
                        got: v.shape().to_vec(),
                    });
                }
                let (_, h, w) = x.image_dims()?;
                let zeros = vec![0.0; x.len()];
                let (fre, fim) = dft2(x.data(), &zeros, h, w);
                let mut ure = Vec::with_capacity(x.len());
                let mut uim = Vec::with_capacity(x.len());
                for k in 0..x.len() {
                    let mag = (fre[k] * fre[k] + fim[k] * fim[k]).sqrt();
                    if mag == 0.0 {
                        ure.push(0.0);
                        uim.push(0.0);
                    } else {
                        ure.push(v.data()[k] * fre[k] / mag);
                        uim.push(-v.data()[k] * fim[k] / mag);
                    }
                }
                let (out_re, _) = dft2(&ure, &uim, h, w);
                TensorGrid::new(x.shape().to_vec(), out_re)
            }
            _ => self.adjoint(v),
        }
    }
}

fn image_dims_of(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            got: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Observation noise attached to the forward map.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// y = A(x_0) + σ_y·z with z standard normal.
    Gaussian { sigma_y: f64 },
    /// y = Poisson(λ·s·A(x_0))/(λ·s) with intensity scale s.
    Poisson { lambda: f64, intensity_scale: f64 },
}

impl NoiseModel {
    pub fn gaussian(sigma_y: f64) -> Result<Self> {
        if !(sigma_y.is_finite() && sigma_y > 0.0) {
            return Err(Error::InvalidOperator(format!(
                "sigma_y must be finite and > 0, got {sigma_y}"
            )));
        }
        Ok(NoiseModel::Gaussian { sigma_y })
    }

    pub fn poisson(lambda: f64, intensity_scale: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidOperator(format!(
                "lambda must be finite and > 0, got {lambda}"
            )));
        }
        if !(intensity_scale.is_finite() && intensity_scale > 0.0) {
            return Err(Error::InvalidOperator(format!(
                "intensity scale must be finite and > 0, got {intensity_scale}"
            )));
        }
        Ok(NoiseModel::Poisson {
            lambda,
            intensity_scale,
        })
    }

    /// Reconstruction loss ℓ_y: squared L2 for Gaussian noise, L1 for Poisson.
    pub fn recon_loss(&self, y: &TensorGrid, ax0: &TensorGrid) -> Result<f64> {
        if y.shape() != ax0.shape() {
            return Err(Error::ShapeMismatch {
                expected: y.shape().to_vec(),
                got: ax0.shape().to_vec(),
            });
        }
        let loss = match self {
            NoiseModel::Gaussian { .. } => y
                .data()
                .iter()
                .zip(ax0.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
            NoiseModel::Poisson { .. } => y
                .data()
                .iter()
                .zip(ax0.data())
                .map(|(a, b)| (a - b).abs())
                .sum(),
        };
        Ok(loss)
    }
}

/// A degradation operator, a noise model, and one observation drawn from them.
#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub operator: DegradationOperator,
    pub noise: NoiseModel,
    pub y: TensorGrid,
    pub x_shape: Vec<usize>,
}

impl InverseProblem {
    pub fn new(
        operator: DegradationOperator,
        noise: NoiseModel,
        y: TensorGrid,
        x_shape: Vec<usize>,
    ) -> Result<Self> {
        let expect = operator.output_shape(&x_shape)?;
        if y.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: expect,
                got: y.shape().to_vec(),
            });
        }
        Ok(Self {
            operator,
            noise,
            y,
            x_shape,
        })
    }

    /// A(x) for an x-space tensor.
    pub fn apply(&self, x: &TensorGrid) -> Result<TensorGrid> {
        self.operator.apply(x)
    }

    /// ℓ_y(A·) against the stored observation.
    pub fn loss(&self, ax: &TensorGrid) -> Result<f64> {
        self.noise.recon_loss(&self.y, ax)
    }
}

/// Result of drawing an observation: the assembled problem plus the number of
/// negative Poisson rates clipped to zero during synthesis.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub problem: InverseProblem,
    pub clipped: usize,
}

/// Draws y from the forward model: Gaussian y = A(x_0) + σ_y·z, or scaled
/// Poisson counts y = Poisson(λ·s·clip(A(x_0), 0, ·))/(λ·s).
pub fn synthesize_observation(
    operator: DegradationOperator,
    noise: NoiseModel,
    x0_true: &TensorGrid,
    stream: RandomStream,
) -> Result<Synthesis> {
    let ax = operator.apply(x0_true)?;
    let (y, clipped) = match &noise {
        NoiseModel::Gaussian { sigma_y } => {
            let z = stream.standard_normal(ax.shape());
            (ax.add_scaled(&z, *sigma_y)?, 0)
        }
        NoiseModel::Poisson {
            lambda,
            intensity_scale,
        } => {
            let gain = lambda * intensity_scale;
            let clipped = ax.data().iter().filter(|v| **v < 0.0).count();
            let rates = TensorGrid::new(
                ax.shape().to_vec(),
                ax.data().iter().map(|v| gain * v.max(0.0)).collect(),
            )?;
            let counts = stream.poisson(&rates)?;
            (counts.scale(1.0 / gain), clipped)
        }
    };
    let problem = InverseProblem::new(operator, noise, y, x0_true.shape().to_vec())?;
    Ok(Synthesis { problem, clipped })
}
