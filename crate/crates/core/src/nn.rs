//! Minimal dense and convolutional layers with hand-written backward passes.
//!
//! Every layer is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Batched
//! tensors use the NCHW layout for images and `(batch, features)` for vectors.
//! Matrix products go through ndarray, which dispatches `f32`/`f64` to the
//! single-threaded `matrixmultiply` kernels, so results are deterministic.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{
    Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis,
    LinalgScalar, ScalarOperand, Zip,
};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

/// Floating-point element type usable by the layers.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Anything holding named trainable tensors.
///
/// Parameter order is fixed by the implementor and shared by the gradient
/// accumulator, the optimizer state and the checkpoint directory.
pub trait Module<T: Scalar> {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, p) in self.named_params() {
            out.extend(p.iter().copied());
        }
        out
    }

    fn set_flat_params(&mut self, values: &[T]) {
        let mut cursor = 0;
        for (_, mut p) in self.named_params_mut() {
            for v in p.iter_mut() {
                *v = values[cursor];
                cursor += 1;
            }
        }
        assert_eq!(cursor, values.len(), "flat parameter length mismatch");
    }

    fn fill_zero(&mut self) {
        for (_, mut p) in self.named_params_mut() {
            p.fill(T::zero());
        }
    }

    /// `self += scale * other`, parameter by parameter.
    fn add_scaled(&mut self, other: &Self, scale: T)
    where
        Self: Sized,
    {
        let src = other.named_params();
        for ((_, mut dst), (_, s)) in self.named_params_mut().into_iter().zip(src) {
            Zip::from(&mut dst)
                .and(&s)
                .for_each(|d, &v| *d += scale * v);
        }
    }

    /// Copy parameters from a module of the same architecture in another precision.
    fn copy_from<U: Scalar, M: Module<U>>(&mut self, other: &M) {
        let src = other.named_params();
        for ((name, mut dst), (_, s)) in self.named_params_mut().into_iter().zip(src) {
            assert_eq!(dst.shape(), s.shape(), "shape mismatch on {name}");
            Zip::from(&mut dst)
                .and(&s)
                .for_each(|d, &v| *d = T::of(v.as_f64()));
        }
    }
}

/// A zeroed copy of `module`, used as a gradient accumulator.
pub fn zeros_like<T: Scalar, M: Module<T> + Clone>(module: &M) -> M {
    let mut g = module.clone();
    g.fill_zero();
    g
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect()
}

/// He-uniform bound for leaky-ReLU(0.2) networks.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / ((1.0 + 0.04) * fan_in as f64)).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `(out, in)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = uniform_init(rng, inputs * outputs, he_bound(inputs));
        Self {
            weight: Array2::from_shape_vec((outputs, inputs), w).expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        x: &Array2<T>,
        grad_out: &Array2<T>,
        grads: &mut Linear<T>,
    ) -> Array2<T> {
        ndarray::linalg::general_mat_mul(T::one(), &grad_out.t(), x, T::one(), &mut grads.weight);
        grads.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.view().into_dyn()),
            (format!("{prefix}.bias"), self.bias.view().into_dyn()),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            (
                format!("{prefix}.weight"),
                self.weight.view_mut().into_dyn(),
            ),
            (format!("{prefix}.bias"), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Spatial geometry shared by a convolution and its transpose.
///
/// `big` is the larger (pre-convolution) image, `small` the strided one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub big: (usize, usize),
    pub small: (usize, usize),
}

impl ConvGeometry {
    /// "Same"-style geometry: the strided image is exactly `big / stride`.
    /// Requires `kernel >= stride`, `kernel - stride` even and `big` divisible
    /// by `stride`.
    pub fn halving(kernel: usize, stride: usize, big: (usize, usize)) -> Option<Self> {
        if stride == 0 || kernel < stride || !(kernel - stride).is_multiple_of(2) {
            return None;
        }
        if !big.0.is_multiple_of(stride)
            || !big.1.is_multiple_of(stride)
            || big.0 == 0
            || big.1 == 0
        {
            return None;
        }
        Some(Self {
            kernel,
            stride,
            pad: (kernel - stride) / 2,
            big,
            small: (big.0 / stride, big.1 / stride),
        })
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Per tap, the half-open range of strided outputs whose source pixel
    /// `o * stride + tap - pad` lies inside `0..extent`.
    fn valid_outputs(&self, extent: usize, small: usize) -> Vec<(usize, usize)> {
        (0..self.kernel)
            .map(|tap| {
                let lo = self.pad.saturating_sub(tap).div_ceil(self.stride);
                let hi = (extent + self.pad - tap).div_ceil(self.stride).min(small);
                (lo, hi.max(lo))
            })
            .collect()
    }
}

/// `(B, C, H, W)` big image -> `(C*k*k, B*h*w)` patch matrix.
fn im2col<T: Scalar>(x: &ArrayView4<T>, g: &ConvGeometry) -> Array2<T> {
    let (batch, channels, h, w) = x.dim();
    let (sh, sw) = g.small;
    let k = g.kernel;
    let cols_per = sh * sw;
    let width = batch * cols_per;
    let mut cols = Array2::<T>::zeros((channels * g.taps(), width));
    let dst = cols.as_slice_mut().expect("contiguous");
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let (ys, xs) = (g.valid_outputs(h, sh), g.valid_outputs(w, sw));
    for b in 0..batch {
        for c in 0..channels {
            let img = &src[(b * channels + c) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((c * k + ky) * k + kx) * width + b * cols_per;
                    let (x0, x1) = xs[kx];
                    if x0 == x1 {
                        continue;
                    }
                    let ix0 = x0 * g.stride + kx - g.pad;
                    for oy in ys[ky].0..ys[ky].1 {
                        let row = &img[(oy * g.stride + ky - g.pad) * w..][..w];
                        let out = &mut dst[base + oy * sw..][x0..x1];
                        for (o, v) in out.iter_mut().zip(row[ix0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patches back into a `(B, C, H, W)` image.
fn col2im<T: Scalar>(
    cols: &ArrayView2<T>,
    batch: usize,
    channels: usize,
    g: &ConvGeometry,
) -> Array4<T> {
    let (h, w) = g.big;
    let (sh, sw) = g.small;
    let k = g.kernel;
    let cols_per = sh * sw;
    let width = batch * cols_per;
    let mut out = Array4::<T>::zeros((batch, channels, h, w));
    let dst = out.as_slice_mut().expect("contiguous");
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let (ys, xs) = (g.valid_outputs(h, sh), g.valid_outputs(w, sw));
    for b in 0..batch {
        for c in 0..channels {
            let img = &mut dst[(b * channels + c) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((c * k + ky) * k + kx) * width + b * cols_per;
                    let (x0, x1) = xs[kx];
                    if x0 == x1 {
                        continue;
                    }
                    let ix0 = x0 * g.stride + kx - g.pad;
                    for oy in ys[ky].0..ys[ky].1 {
                        let row = &mut img[(oy * g.stride + ky - g.pad) * w..][..w];
                        let patch = &src[base + oy * sw..][x0..x1];
                        for (o, v) in row[ix0..].iter_mut().step_by(g.stride).zip(patch) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(B, C, H, W)` -> `(C, B*H*W)`
fn channel_major<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let permuted = x.view().permuted_axes([1, 0, 2, 3]);
    let owned = permuted.as_standard_layout().into_owned();
    owned
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous reshape")
}

/// `(C, B*H*W)` -> `(B, C, H, W)`
fn batch_major<T: Scalar>(x: Array2<T>, batch: usize, h: usize, w: usize) -> Array4<T> {
    let c = x.nrows();
    let a = x
        .into_shape_with_order((c, batch, h, w))
        .expect("contiguous reshape");
    a.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// Strided 2-D convolution, NCHW.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `(out, in, k, k)`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub geometry: ConvGeometry,
}

/// Values kept from the forward pass of a [`Conv2d`].
pub struct ConvCache<T> {
    cols: Array2<T>,
    batch: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let fan_in = inputs * geometry.taps();
        let w = uniform_init(rng, outputs * fan_in, he_bound(fan_in));
        Self {
            weight: Array4::from_shape_vec((outputs, inputs, geometry.kernel, geometry.kernel), w)
                .expect("shape"),
            bias: Array1::zeros(outputs),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let batch = x.dim().0;
        let cols = im2col(&x.view(), &self.geometry);
        let mut y = self.weight_matrix().dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let (sh, sw) = self.geometry.small;
        (batch_major(y, batch, sh, sw), ConvCache { cols, batch })
    }

    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        grad_out: &Array4<T>,
        grads: &mut Conv2d<T>,
    ) -> Array4<T> {
        let g = channel_major(grad_out);
        let (o, i, k, _) = grads.weight.dim();
        {
            let mut gw = grads
                .weight
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("contiguous weight");
            ndarray::linalg::general_mat_mul(T::one(), &g, &cache.cols.t(), T::one(), &mut gw);
        }
        grads.bias += &g.sum_axis(Axis(1));
        let dcols = self.weight_matrix().t().dot(&g);
        col2im(
            &dcols.view(),
            cache.batch,
            self.in_channels(),
            &self.geometry,
        )
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.view().into_dyn()),
            (format!("{prefix}.bias"), self.bias.view().into_dyn()),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            (
                format!("{prefix}.weight"),
                self.weight.view_mut().into_dyn(),
            ),
            (format!("{prefix}.bias"), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Transposed convolution, the exact adjoint of [`Conv2d`] with the same geometry.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    /// `(in, out, k, k)`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub geometry: ConvGeometry,
}

pub struct ConvTransposeCache<T> {
    input: Array2<T>,
    batch: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let taps = geometry.taps();
        let fan_in = (inputs * taps / (geometry.stride * geometry.stride)).max(1);
        let w = uniform_init(rng, inputs * outputs * taps, he_bound(fan_in));
        Self {
            weight: Array4::from_shape_vec((inputs, outputs, geometry.kernel, geometry.kernel), w)
                .expect("shape"),
            bias: Array1::zeros(outputs),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (i, o, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((i, o * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvTransposeCache<T>) {
        let batch = x.dim().0;
        let input = channel_major(x);
        let cols = self.weight_matrix().t().dot(&input);
        let mut y = col2im(&cols.view(), batch, self.out_channels(), &self.geometry);
        y += &self.bias.view().insert_axis(Axis(1)).insert_axis(Axis(2));
        (y, ConvTransposeCache { input, batch })
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache<T>,
        grad_out: &Array4<T>,
        grads: &mut ConvTranspose2d<T>,
    ) -> Array4<T> {
        let gcols = im2col(&grad_out.view(), &self.geometry);
        let (i, o, k, _) = grads.weight.dim();
        {
            let mut gw = grads
                .weight
                .view_mut()
                .into_shape_with_order((i, o * k * k))
                .expect("contiguous weight");
            ndarray::linalg::general_mat_mul(T::one(), &cache.input, &gcols.t(), T::one(), &mut gw);
        }
        grads.bias += &grad_out
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0));
        let dx = self.weight_matrix().dot(&gcols);
        let (sh, sw) = self.geometry.small;
        batch_major(dx, cache.batch, sh, sw)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.view().into_dyn()),
            (format!("{prefix}.bias"), self.bias.view().into_dyn()),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            (
                format!("{prefix}.weight"),
                self.weight.view_mut().into_dyn(),
            ),
            (format!("{prefix}.bias"), self.bias.view_mut().into_dyn()),
        ]
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<T: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let slope = T::of(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient through a leaky ReLU, given the pre-activation input.
pub fn leaky_relu_backward<T: Scalar, D: ndarray::Dimension>(
    pre: &ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let slope = T::of(LEAKY_SLOPE);
    let mut out = grad.clone();
    Zip::from(&mut out).and(pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g *= slope
        }
    });
    out
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: Module<T>>(&mut self, params: &mut M, grads: &M) {
        let grads = grads.named_params();
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|(_, g)| ArrayD::zeros(g.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (((_, mut p), (_, g)), (m, v)) in params
            .named_params_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(&mut p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// A stack of fully connected layers with leaky-ReLU between them and a
/// linear output.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Pre-activations and inputs of every layer, kept for the backward pass.
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if i == last {
                h = z;
            } else {
                h = leaky_relu(&z);
                pre.push(z);
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        grad_out: &Array2<T>,
        grads: &mut Mlp<T>,
    ) -> Array2<T> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g = leaky_relu_backward(&cache.pre[i], &g);
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grads.layers[i]);
        }
        g
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut(&format!("{prefix}.{i}")))
            .collect()
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.params("mlp")
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.params_mut("mlp")
    }
}
