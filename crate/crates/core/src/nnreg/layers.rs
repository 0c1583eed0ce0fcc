//! Layers with cached forward state and analytic backward passes.
//!
//! `backward` must follow the matching `forward` call; parameter gradients
//! accumulate into [`Param::grad`] until [`Layer::zero_grad`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::gemm;
use super::{NnError, Scalar, Tensor4};

/// Learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn new(dims: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            dims,
            value,
            grad: vec![T::zero(); n],
        }
    }

    fn filled(dims: Vec<usize>, v: T) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![v; n])
    }

    /// Kaiming-uniform (fan-in, ReLU gain): U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    fn kaiming(dims: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = dims.iter().product();
        let value = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        Self::new(dims, value)
    }
}

/// Serializable layer description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Relu,
    BatchNorm2d {
        ch: usize,
    },
    MaxPool2d,
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// Output `(channels, height, width)` for a given input, or an error if
    /// the layer cannot consume it.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize), NnError> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, .. } => {
                if c != in_ch {
                    return Err(NnError::Shape(format!("conv expects {in_ch} channels, got {c}")));
                }
                Ok((out_ch, h, w))
            }
            LayerSpec::Relu => Ok((c, h, w)),
            LayerSpec::BatchNorm2d { ch } => {
                if c != ch {
                    return Err(NnError::Shape(format!("batchnorm expects {ch} channels, got {c}")));
                }
                Ok((c, h, w))
            }
            LayerSpec::MaxPool2d => {
                if h < 2 || w < 2 {
                    return Err(NnError::Shape(format!("maxpool needs at least 2x2, got {h}x{w}")));
                }
                Ok((c, h / 2, w / 2))
            }
            LayerSpec::GlobalAvgPool => Ok((c, 1, 1)),
            LayerSpec::Flatten => Ok((c * h * w, 1, 1)),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if c * h * w != in_features {
                    return Err(NnError::Shape(format!(
                        "linear expects {in_features} features, got {}",
                        c * h * w
                    )));
                }
                Ok((out_features, 1, 1))
            }
        }
    }

    pub fn instantiate<T: Scalar>(&self, rng: &mut impl Rng) -> Layer<T> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel } => Layer::Conv2d(Conv2d::new(in_ch, out_ch, kernel, rng)),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::BatchNorm2d { ch } => Layer::BatchNorm2d(BatchNorm2d::new(ch)),
            LayerSpec::MaxPool2d => Layer::MaxPool2d(MaxPool2d::default()),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerSpec::Flatten => Layer::Flatten(Flatten::default()),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(in_features, out_features, rng)),
        }
    }
}

/// Maximum number of im2col columns materialized at once.
const COL_BUDGET: usize = 4096;

/// 2D cross-correlation, stride 1, zero padding `kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch, in_ch, k, k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::kaiming(vec![out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: Param::filled(vec![out_ch], T::zero()),
            input: None,
        }
    }

    /// Fills `col` (`in_ch*k*k` rows, `n_items*h*w` columns) for items
    /// `first..first + n_items`.
    fn im2col(&self, x: &Tensor4<T>, first: usize, n_items: usize, col: &mut [T]) {
        let [_, c, h, w] = x.shape();
        let k = self.kernel;
        let pad = k / 2;
        let hw = h * w;
        let ncols = n_items * hw;
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut col[row * ncols..(row + 1) * ncols];
                    // valid output x range: 0 <= ox + kx - pad < w
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad).saturating_sub(kx).min(w);
                    for b in 0..n_items {
                        let src = &xd[((first + b) * c + ci) * hw..((first + b) * c + ci + 1) * hw];
                        let dst = &mut dst_row[b * hw..(b + 1) * hw];
                        for oy in 0..h {
                            let line = &mut dst[oy * w..(oy + 1) * w];
                            let iy = oy as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = iy as usize;
                            line[..ox_lo].fill(T::zero());
                            line[ox_hi..].fill(T::zero());
                            let sx = ox_lo + kx - pad;
                            line[ox_lo..ox_hi].copy_from_slice(&src[iy * w + sx..iy * w + sx + (ox_hi - ox_lo)]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `grad_x` (adjoint of im2col).
    fn col2im(&self, col: &[T], first: usize, n_items: usize, grad_x: &mut Tensor4<T>) {
        let [_, c, h, w] = grad_x.shape();
        let k = self.kernel;
        let pad = k / 2;
        let hw = h * w;
        let ncols = n_items * hw;
        let gd = grad_x.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &col[row * ncols..(row + 1) * ncols];
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad).saturating_sub(kx).min(w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for b in 0..n_items {
                        let dst = &mut gd[((first + b) * c + ci) * hw..((first + b) * c + ci + 1) * hw];
                        let src = &src_row[b * hw..(b + 1) * hw];
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let sx = ox_lo + kx - pad;
                            let d = &mut dst[iy * w + sx..iy * w + sx + (ox_hi - ox_lo)];
                            for (d, &s) in d.iter_mut().zip(&src[oy * w + ox_lo..oy * w + ox_hi]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn items_per_chunk(&self, hw: usize) -> usize {
        (COL_BUDGET / hw).max(1)
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
        let [b, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(NnError::Shape(format!("conv expects {} channels, got {c}", self.in_ch)));
        }
        let hw = h * w;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor4::zeros([b, self.out_ch, h, w]);
        let chunk = self.items_per_chunk(hw);
        let mut col = vec![T::zero(); kk * chunk.min(b) * hw];
        let mut res = vec![T::zero(); self.out_ch * chunk.min(b) * hw];
        let mut first = 0;
        while first < b {
            let n = chunk.min(b - first);
            let ncols = n * hw;
            self.im2col(x, first, n, &mut col[..kk * ncols]);
            gemm(
                self.out_ch,
                kk,
                ncols,
                T::one(),
                &self.weight.value,
                false,
                &col[..kk * ncols],
                false,
                T::zero(),
                &mut res[..self.out_ch * ncols],
            );
            let od = out.data_mut();
            for item in 0..n {
                for co in 0..self.out_ch {
                    let bias = self.bias.value[co];
                    let src = &res[co * ncols + item * hw..co * ncols + (item + 1) * hw];
                    let dst = &mut od[((first + item) * self.out_ch + co) * hw..((first + item) * self.out_ch + co + 1) * hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
            first += n;
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor4<T>) -> Tensor4<T> {
        let x = self.input.take().expect("conv backward without forward");
        let [b, _, h, w] = x.shape();
        let hw = h * w;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut grad_x = Tensor4::zeros(x.shape());
        let chunk = self.items_per_chunk(hw);
        let mut col = vec![T::zero(); kk * chunk.min(b) * hw];
        let mut go = vec![T::zero(); self.out_ch * chunk.min(b) * hw];
        let mut dcol = vec![T::zero(); kk * chunk.min(b) * hw];
        let gd = grad_out.data();
        let mut first = 0;
        while first < b {
            let n = chunk.min(b - first);
            let ncols = n * hw;
            for co in 0..self.out_ch {
                let mut acc = T::zero();
                for item in 0..n {
                    let src = &gd[((first + item) * self.out_ch + co) * hw..((first + item) * self.out_ch + co + 1) * hw];
                    go[co * ncols + item * hw..co * ncols + (item + 1) * hw].copy_from_slice(src);
                    acc += src.iter().copied().sum::<T>();
                }
                self.bias.grad[co] += acc;
            }
            self.im2col(&x, first, n, &mut col[..kk * ncols]);
            // dW += go * col^T
            gemm(
                self.out_ch,
                ncols,
                kk,
                T::one(),
                &go[..self.out_ch * ncols],
                false,
                &col[..kk * ncols],
                true,
                T::one(),
                &mut self.weight.grad,
            );
            // dcol = W^T * go
            gemm(
                kk,
                self.out_ch,
                ncols,
                T::one(),
                &self.weight.value,
                true,
                &go[..self.out_ch * ncols],
                false,
                T::zero(),
                &mut dcol[..kk * ncols],
            );
            self.col2im(&dcol[..kk * ncols], first, n, &mut grad_x);
            first += n;
        }
        grad_x
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.mask = x.data().iter().map(|&v| v > T::zero()).collect();
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        Tensor4::new(x.shape(), data).expect("same shape")
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let data = grad
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor4::new(grad.shape(), data).expect("same shape")
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(B, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub ch: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    trained: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(ch: usize) -> Self {
        Self {
            ch,
            gamma: Param::filled(vec![ch], T::one()),
            beta: Param::filled(vec![ch], T::zero()),
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one(); ch],
            x_hat: Vec::new(),
            inv_std: Vec::new(),
            trained: false,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>, NnError> {
        let [b, c, h, w] = x.shape();
        if c != self.ch {
            return Err(NnError::Shape(format!("batchnorm expects {} channels, got {c}", self.ch)));
        }
        let hw = h * w;
        let count = b * hw;
        if train && count < 2 {
            return Err(NnError::BatchTooSmall(count));
        }
        let eps = T::lit(BN_EPS);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        self.inv_std = vec![T::zero(); c];
        if train {
            self.x_hat = vec![T::zero(); xd.len()];
        }
        let momentum = T::lit(BN_MOMENTUM);
        let n = T::from_usize(count).expect("count");
        for ch in 0..c {
            let plane = |i: usize| &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let (mean, var) = if train {
                let mean = (0..b).map(|i| plane(i).iter().copied().sum::<T>()).sum::<T>() / n;
                let var = (0..b)
                    .map(|i| plane(i).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                    .sum::<T>()
                    / n;
                let unbiased = var * n / (n - T::one());
                self.running_mean[ch] = (T::one() - momentum) * self.running_mean[ch] + momentum * mean;
                self.running_var[ch] = (T::one() - momentum) * self.running_var[ch] + momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let inv_std = T::one() / (var + eps).sqrt();
            self.inv_std[ch] = inv_std;
            let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..b {
                let off = (i * c + ch) * hw;
                for (p, &v) in plane(i).iter().enumerate() {
                    let xh = (v - mean) * inv_std;
                    if train {
                        self.x_hat[off + p] = xh;
                    }
                    out[off + p] = g * xh + be;
                }
            }
        }
        self.trained = train;
        Tensor4::new(x.shape(), out)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let [b, c, h, w] = grad.shape();
        let hw = h * w;
        let gd = grad.data();
        let mut out = vec![T::zero(); gd.len()];
        let n = T::from_usize(b * hw).expect("count");
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let inv_std = self.inv_std[ch];
            if !self.trained {
                for i in 0..b {
                    let off = (i * c + ch) * hw;
                    for p in off..off + hw {
                        out[p] = gd[p] * g * inv_std;
                    }
                }
                continue;
            }
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..b {
                let off = (i * c + ch) * hw;
                for p in off..off + hw {
                    sum_dy += gd[p];
                    sum_dy_xh += gd[p] * self.x_hat[p];
                }
            }
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            // dx = g * inv_std / n * (n * dy - sum(dy) - x_hat * sum(dy * x_hat))
            let scale = g * inv_std / n;
            for i in 0..b {
                let off = (i * c + ch) * hw;
                for p in off..off + hw {
                    out[p] = scale * (n * gd[p] - sum_dy - self.x_hat[p] * sum_dy_xh);
                }
            }
        }
        Tensor4::new(grad.shape(), out).expect("same shape")
    }
}

/// 2x2 max pooling with stride 2; ties route to the first position in
/// row-major window order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
        let [b, c, h, w] = x.shape();
        if h < 2 || w < 2 {
            return Err(NnError::Shape(format!("maxpool needs at least 2x2, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        self.argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for idx in [
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ] {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    self.argmax.push(best);
                    out.push(xd[best]);
                }
            }
        }
        self.in_shape = x.shape();
        Tensor4::new([b, c, oh, ow], out)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let mut out = Tensor4::zeros(self.in_shape);
        let od = out.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad.data()) {
            od[idx] += g;
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: [usize; 4],
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let [b, c, h, w] = x.shape();
        let hw = h * w;
        let n = T::from_usize(hw).expect("size");
        let data = x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() / n).collect();
        self.in_shape = x.shape();
        Tensor4::new([b, c, 1, 1], data).expect("shape")
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let [_, _, h, w] = self.in_shape;
        let hw = h * w;
        let n = T::from_usize(hw).expect("size");
        let mut data = Vec::with_capacity(grad.len() * hw);
        for &g in grad.data() {
            data.extend(std::iter::repeat(g / n).take(hw));
        }
        Tensor4::new(self.in_shape, data).expect("shape")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    in_shape: [usize; 4],
}

impl Flatten {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.in_shape = x.shape();
        x.clone().reshaped([x.batch(), x.item_len(), 1, 1]).expect("same length")
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        grad.clone().reshaped(self.in_shape).expect("same length")
    }
}

/// Affine map on flattened items: `y = x W^T + b`, `W` is `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::kaiming(vec![out_features, in_features], in_features, rng),
            bias: Param::filled(vec![out_features], T::zero()),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
        if x.item_len() != self.in_features {
            return Err(NnError::Shape(format!(
                "linear expects {} features, got {}",
                self.in_features,
                x.item_len()
            )));
        }
        let b = x.batch();
        let mut out = vec![T::zero(); b * self.out_features];
        for row in out.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            b,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            false,
            &self.weight.value,
            true,
            T::one(),
            &mut out,
        );
        self.input = Some(x.clone());
        Tensor4::new([b, self.out_features, 1, 1], out)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        let x = self.input.take().expect("linear backward without forward");
        let b = x.batch();
        let gd = grad.data();
        for row in gd.chunks_exact(self.out_features) {
            for (acc, &g) in self.bias.grad.iter_mut().zip(row) {
                *acc += g;
            }
        }
        // dW += grad^T x
        gemm(
            self.out_features,
            b,
            self.in_features,
            T::one(),
            gd,
            true,
            x.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        let mut dx = vec![T::zero(); b * self.in_features];
        gemm(
            b,
            self.out_features,
            self.in_features,
            T::one(),
            gd,
            false,
            &self.weight.value,
            false,
            T::zero(),
            &mut dx,
        );
        Tensor4::new(x.shape(), dx).expect("shape")
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Relu(Relu),
    BatchNorm2d(BatchNorm2d<T>),
    MaxPool2d(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>, NnError> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::BatchNorm2d(l) => l.forward(x, train),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => Ok(l.forward(x)),
            Layer::Flatten(l) => Ok(l.forward(x)),
            Layer::Linear(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Tensor4<T> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::BatchNorm2d(l) => l.backward(grad),
            Layer::MaxPool2d(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
        }
    }

    /// Learnable parameters with their local names.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm2d(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => Vec::new(),
        }
    }

    /// Parameters and non-learnable state, in checkpoint order.
    pub fn state(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        match self {
            Layer::Conv2d(l) => vec![
                ("weight", l.weight.dims.clone(), &l.weight.value[..]),
                ("bias", l.bias.dims.clone(), &l.bias.value[..]),
            ],
            Layer::BatchNorm2d(l) => vec![
                ("gamma", l.gamma.dims.clone(), &l.gamma.value[..]),
                ("beta", l.beta.dims.clone(), &l.beta.value[..]),
                ("running_mean", vec![l.ch], &l.running_mean[..]),
                ("running_var", vec![l.ch], &l.running_var[..]),
            ],
            Layer::Linear(l) => vec![
                ("weight", l.weight.dims.clone(), &l.weight.value[..]),
                ("bias", l.bias.dims.clone(), &l.bias.value[..]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
            Layer::BatchNorm2d(l) => vec![
                ("gamma", &mut l.gamma.value),
                ("beta", &mut l.beta.value),
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            Layer::Linear(l) => vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
            _ => Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}
