use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{NnError, Result, Scalar, Tensor};

/// The layer kinds a [`crate::Network`] can stack.
///
/// Convolutions use stride 1 with "same" zero padding (for even kernels the
/// extra row/column of padding goes after the input). Max pooling is 2x2 with
/// stride 2, flooring odd extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    MaxPool,
    Dense {
        out_units: usize,
    },
    Relu,
    Tanh,
    Softmax,
    Dropout {
        rate: f32,
    },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            LayerKind::Conv { .. } => 0,
            LayerKind::MaxPool => 1,
            LayerKind::Dense { .. } => 2,
            LayerKind::Relu => 3,
            LayerKind::Tanh => 4,
            LayerKind::Softmax => 5,
            LayerKind::Dropout { .. } => 6,
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerKind::Conv {
                out_channels,
                kernel_h,
                kernel_w,
            } => write!(f, "Conv({out_channels}x{kernel_h}x{kernel_w})"),
            LayerKind::MaxPool => write!(f, "MaxPool(2x2)"),
            LayerKind::Dense { out_units } => write!(f, "Dense({out_units})"),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::Tanh => write!(f, "Tanh"),
            LayerKind::Softmax => write!(f, "Softmax"),
            LayerKind::Dropout { rate } => write!(f, "Dropout({rate})"),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Input(Vec<T>),
    Output(Vec<T>),
    Argmax(Vec<u32>),
    Mask(Vec<T>),
    Identity,
}

/// One layer with its parameters and accumulated gradients.
///
/// Shapes are per sample; the batch dimension is implicit.
#[derive(Clone, Debug)]
pub struct Layer<T: Scalar> {
    kind: LayerKind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    params: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    frozen: bool,
}

fn chw(shape: &[usize], kind: &LayerKind) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(NnError::Build(format!(
            "{kind} needs a channels x height x width input, got {shape:?}"
        ))),
    }
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer for the given per-sample input shape, drawing weights
    /// uniformly in `±sqrt(6 / fan_in)` with zero biases.
    pub(crate) fn new(kind: LayerKind, in_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let features: usize = in_shape.iter().product();
        let (out_shape, params) = match kind {
            LayerKind::Conv {
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let [c, h, w] = chw(in_shape, &kind)?;
                if out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(NnError::Build(format!("degenerate {kind}")));
                }
                let fan_in = c * kernel_h * kernel_w;
                let weight = uniform_init(&[out_channels, c, kernel_h, kernel_w], fan_in, rng);
                let bias = Tensor::zeros(&[out_channels]);
                (vec![out_channels, h, w], vec![weight, bias])
            }
            LayerKind::MaxPool => {
                let [c, h, w] = chw(in_shape, &kind)?;
                if h < 2 || w < 2 {
                    return Err(NnError::Build(format!(
                        "MaxPool input {in_shape:?} is smaller than the 2x2 window"
                    )));
                }
                (vec![c, h / 2, w / 2], vec![])
            }
            LayerKind::Dense { out_units } => {
                if out_units == 0 {
                    return Err(NnError::Build("Dense(0)".into()));
                }
                let weight = uniform_init(&[out_units, features], features, rng);
                (vec![out_units], vec![weight, Tensor::zeros(&[out_units])])
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(NnError::Build(format!("dropout rate {rate} outside [0, 1)")));
                }
                (in_shape.to_vec(), vec![])
            }
            LayerKind::Relu | LayerKind::Tanh | LayerKind::Softmax => (in_shape.to_vec(), vec![]),
        };
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            kind,
            in_shape: in_shape.to_vec(),
            out_shape,
            params,
            grads,
            frozen: false,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub(crate) fn params_and_grads_mut(&mut self) -> (&mut [Tensor<T>], &mut [Tensor<T>]) {
        (&mut self.params, &mut self.grads)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub(crate) fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Forward pass over `batch` samples stored contiguously in `x`.
    /// Dropout masks are drawn from `rng` only when `train` is set.
    pub(crate) fn forward(
        &self,
        x: &[T],
        batch: usize,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<T>, Cache<T>) {
        debug_assert_eq!(x.len(), batch * self.in_len());
        match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let k = c * kernel_h * kernel_w;
                let p = h * w;
                let weight = self.params[0].data();
                let bias = self.params[1].data();
                let mut col = vec![T::zero(); k * p];
                let mut out = vec![T::zero(); batch * out_channels * p];
                for n in 0..batch {
                    im2col(&x[n * c * p..(n + 1) * c * p], [c, h, w], kernel_h, kernel_w, &mut col);
                    let o = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
                    T::gemm(out_channels, k, p, T::one(), weight, false, &col, false, T::zero(), o);
                    for (oc, plane) in o.chunks_exact_mut(p).enumerate() {
                        let b = bias[oc];
                        plane.iter_mut().for_each(|v| *v += b);
                    }
                }
                (out, Cache::Input(x.to_vec()))
            }
            LayerKind::MaxPool => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(batch * c * oh * ow);
                let mut arg = Vec::with_capacity(batch * c * oh * ow);
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * h * w;
                        let plane = &x[base..base + h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = 2 * oy * w + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                                    if plane[idx] > plane[best] {
                                        best = idx;
                                    }
                                }
                                out.push(plane[best]);
                                arg.push((base + best) as u32);
                            }
                        }
                    }
                }
                (out, Cache::Argmax(arg))
            }
            LayerKind::Dense { out_units } => {
                let f = self.in_len();
                let mut out = vec![T::zero(); batch * out_units];
                T::gemm(
                    batch,
                    f,
                    out_units,
                    T::one(),
                    x,
                    false,
                    self.params[0].data(),
                    true,
                    T::zero(),
                    &mut out,
                );
                let bias = self.params[1].data();
                for row in out.chunks_exact_mut(out_units) {
                    row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
                }
                (out, Cache::Input(x.to_vec()))
            }
            LayerKind::Relu => {
                let out: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                (out.clone(), Cache::Output(out))
            }
            LayerKind::Tanh => {
                let out: Vec<T> = x.iter().map(|v| v.tanh()).collect();
                (out.clone(), Cache::Output(out))
            }
            LayerKind::Softmax => {
                let width = self.in_len();
                let mut out = x.to_vec();
                for row in out.chunks_exact_mut(width) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v = *v / sum);
                }
                (out.clone(), Cache::Output(out))
            }
            LayerKind::Dropout { rate } => match (train, rng) {
                (true, Some(rng)) if rate > 0.0 => {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - rate as f64));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| if rng.gen::<f32>() < rate { T::zero() } else { keep })
                        .collect();
                    let out = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    (out, Cache::Mask(mask))
                }
                _ => (x.to_vec(), Cache::Identity),
            },
        }
    }

    /// Accumulates parameter gradients and, if requested, returns the gradient
    /// with respect to the layer input.
    pub(crate) fn backward(
        &mut self,
        gout: &[T],
        batch: usize,
        cache: Cache<T>,
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        debug_assert_eq!(gout.len(), batch * self.out_len());
        match (self.kind, cache) {
            (
                LayerKind::Conv {
                    out_channels,
                    kernel_h,
                    kernel_w,
                },
                Cache::Input(x),
            ) => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let k = c * kernel_h * kernel_w;
                let p = h * w;
                let mut dx = need_input_grad.then(|| vec![T::zero(); batch * c * p]);
                let mut dcols = need_input_grad.then(|| vec![T::zero(); k * p]);
                let mut col = vec![T::zero(); k * p];
                for n in 0..batch {
                    let g = &gout[n * out_channels * p..(n + 1) * out_channels * p];
                    im2col(&x[n * c * p..(n + 1) * c * p], [c, h, w], kernel_h, kernel_w, &mut col);
                    {
                        let (_, grads) = self.params_and_grads_mut();
                        let (gw, gb) = grads.split_at_mut(1);
                        T::gemm(out_channels, p, k, T::one(), g, false, &col, true, T::one(), gw[0].data_mut());
                        for (oc, plane) in g.chunks_exact(p).enumerate() {
                            gb[0].data_mut()[oc] += plane.iter().copied().sum::<T>();
                        }
                    }
                    if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols.as_mut()) {
                        T::gemm(k, out_channels, p, T::one(), self.params[0].data(), true, g, false, T::zero(), dcols);
                        col2im(dcols, [c, h, w], kernel_h, kernel_w, &mut dx[n * c * p..(n + 1) * c * p]);
                    }
                }
                dx
            }
            (LayerKind::MaxPool, Cache::Argmax(arg)) => need_input_grad.then(|| {
                let mut dx = vec![T::zero(); batch * self.in_len()];
                for (&g, &i) in gout.iter().zip(&arg) {
                    dx[i as usize] += g;
                }
                dx
            }),
            (LayerKind::Dense { out_units }, Cache::Input(x)) => {
                let f = self.in_len();
                {
                    let (_, grads) = self.params_and_grads_mut();
                    let (gw, gb) = grads.split_at_mut(1);
                    T::gemm(out_units, batch, f, T::one(), gout, true, &x, false, T::one(), gw[0].data_mut());
                    let gb = gb[0].data_mut();
                    for row in gout.chunks_exact(out_units) {
                        gb.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
                    }
                }
                need_input_grad.then(|| {
                    let mut dx = vec![T::zero(); batch * f];
                    T::gemm(batch, out_units, f, T::one(), gout, false, self.params[0].data(), false, T::zero(), &mut dx);
                    dx
                })
            }
            (LayerKind::Relu, Cache::Output(y)) => need_input_grad.then(|| {
                gout.iter()
                    .zip(&y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect()
            }),
            (LayerKind::Tanh, Cache::Output(y)) => need_input_grad
                .then(|| gout.iter().zip(&y).map(|(&g, &v)| g * (T::one() - v * v)).collect()),
            (LayerKind::Softmax, Cache::Output(y)) => need_input_grad.then(|| {
                let width = self.in_len();
                let mut dx = Vec::with_capacity(gout.len());
                for (g, p) in gout.chunks_exact(width).zip(y.chunks_exact(width)) {
                    let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    dx.extend(g.iter().zip(p).map(|(&a, &b)| b * (a - dot)));
                }
                dx
            }),
            (LayerKind::Dropout { .. }, Cache::Mask(mask)) => {
                need_input_grad.then(|| gout.iter().zip(&mask).map(|(&g, &m)| g * m).collect())
            }
            (LayerKind::Dropout { .. }, Cache::Identity) => need_input_grad.then(|| gout.to_vec()),
            (kind, _) => unreachable!("cache does not belong to {kind}"),
        }
    }
}

fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn im2col<T: Scalar>(x: &[T], [c, h, w]: [usize; 3], kh: usize, kw: usize, cols: &mut [T]) {
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let p = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * p..(ch + 1) * p];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                row += 1;
                for oy in 0..h {
                    let iy = oy + ky;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < pt || iy - pt >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pt) * w..(iy - pt + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox + kx;
                        *v = if ix < pl || ix - pl >= w { T::zero() } else { src[ix - pl] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], [c, h, w]: [usize; 3], kh: usize, kw: usize, dx: &mut [T]) {
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let p = h * w;
    let mut row = 0;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                row += 1;
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let dst = &mut dx[ch * p + (iy - pt) * w..ch * p + (iy - pt + 1) * w];
                    for ox in 0..w {
                        let ix = ox + kx;
                        if ix >= pl && ix - pl < w {
                            dst[ix - pl] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}
