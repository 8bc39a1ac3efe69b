use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layer::Cache;
use crate::{Layer, LayerKind, NnError, Result, Scalar, Tensor};

/// Train mode draws dropout masks; eval mode makes dropout the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sequential network over a fixed per-sample input shape.
///
/// A network is not internally synchronized. Clone it to run read-only
/// inference elsewhere while training continues on the original.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    mode: Mode,
    rng_seed: u64,
    rng: ChaCha8Rng,
    caches: Option<(usize, Vec<Cache<T>>)>,
}

/// Collects layer kinds and builds a [`Network`] with inferred shapes.
#[derive(Clone, Debug)]
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    kinds: Vec<LayerKind>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            kinds: Vec::new(),
        }
    }

    pub fn layer(mut self, kind: LayerKind) -> Self {
        self.kinds.push(kind);
        self
    }

    pub fn conv(self, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        self.layer(LayerKind::Conv {
            out_channels,
            kernel_h,
            kernel_w,
        })
    }

    pub fn max_pool(self) -> Self {
        self.layer(LayerKind::MaxPool)
    }

    pub fn dense(self, out_units: usize) -> Self {
        self.layer(LayerKind::Dense { out_units })
    }

    pub fn relu(self) -> Self {
        self.layer(LayerKind::Relu)
    }

    pub fn tanh(self) -> Self {
        self.layer(LayerKind::Tanh)
    }

    pub fn softmax(self) -> Self {
        self.layer(LayerKind::Softmax)
    }

    pub fn dropout(self, rate: f32) -> Self {
        self.layer(LayerKind::Dropout { rate })
    }

    pub fn build<T: Scalar>(self, seed: u64) -> Result<Network<T>> {
        Network::from_kinds(&self.input_shape, &self.kinds, seed)
    }
}

impl<T: Scalar> Network<T> {
    pub fn from_kinds(input_shape: &[usize], kinds: &[LayerKind], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::Build(format!("invalid input shape {input_shape:?}")));
        }
        if kinds.is_empty() {
            return Err(NnError::Build("network has no layers".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(kinds.len());
        for (i, &kind) in kinds.iter().enumerate() {
            let layer = Layer::new(kind, &shape, &mut init_rng)
                .map_err(|e| NnError::Build(format!("layer {i} ({kind}): {e}")))?;
            shape = layer.out_shape().to_vec();
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            mode: Mode::Train,
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5_eedd_4090_u64),
            caches: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().expect("non-empty").out_shape()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Layer<T> {
        &mut self.layers[index]
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind()).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Restarts the dropout mask stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng_seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_eedd_4090_u64);
    }

    pub(crate) fn rng_state(&self) -> ChaCha8Rng {
        self.rng.clone()
    }

    pub(crate) fn restore_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params().iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut())
    }

    pub fn grads(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.grads().iter())
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grads());
    }

    /// Marks layers `[0, count)` frozen and the rest trainable. Frozen layers
    /// still propagate gradients but are skipped by the optimizer.
    pub fn freeze_prefix(&mut self, count: usize) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.set_frozen(i < count);
        }
    }

    /// Copies parameters of layers `[0, count)` from `other`, which must have
    /// the same kinds and shapes there.
    pub fn copy_prefix_from(&mut self, other: &Network<T>, count: usize) -> Result<()> {
        if count > self.layers.len() || count > other.layers.len() {
            return Err(NnError::Build(format!("prefix of {count} layers exceeds network depth")));
        }
        if self.input_shape != other.input_shape {
            return Err(NnError::ShapeMismatch {
                layer: "input".into(),
                expected: self.input_shape.clone(),
                actual: other.input_shape.clone(),
            });
        }
        for i in 0..count {
            let (dst, src) = (&self.layers[i], &other.layers[i]);
            if dst.kind() != src.kind() || dst.out_shape() != src.out_shape() {
                return Err(NnError::Build(format!(
                    "layer {i}: {} {:?} is incompatible with {} {:?}",
                    dst.kind(),
                    dst.out_shape(),
                    src.kind(),
                    src.out_shape()
                )));
            }
        }
        for i in 0..count {
            let params = other.layers[i].params().to_vec();
            self.layers[i].params_mut().clone_from_slice(&params);
        }
        Ok(())
    }

    /// Overwrites all parameters with those of an identically shaped network.
    pub fn copy_params_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.kinds() != other.kinds() {
            return Err(NnError::Build("parameter copy between different topologies".into()));
        }
        self.copy_prefix_from(other, self.layers.len())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(NnError::ShapeMismatch {
                layer: format!("layer 0 ({})", self.layers[0].kind()),
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    fn batched(&self, batch: usize, data: Vec<T>) -> Tensor<T> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.output_shape());
        Tensor::new(shape, data).expect("layer output shape")
    }

    /// Forward pass over a batch `[N, ..input_shape]`, retaining what
    /// [`Network::backward`] needs.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(input)?;
        let train = self.mode == Mode::Train;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.data().to_vec();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, batch, train, Some(&mut self.rng));
            caches.push(cache);
            x = y;
        }
        self.caches = Some((batch, caches));
        Ok(self.batched(batch, x))
    }

    /// Inference without caching. Dropout is always inert here.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(input)?;
        let mut x = input.data().to_vec();
        for layer in &self.layers {
            x = layer.forward(&x, batch, false, None).0;
        }
        Ok(self.batched(batch, x))
    }

    fn run_backward(&mut self, grad_output: &Tensor<T>, need_input_grad: bool) -> Result<Option<Vec<T>>> {
        let (batch, caches) = self.caches.take().ok_or(NnError::NoForward)?;
        let mut expected = vec![batch];
        expected.extend_from_slice(self.output_shape());
        if grad_output.shape() != expected.as_slice() {
            let last = self.layers.len() - 1;
            return Err(NnError::ShapeMismatch {
                layer: format!("layer {last} ({}) output gradient", self.layers[last].kind()),
                expected,
                actual: grad_output.shape().to_vec(),
            });
        }
        let mut g = grad_output.data().to_vec();
        let n = self.layers.len();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match layer.backward(&g, batch, cache, need) {
                Some(dx) => g = dx,
                None => {
                    debug_assert!(i == 0 || n == 0);
                    return Ok(None);
                }
            }
        }
        Ok(Some(g))
    }

    /// Accumulates parameter gradients for the last forward pass.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<()> {
        self.run_backward(grad_output, false).map(|_| ())
    }

    /// Like [`Network::backward`], also returning the input gradient.
    pub fn backward_with_input_grad(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.caches.as_ref().ok_or(NnError::NoForward)?.0;
        let g = self.run_backward(grad_output, true)?.expect("input gradient requested");
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, g)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::from_kinds(&self.input_shape, &self.kinds(), self.rng_seed)
            .expect("same topology");
        for (dst, src) in out.params_mut().zip(self.params()) {
            *dst = src.cast();
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.layers[i].set_frozen(l.is_frozen());
        }
        out.mode = self.mode;
        out
    }
}
