//! Dual-head convolutional network.
//!
//! The embedding stack computes the deep representation `f(x)` in R^d; the
//! classifier head maps it to class probabilities through one dense layer and
//! a softmax. Two backward entry points share one forward cache:
//! [`DualHeadNet::backward_all`] propagates cross-entropy through every layer,
//! while [`DualHeadNet::backward_embedding_only`] takes a gradient on the
//! representation and touches only the embedding parameters.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use num_traits::Float;
use rand::Rng as _;

use crate::dataio::ImageShape;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Floating-point type the network computes in.
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + std::iter::Sum + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub const DEFAULT_KERNEL: usize = 5;

/// One token of the layer grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerToken {
    /// `C<filters>` or `C<filters>k<kernel>`: convolution, ReLU, 2x2 max-pool.
    Conv { filters: usize, kernel: usize },
    /// `F<units>`: dense layer followed by ReLU.
    Dense { units: usize },
}

/// Textual architecture such as `C6-C16-F400-F120`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub tokens: Vec<LayerToken>,
}

impl ArchSpec {
    pub fn embedding_dim(&self) -> Option<usize> {
        match self.tokens.last()? {
            LayerToken::Dense { units } => Some(*units),
            LayerToken::Conv { .. } => None,
        }
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |t: &str| Error::invalid(format!("bad layer token '{t}' in '{s}'"));
        let mut tokens = Vec::new();
        for t in s.split('-').map(str::trim) {
            let (head, rest) = t.split_at(t.chars().next().map_or(0, char::len_utf8));
            let token = match head {
                "C" | "c" => {
                    let (f, k) = match rest.split_once(['k', 'K']) {
                        Some((f, k)) => (f, k.parse().map_err(|_| bad(t))?),
                        None => (rest, DEFAULT_KERNEL),
                    };
                    LayerToken::Conv {
                        filters: f.parse().map_err(|_| bad(t))?,
                        kernel: k,
                    }
                }
                "F" | "f" => LayerToken::Dense {
                    units: rest.parse().map_err(|_| bad(t))?,
                },
                _ => return Err(bad(t)),
            };
            let zero = match token {
                LayerToken::Conv { filters, kernel } => filters == 0 || kernel == 0,
                LayerToken::Dense { units } => units == 0,
            };
            if zero {
                return Err(bad(t));
            }
            tokens.push(token);
        }
        if !matches!(tokens.last(), Some(LayerToken::Dense { .. })) {
            return Err(Error::invalid(format!(
                "architecture '{s}' must end with a dense layer giving the embedding"
            )));
        }
        Ok(ArchSpec { tokens })
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| match *t {
                LayerToken::Conv { filters, kernel } if kernel == DEFAULT_KERNEL => {
                    format!("C{filters}")
                }
                LayerToken::Conv { filters, kernel } => format!("C{filters}k{kernel}"),
                LayerToken::Dense { units } => format!("F{units}"),
            })
            .collect();
        write!(f, "{}", parts.join("-"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
    Relu,
    MaxPool,
}

#[derive(Debug, Clone)]
struct Layer<T> {
    kind: LayerKind,
    input: Dims,
    output: Dims,
    kernel: usize,
    weights: Vec<T>,
    bias: Vec<T>,
    weights_velocity: Vec<T>,
    bias_velocity: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn conv(input: Dims, filters: usize, kernel: usize) -> Result<Self> {
        if input.h < kernel || input.w < kernel {
            return Err(Error::invalid(format!(
                "{kernel}x{kernel} convolution does not fit {}x{} input",
                input.h, input.w
            )));
        }
        let output = Dims {
            c: filters,
            h: input.h - kernel + 1,
            w: input.w - kernel + 1,
        };
        Ok(Layer::with_params(
            LayerKind::Conv,
            input,
            output,
            kernel,
            filters * input.c * kernel * kernel,
            filters,
        ))
    }

    fn dense(input: Dims, units: usize) -> Self {
        let output = Dims { c: units, h: 1, w: 1 };
        Layer::with_params(LayerKind::Dense, input, output, 0, units * input.len(), units)
    }

    fn relu(input: Dims) -> Self {
        Layer::with_params(LayerKind::Relu, input, input, 0, 0, 0)
    }

    fn pool(input: Dims) -> Result<Self> {
        if input.h < 2 || input.w < 2 {
            return Err(Error::invalid(format!(
                "2x2 max-pool does not fit {}x{} input",
                input.h, input.w
            )));
        }
        let output = Dims {
            c: input.c,
            h: input.h / 2,
            w: input.w / 2,
        };
        Ok(Layer::with_params(LayerKind::MaxPool, input, output, 2, 0, 0))
    }

    fn with_params(
        kind: LayerKind,
        input: Dims,
        output: Dims,
        kernel: usize,
        n_weights: usize,
        n_bias: usize,
    ) -> Self {
        Layer {
            kind,
            input,
            output,
            kernel,
            weights: vec![T::zero(); n_weights],
            bias: vec![T::zero(); n_bias],
            weights_velocity: vec![T::zero(); n_weights],
            bias_velocity: vec![T::zero(); n_bias],
        }
    }

    fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Dense)
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.input.c * self.kernel * self.kernel,
            LayerKind::Dense => self.input.len(),
            _ => 0,
        }
    }

    fn name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
        }
    }

    /// Forward over a batch; returns the output and, for max-pool, argmax offsets.
    fn forward(&self, x: &[T], batch: usize) -> (Vec<T>, Vec<u32>) {
        let (inl, outl) = (self.input.len(), self.output.len());
        let mut y = vec![T::zero(); batch * outl];
        let mut argmax = Vec::new();
        match self.kind {
            LayerKind::Dense => {
                for (xb, yb) in x.chunks_exact(inl).zip(y.chunks_exact_mut(outl)) {
                    for (o, yo) in yb.iter_mut().enumerate() {
                        let row = &self.weights[o * inl..(o + 1) * inl];
                        let mut acc = self.bias[o];
                        for (w, xi) in row.iter().zip(xb) {
                            acc = acc + *w * *xi;
                        }
                        *yo = acc;
                    }
                }
            }
            LayerKind::Conv => {
                let Dims { c: ic, h: ih, w: iw } = self.input;
                let Dims { c: oc, h: oh, w: ow } = self.output;
                let k = self.kernel;
                for (xb, yb) in x.chunks_exact(inl).zip(y.chunks_exact_mut(outl)) {
                    for o in 0..oc {
                        let out = &mut yb[o * oh * ow..(o + 1) * oh * ow];
                        out.iter_mut().for_each(|v| *v = self.bias[o]);
                        for ci in 0..ic {
                            let plane = &xb[ci * ih * iw..(ci + 1) * ih * iw];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = self.weights[((o * ic + ci) * k + ky) * k + kx];
                                    for oy in 0..oh {
                                        let src = &plane[(oy + ky) * iw + kx..(oy + ky) * iw + kx + ow];
                                        let dst = &mut out[oy * ow..(oy + 1) * ow];
                                        for (d, s) in dst.iter_mut().zip(src) {
                                            *d = *d + wv * *s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Relu => {
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi = if *xi > T::zero() { *xi } else { T::zero() };
                }
            }
            LayerKind::MaxPool => {
                let Dims { c, h: ih, w: iw } = self.input;
                let Dims { h: oh, w: ow, .. } = self.output;
                argmax = vec![0u32; batch * outl];
                for b in 0..batch {
                    let xb = &x[b * inl..(b + 1) * inl];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = ch * ih * iw + (2 * oy) * iw + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = ch * ih * iw + (2 * oy + dy) * iw + 2 * ox + dx;
                                    if xb[idx] > xb[best] {
                                        best = idx;
                                    }
                                }
                                let out = b * outl + (ch * oh + oy) * ow + ox;
                                y[out] = xb[best];
                                argmax[out] = best as u32;
                            }
                        }
                    }
                }
            }
        }
        (y, argmax)
    }

    /// Backward over a batch. Accumulates parameter gradients into `gw`/`gb`
    /// and returns the gradient with respect to the layer input.
    fn backward(
        &self,
        x: &[T],
        y: &[T],
        argmax: &[u32],
        dy: &[T],
        batch: usize,
        gw: &mut [T],
        gb: &mut [T],
    ) -> Vec<T> {
        let (inl, outl) = (self.input.len(), self.output.len());
        let mut dx = vec![T::zero(); batch * inl];
        match self.kind {
            LayerKind::Dense => {
                for b in 0..batch {
                    let xb = &x[b * inl..(b + 1) * inl];
                    let dyb = &dy[b * outl..(b + 1) * outl];
                    let dxb = &mut dx[b * inl..(b + 1) * inl];
                    for (o, &g) in dyb.iter().enumerate() {
                        if g == T::zero() {
                            continue;
                        }
                        gb[o] = gb[o] + g;
                        let row = &self.weights[o * inl..(o + 1) * inl];
                        let grow = &mut gw[o * inl..(o + 1) * inl];
                        for ((gwi, xi), (dxi, wi)) in
                            grow.iter_mut().zip(xb).zip(dxb.iter_mut().zip(row))
                        {
                            *gwi = *gwi + g * *xi;
                            *dxi = *dxi + g * *wi;
                        }
                    }
                }
            }
            LayerKind::Conv => {
                let Dims { c: ic, h: ih, w: iw } = self.input;
                let Dims { c: oc, h: oh, w: ow } = self.output;
                let k = self.kernel;
                for b in 0..batch {
                    let xb = &x[b * inl..(b + 1) * inl];
                    let dyb = &dy[b * outl..(b + 1) * outl];
                    let dxb = &mut dx[b * inl..(b + 1) * inl];
                    for o in 0..oc {
                        let g = &dyb[o * oh * ow..(o + 1) * oh * ow];
                        gb[o] = gb[o] + g.iter().copied().sum::<T>();
                        for ci in 0..ic {
                            let plane = &xb[ci * ih * iw..(ci + 1) * ih * iw];
                            let dplane = &mut dxb[ci * ih * iw..(ci + 1) * ih * iw];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((o * ic + ci) * k + ky) * k + kx;
                                    let wv = self.weights[widx];
                                    let mut acc = T::zero();
                                    for oy in 0..oh {
                                        let row = (oy + ky) * iw + kx;
                                        let grow = &g[oy * ow..(oy + 1) * ow];
                                        for ((s, d), gv) in plane[row..row + ow]
                                            .iter()
                                            .zip(dplane[row..row + ow].iter_mut())
                                            .zip(grow)
                                        {
                                            acc = acc + *gv * *s;
                                            *d = *d + wv * *gv;
                                        }
                                    }
                                    gw[widx] = gw[widx] + acc;
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Relu => {
                for ((dxi, yi), dyi) in dx.iter_mut().zip(y).zip(dy) {
                    *dxi = if *yi > T::zero() { *dyi } else { T::zero() };
                }
            }
            LayerKind::MaxPool => {
                for b in 0..batch {
                    for j in 0..outl {
                        let src = b * inl + argmax[b * outl + j] as usize;
                        dx[src] = dx[src] + dy[b * outl + j];
                    }
                }
            }
        }
        dx
    }
}

/// Per-tensor gradients aligned with [`DualHeadNet::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
    embedding_tensors: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn embedding(&self) -> &[Vec<T>] {
        &self.tensors[..self.embedding_tensors]
    }

    pub fn classifier(&self) -> &[Vec<T>] {
        &self.tensors[self.embedding_tensors..]
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::invalid("gradient sets have different shapes"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|x| *x == T::zero())
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub batch: usize,
    /// Row-major `batch x d`.
    pub embeddings: Vec<T>,
    /// Row-major `batch x k`.
    pub logits: Vec<T>,
    /// Row-major `batch x k`.
    pub probabilities: Vec<T>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    batch: usize,
    /// activations[i] is the input to layer i; the last entry is the logits.
    activations: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    probabilities: Vec<T>,
}

/// How parameters are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zero,
    /// Kaiming-uniform on fan-in with zero biases.
    KaimingUniform { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct DualHeadNet<T = f32> {
    arch: ArchSpec,
    input_shape: ImageShape,
    classes: usize,
    embedding: Vec<Layer<T>>,
    classifier: Vec<Layer<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> DualHeadNet<T> {
    pub fn new(arch: &ArchSpec, input_shape: ImageShape, classes: usize, init: Init) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("network needs at least one class"));
        }
        let mut dims = Dims {
            c: input_shape.channels,
            h: input_shape.height,
            w: input_shape.width,
        };
        let mut embedding = Vec::new();
        for token in &arch.tokens {
            match *token {
                LayerToken::Conv { filters, kernel } => {
                    let conv = Layer::conv(dims, filters, kernel)?;
                    let relu = Layer::relu(conv.output);
                    let pool = Layer::pool(conv.output)?;
                    dims = pool.output;
                    embedding.extend([conv, relu, pool]);
                }
                LayerToken::Dense { units } => {
                    let dense = Layer::dense(dims, units);
                    let relu = Layer::relu(dense.output);
                    dims = dense.output;
                    embedding.extend([dense, relu]);
                }
            }
        }
        if dims.len() == 0 {
            return Err(Error::invalid("embedding has zero width"));
        }
        let classifier = vec![Layer::dense(dims, classes)];
        let mut net = DualHeadNet {
            arch: arch.clone(),
            input_shape,
            classes,
            embedding,
            classifier,
            cache: None,
        };
        if let Init::KaimingUniform { seed } = init {
            let mut rng = rng_from_seed(seed);
            for layer in net.embedding.iter_mut().chain(net.classifier.iter_mut()) {
                if !layer.has_params() {
                    continue;
                }
                let bound = (6.0 / layer.fan_in() as f64).sqrt();
                for w in layer.weights.iter_mut() {
                    *w = T::of(rng.random_range(-bound..bound));
                }
            }
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.last().map_or(0, |l| l.output.len())
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.embedding.iter().chain(self.classifier.iter())
    }

    fn embedding_tensor_count(&self) -> usize {
        2 * self.embedding.iter().filter(|l| l.has_params()).count()
    }

    /// Weight and bias tensors, embedding layers first.
    pub fn parameters(&self) -> Vec<&[T]> {
        self.layers()
            .filter(|l| l.has_params())
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        self.cache = None;
        self.embedding
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .filter(|l| l.has_params())
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Names like `embedding.3.dense.weight`, aligned with [`Self::parameters`].
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (part, layers) in [("embedding", &self.embedding), ("classifier", &self.classifier)] {
            for (i, l) in layers.iter().enumerate().filter(|(_, l)| l.has_params()) {
                names.push(format!("{part}.{i}.{}.weight", l.name()));
                names.push(format!("{part}.{i}.{}.bias", l.name()));
            }
        }
        names
    }

    /// Kinds of the parameterized layers, one per weight/bias pair.
    pub fn parameter_layer_kinds(&self) -> Vec<LayerKind> {
        self.layers()
            .filter(|l| l.has_params())
            .map(|l| l.kind)
            .collect()
    }

    /// Layer kinds of the embedding stack in order.
    pub fn embedding_layer_kinds(&self) -> Vec<LayerKind> {
        self.embedding.iter().map(|l| l.kind).collect()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self.parameters().iter().map(|p| vec![T::zero(); p.len()]).collect(),
            embedding_tensors: self.embedding_tensor_count(),
        }
    }

    fn check_input(&self, inputs: &[T], batch: usize) -> Result<()> {
        let per = self.input_shape.len();
        if batch == 0 || inputs.len() != batch * per {
            return Err(Error::invalid(format!(
                "expected {batch} inputs of shape {} ({} values), got {} values",
                self.input_shape,
                batch * per,
                inputs.len()
            )));
        }
        Ok(())
    }

    fn run(&self, inputs: &[T], batch: usize) -> Cache<T> {
        let mut activations = vec![inputs.to_vec()];
        let mut argmax = Vec::new();
        for layer in self.layers() {
            let (y, am) = layer.forward(activations.last().expect("input present"), batch);
            activations.push(y);
            argmax.push(am);
        }
        let logits = activations.last().expect("logits present");
        let mut probabilities = vec![T::zero(); logits.len()];
        for (l, p) in logits
            .chunks_exact(self.classes)
            .zip(probabilities.chunks_exact_mut(self.classes))
        {
            softmax(l, p);
        }
        Cache {
            batch,
            activations,
            argmax,
            probabilities,
        }
    }

    fn output_of(&self, cache: &Cache<T>) -> ForwardOutput<T> {
        ForwardOutput {
            batch: cache.batch,
            embeddings: cache.activations[self.embedding.len()].clone(),
            logits: cache.activations[cache.activations.len() - 1].clone(),
            probabilities: cache.probabilities.clone(),
        }
    }

    /// Forward pass over `batch` row-major inputs; caches activations for backward.
    pub fn forward(&mut self, inputs: &[T], batch: usize) -> Result<ForwardOutput<T>> {
        self.check_input(inputs, batch)?;
        let cache = self.run(inputs, batch);
        let out = self.output_of(&cache);
        self.cache = Some(cache);
        Ok(out)
    }

    /// Forward pass without touching the cache.
    pub fn infer(&self, inputs: &[T], batch: usize) -> Result<ForwardOutput<T>> {
        self.check_input(inputs, batch)?;
        Ok(self.output_of(&self.run(inputs, batch)))
    }

    fn cache(&self) -> Result<&Cache<T>> {
        self.cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a current forward pass".into()))
    }

    /// Back-propagates `grad` at the output of `layers[..end]` down to the input,
    /// writing parameter gradients starting at tensor `first_tensor`.
    fn backprop(
        &self,
        cache: &Cache<T>,
        end: usize,
        mut grad: Vec<T>,
        grads: &mut Gradients<T>,
    ) {
        let layers: Vec<&Layer<T>> = self.layers().collect();
        let mut tensor = 2 * layers[..end].iter().filter(|l| l.has_params()).count();
        for i in (0..end).rev() {
            let layer = layers[i];
            let (mut gw, mut gb) = (Vec::new(), Vec::new());
            if layer.has_params() {
                tensor -= 2;
                gw = std::mem::take(&mut grads.tensors[tensor]);
                gb = std::mem::take(&mut grads.tensors[tensor + 1]);
            }
            let need_input_grad = i > 0;
            let dx = layer.backward(
                &cache.activations[i],
                &cache.activations[i + 1],
                &cache.argmax[i],
                &grad,
                cache.batch,
                &mut gw,
                &mut gb,
            );
            if layer.has_params() {
                grads.tensors[tensor] = gw;
                grads.tensors[tensor + 1] = gb;
            }
            if !need_input_grad {
                break;
            }
            grad = dx;
        }
    }

    /// Mean cross-entropy gradient over the cached batch, through all layers.
    pub fn backward_all(&self, targets: &[usize]) -> Result<Gradients<T>> {
        let cache = self.cache()?;
        if targets.len() != cache.batch {
            return Err(Error::invalid(format!(
                "{} targets for a batch of {}",
                targets.len(),
                cache.batch
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.classes) {
            return Err(Error::invalid(format!("target class {bad} out of range")));
        }
        let scale = T::one() / T::of(cache.batch as f64);
        let mut dlogits = cache.probabilities.clone();
        for (row, &t) in dlogits.chunks_exact_mut(self.classes).zip(targets) {
            row[t] = row[t] - T::one();
            row.iter_mut().for_each(|g| *g = *g * scale);
        }
        let mut grads = self.zero_gradients();
        let end = self.embedding.len() + self.classifier.len();
        self.backprop(cache, end, dlogits, &mut grads);
        Ok(grads)
    }

    /// Back-propagates a gradient on the embeddings through the embedding stack only.
    pub fn backward_embedding_only(&self, embedding_grad: &[T]) -> Result<Gradients<T>> {
        let cache = self.cache()?;
        let d = self.embedding_dim();
        if embedding_grad.len() != cache.batch * d {
            return Err(Error::invalid(format!(
                "embedding gradient has {} values, expected {}x{d}",
                embedding_grad.len(),
                cache.batch
            )));
        }
        let mut grads = self.zero_gradients();
        self.backprop(cache, self.embedding.len(), embedding_grad.to_vec(), &mut grads);
        Ok(grads)
    }

    /// SGD with momentum: `v <- momentum * v + g; theta <- theta - lr * v`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: f64, momentum: f64) -> Result<()> {
        let names = self.parameter_names();
        let shapes: Vec<usize> = self.parameters().iter().map(|p| p.len()).collect();
        if grads.tensors.len() != shapes.len()
            || grads.tensors.iter().zip(&shapes).any(|(g, &n)| g.len() != n)
        {
            return Err(Error::invalid("gradient set does not match network parameters"));
        }
        if let Some(i) = grads
            .tensors
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric(format!("non-finite gradient in {}", names[i])));
        }
        let lr = T::of(learning_rate);
        let mu = T::of(momentum);
        let mut g = grads.tensors.iter();
        for layer in self
            .embedding
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .filter(|l| l.has_params())
        {
            for (theta, vel, grad) in [
                (&mut layer.weights, &mut layer.weights_velocity, g.next()),
                (&mut layer.bias, &mut layer.bias_velocity, g.next()),
            ] {
                let grad = grad.expect("length checked");
                for ((t, v), gi) in theta.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = mu * *v + *gi;
                    *t = *t - lr * *v;
                }
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Copies the network into another precision. Momentum is reset.
    pub fn cast<U: Scalar>(&self) -> DualHeadNet<U> {
        let convert = |layers: &[Layer<T>]| -> Vec<Layer<U>> {
            layers
                .iter()
                .map(|l| {
                    let cv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
                    Layer {
                        kind: l.kind,
                        input: l.input,
                        output: l.output,
                        kernel: l.kernel,
                        weights: cv(&l.weights),
                        bias: cv(&l.bias),
                        weights_velocity: vec![U::zero(); l.weights.len()],
                        bias_velocity: vec![U::zero(); l.bias.len()],
                    }
                })
                .collect()
        };
        DualHeadNet {
            arch: self.arch.clone(),
            input_shape: self.input_shape,
            classes: self.classes,
            embedding: convert(&self.embedding),
            classifier: convert(&self.classifier),
            cache: None,
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum = sum + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / sum);
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DS3CKPT\x01";

impl DualHeadNet<f32> {
    /// Writes the checkpoint container:
    ///
    /// ```text
    /// magic "DS3CKPT\x01"
    /// u32 arch-string length, UTF-8 arch string
    /// u32 channels, height, width, classes
    /// u32 tensor count, then per tensor: u32 length, length x f32
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn save(&self, mut w: impl Write) -> Result<()> {
        let arch = self.arch.to_string();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(arch.as_bytes())?;
        for v in [
            self.input_shape.channels,
            self.input_shape.height,
            self.input_shape.width,
            self.classes,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let params = self.parameters();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in params {
            w.write_all(&(p.len() as u32).to_le_bytes())?;
            for x in p {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let err = |pos: usize, m: &str| Error::Parse {
            location: format!("checkpoint byte {pos}"),
            message: m.to_string(),
        };
        if bytes.get(..8) != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(err(0, "bad checkpoint magic"));
        }
        pos += 8;
        let arch_len = read_u32(&bytes, &mut pos)?;
        let arch_start = pos;
        pos += arch_len;
        let arch_str = bytes
            .get(arch_start..pos)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| err(arch_start, "bad architecture string"))?;
        let arch: ArchSpec = arch_str.parse()?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&bytes, &mut pos)?;
        }
        let mut net = DualHeadNet::<f32>::new(
            &arch,
            ImageShape::new(dims[0], dims[1], dims[2]),
            dims[3],
            Init::Zero,
        )?;
        let count = read_u32(&bytes, &mut pos)?;
        let mut params = net.parameters_mut();
        if count != params.len() {
            return Err(err(pos, "tensor count does not match architecture"));
        }
        for p in params.iter_mut() {
            let n = read_u32(&bytes, &mut pos)?;
            if n != p.len() {
                return Err(err(pos, "tensor length does not match architecture"));
            }
            for x in p.iter_mut() {
                let b = bytes
                    .get(pos..pos + 4)
                    .ok_or_else(|| err(pos, "unexpected end of checkpoint"))?;
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                pos += 4;
            }
        }
        if pos != bytes.len() {
            return Err(err(pos, "trailing bytes after last tensor"));
        }
        Ok(net)
    }
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let b = bytes.get(*pos..*pos + 4).ok_or_else(|| Error::Parse {
        location: format!("checkpoint byte {pos}"),
        message: "unexpected end of checkpoint".into(),
    })?;
    *pos += 4;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}
