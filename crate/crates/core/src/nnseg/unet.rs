//! U-Net with unpadded convolutions: parameters, forward pass with cached
//! activations, and exact backpropagation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{self, BatchNormCache};
use super::tensor::TensorGrid;
use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_BASE_FEATURES: usize = 8;
pub const DEFAULT_INPUT_EXTENT: usize = 108;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    /// Number of resolution levels; `depth - 1` poolings.
    pub depth: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub batch_norm: bool,
    /// Drop probability after each convolution pair; 0 disables dropout.
    pub dropout: f64,
}

impl UNetConfig {
    pub fn new(depth: usize, base_features: usize, in_channels: usize) -> Self {
        UNetConfig {
            depth,
            base_features,
            in_channels,
            batch_norm: false,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::param("depth", "must be in 1..=8"));
        }
        if self.base_features == 0 {
            return Err(Error::param("base_features", "must be > 0"));
        }
        if self.in_channels == 0 {
            return Err(Error::param("in_channels", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Feature count at a level: `base * 2^level`.
    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        output_extent(self.depth, input)
    }

    /// Border lost on each side: `(input - output) / 2`.
    pub fn margin(&self) -> usize {
        // every valid input loses the same border; probe with a large one
        let probe = valid_input_extent(self.depth, 64 << self.depth);
        (probe - output_extent(self.depth, probe).expect("probe extent is valid")) / 2
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig::new(DEFAULT_DEPTH, DEFAULT_BASE_FEATURES, 1)
    }
}

/// Spatial extent after the full layer chain, or an error naming the level
/// at which the extent vanishes or cannot be pooled.
pub fn output_extent(depth: usize, input: usize) -> Result<usize> {
    let mut s = input as isize;
    for level in 0..depth {
        s -= 4;
        if s <= 0 {
            return Err(Error::InvalidParameter {
                name: "input extent",
                reason: format!("too small for depth {depth} (vanishes at level {level})"),
            });
        }
        if level + 1 < depth {
            if s % 2 != 0 {
                return Err(Error::InvalidParameter {
                    name: "input extent",
                    reason: format!("odd extent {s} before pooling at level {level}"),
                });
            }
            s /= 2;
        }
    }
    for _ in 1..depth {
        s = 2 * s - 4;
        if s <= 0 {
            return Err(Error::param("input extent", "too small for the decoder"));
        }
    }
    Ok(s as usize)
}

/// Smallest valid input extent that is at least `min`.
pub fn valid_input_extent(depth: usize, min: usize) -> usize {
    (min.max(1)..)
        .find(|&s| output_extent(depth, s).is_ok())
        .expect("valid extents exist")
}

/// Convolution kernel: weight layout `[out][in][k][k]` (for the transposed
/// up-convolution `[in][out][2][2]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            cin,
            cout,
            k,
            weight: vec![0.0; cin * cout * k * k],
            bias: vec![0.0; cout],
        }
    }

    fn he(cin: usize, cout: usize, k: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Conv::zeros(cin, cout, k);
        let normal = Normal::new(0.0, math::sqrt(2.0 / fan_in as f64)).expect("positive std");
        for w in &mut c.weight {
            *w = normal.sample(rng);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

/// Two 3×3 convolutions with ReLU, optionally followed by normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv1: Conv,
    pub conv2: Conv,
    pub norm: Option<BatchNorm>,
}

impl Block {
    fn new(cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv1: Conv::he(cin, cout, 3, cin * 9, rng),
            conv2: Conv::he(cout, cout, 3, cout * 9, rng),
            norm: cfg.batch_norm.then(|| BatchNorm::new(cout)),
        }
    }
}

/// All weights of the network. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: UNetConfig,
    /// One block per level, the last being the bottleneck.
    pub encoder: Vec<Block>,
    /// `ups[l]` maps level `l + 1` features to level `l`.
    pub ups: Vec<Conv>,
    /// `decoder[l]` consumes `[skip_l, up_l]`.
    pub decoder: Vec<Block>,
    pub output: Conv,
}

impl NetworkParams {
    /// He-normal initialization from a seed.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.depth;
        let mut encoder = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 { config.in_channels } else { config.features(l - 1) };
            encoder.push(Block::new(cin, config.features(l), &config, &mut rng));
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..d.saturating_sub(1) {
            let f = config.features(l);
            ups.push(Conv::he(2 * f, f, 2, 2 * f, &mut rng));
            decoder.push(Block::new(2 * f, f, &config, &mut rng));
        }
        let f0 = config.features(0);
        let output = Conv::he(f0, 1, 1, 2 * f0, &mut rng);
        Ok(NetworkParams {
            config,
            encoder,
            ups,
            decoder,
            output,
        })
    }

    /// Same architecture with every value zero (running variances included).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &Block)> {
        let enc = self.encoder.iter().enumerate().map(|(l, b)| (format!("enc{l}"), b));
        let dec = self.decoder.iter().enumerate().map(|(l, b)| (format!("dec{l}"), b));
        enc.chain(dec)
    }

    /// Trainable tensors in canonical order: encoder blocks by level, then
    /// up-convolutions, decoder blocks and the output convolution. Within a
    /// block: conv1 weight, bias, conv2 weight, bias, norm scale, shift.
    pub fn trainable(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (l, b) in self.encoder.iter().enumerate() {
            block_tensors(&mut out, &format!("enc{l}"), b);
        }
        for (l, c) in self.ups.iter().enumerate() {
            out.push((format!("up{l}.weight"), &c.weight));
            out.push((format!("up{l}.bias"), &c.bias));
        }
        for (l, b) in self.decoder.iter().enumerate() {
            block_tensors(&mut out, &format!("dec{l}"), b);
        }
        out.push(("out.weight".into(), &self.output.weight));
        out.push(("out.bias".into(), &self.output.bias));
        out
    }

    /// Mutable view of [`trainable`](Self::trainable), same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.encoder {
            block_tensors_mut(&mut out, b);
        }
        for c in &mut self.ups {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for b in &mut self.decoder {
            block_tensors_mut(&mut out, b);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    /// Every stored tensor: the trainable ones followed by the running
    /// normalization statistics of each block.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.trainable();
        for (name, b) in self.blocks() {
            if let Some(n) = &b.norm {
                out.push((format!("{name}.norm.running_mean"), &n.running_mean));
                out.push((format!("{name}.norm.running_var"), &n.running_var));
            }
        }
        out
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut i = 0;
        for t in self.trainable_mut() {
            f(i, t);
            i += 1;
        }
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            if let Some(n) = &mut b.norm {
                f(i, &mut n.running_mean);
                f(i + 1, &mut n.running_var);
                i += 2;
            }
        }
    }

    /// Overwrite every tensor, in [`tensors`](Self::tensors) order.
    pub fn load_tensors(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let lens: Vec<usize> = self.tensors().iter().map(|(_, t)| t.len()).collect();
        if values.len() != lens.len() {
            return Err(Error::shape(lens.len(), values.len()));
        }
        for (v, &n) in values.iter().zip(&lens) {
            if v.len() != n {
                return Err(Error::shape(n, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData("non-finite parameter".into()));
            }
        }
        self.for_each_tensor_mut(|i, t| t.copy_from_slice(&values[i]));
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a hash of every stored value; ties cached activations to the
    /// parameters that produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// `self -= lr * grad` over trainable tensors.
    pub fn sgd_step(&mut self, grad: &NetworkParams, lr: f64) -> Result<()> {
        if grad.config != self.config {
            return Err(Error::InvalidData("gradient architecture differs".into()));
        }
        let g: Vec<Vec<f64>> = grad.trainable().into_iter().map(|(_, t)| t.to_vec()).collect();
        for (p, g) in self.trainable_mut().into_iter().zip(&g) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }

    /// Fold the batch statistics of a training pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let caches = pass.encoder.iter().chain(pass.decoder.iter());
        let blocks = self.encoder.iter_mut().chain(self.decoder.iter_mut());
        for (b, c) in blocks.zip(caches) {
            if let (Some(n), Some(bc)) = (&mut b.norm, &c.norm) {
                if !bc.batch_stats {
                    continue;
                }
                for ch in 0..n.gamma.len() {
                    n.running_mean[ch] = (1.0 - BN_MOMENTUM) * n.running_mean[ch] + BN_MOMENTUM * bc.stats.mean[ch];
                    n.running_var[ch] = (1.0 - BN_MOMENTUM) * n.running_var[ch] + BN_MOMENTUM * bc.stats.var[ch];
                }
            }
        }
    }

    /// Sigmoid output in inference mode.
    pub fn predict(&self, input: &TensorGrid) -> Result<TensorGrid> {
        Ok(self.forward(input, Mode::Eval)?.prob)
    }

    /// Forward pass keeping every activation needed by [`backward`](Self::backward).
    pub fn forward(&self, input: &TensorGrid, mut mode: Mode<'_>) -> Result<ForwardPass> {
        let cfg = &self.config;
        if input.channels() != cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: format!("{} input channels", cfg.in_channels),
                found: format!("{}", input.channels()),
            });
        }
        output_extent(cfg.depth, input.height())?;
        output_extent(cfg.depth, input.width())?;
        let d = cfg.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut pool_argmax = Vec::with_capacity(d.saturating_sub(1));
        let mut cur = input.clone();
        for l in 0..d {
            let bc = block_forward(&self.encoder[l], cur, cfg.dropout, &mut mode)?;
            if l + 1 < d {
                let (p, arg) = layers::maxpool_forward(&bc.output)?;
                pool_argmax.push(arg);
                cur = p;
            } else {
                cur = bc.output.clone();
            }
            encoder.push(bc);
        }
        let mut decoder: Vec<Option<BlockCache>> = (0..d.saturating_sub(1)).map(|_| None).collect();
        for l in (0..d.saturating_sub(1)).rev() {
            let up = &self.ups[l];
            let u = layers::upconv_forward(&cur, &up.weight, &up.bias, up.cout)?;
            let skip = encoder[l].output.center_crop(u.height(), u.width())?;
            let cat = layers::concat(&skip, &u)?;
            let bc = block_forward(&self.decoder[l], cat, cfg.dropout, &mut mode)?;
            cur = bc.output.clone();
            decoder[l] = Some(bc);
        }
        let decoder: Vec<BlockCache> = decoder.into_iter().map(|b| b.expect("every level filled")).collect();
        let logits = layers::conv_forward(&cur, &self.output.weight, &self.output.bias, 1, 1)?;
        let mut prob = logits.clone();
        for v in prob.data_mut() {
            *v = layers::sigmoid(*v);
        }
        Ok(ForwardPass {
            input_shape: input.shape(),
            encoder,
            pool_argmax,
            decoder,
            head_input: cur,
            logits,
            prob,
            fingerprint: self.fingerprint(),
        })
    }

    /// Exact gradients of a loss with respect to every trainable tensor,
    /// given the loss gradient with respect to the output logits.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &TensorGrid) -> Result<NetworkParams> {
        if pass.fingerprint != self.fingerprint() {
            return Err(Error::InvalidData(
                "forward activations are stale: parameters changed since the forward pass".into(),
            ));
        }
        if pass.encoder.len() != self.config.depth || grad_logits.shape() != pass.logits.shape() {
            return Err(Error::shape(pass.logits.shape(), grad_logits.shape()));
        }
        let d = self.config.depth;
        let mut grads = self.zeros_like();
        let mut g = layers::conv_backward(
            &pass.head_input,
            &self.output.weight,
            grad_logits,
            1,
            &mut grads.output.weight,
            &mut grads.output.bias,
        );
        let mut skip_grads: Vec<Option<TensorGrid>> = (0..d).map(|_| None).collect();
        for l in 0..d.saturating_sub(1) {
            let g_cat = block_backward(&self.decoder[l], &pass.decoder[l], g, &mut grads.decoder[l]);
            let f = self.config.features(l);
            let (g_skip, g_up) = layers::split(&g_cat, f);
            skip_grads[l] = Some(layers::uncrop(&g_skip, pass.encoder[l].output.shape()));
            let below = if l + 1 < d - 1 {
                &pass.decoder[l + 1].output
            } else {
                &pass.encoder[d - 1].output
            };
            let up = &self.ups[l];
            let gu = &mut grads.ups[l];
            g = layers::upconv_backward(below, &up.weight, &g_up, &mut gu.weight, &mut gu.bias);
        }
        for l in (0..d).rev() {
            if let Some(s) = skip_grads[l].take() {
                for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                    *a += b;
                }
            }
            let g_in = block_backward(&self.encoder[l], &pass.encoder[l], g, &mut grads.encoder[l]);
            g = if l > 0 {
                layers::maxpool_backward(pass.encoder[l - 1].output.shape(), &pass.pool_argmax[l - 1], &g_in)
            } else {
                g_in
            };
        }
        Ok(grads)
    }
}

fn block_tensors<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, b: &'a Block) {
    out.push((format!("{name}.conv1.weight"), &b.conv1.weight));
    out.push((format!("{name}.conv1.bias"), &b.conv1.bias));
    out.push((format!("{name}.conv2.weight"), &b.conv2.weight));
    out.push((format!("{name}.conv2.bias"), &b.conv2.bias));
    if let Some(n) = &b.norm {
        out.push((format!("{name}.norm.gamma"), &n.gamma));
        out.push((format!("{name}.norm.beta"), &n.beta));
    }
}

fn block_tensors_mut<'a>(out: &mut Vec<&'a mut [f64]>, b: &'a mut Block) {
    out.push(&mut b.conv1.weight);
    out.push(&mut b.conv1.bias);
    out.push(&mut b.conv2.weight);
    out.push(&mut b.conv2.bias);
    if let Some(n) = &mut b.norm {
        out.push(&mut n.gamma);
        out.push(&mut n.beta);
    }
}

/// Training mode draws dropout masks and uses batch statistics.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub stats: BatchNormCache,
    pub batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: TensorGrid,
    a1: TensorGrid,
    a2: TensorGrid,
    norm: Option<NormCache>,
    /// Per-element dropout multiplier (0 or `1 / (1 - p)`).
    drop: Option<Vec<f64>>,
    output: TensorGrid,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input_shape: (usize, usize, usize),
    encoder: Vec<BlockCache>,
    pool_argmax: Vec<Vec<usize>>,
    decoder: Vec<BlockCache>,
    head_input: TensorGrid,
    pub logits: TensorGrid,
    pub prob: TensorGrid,
    fingerprint: u64,
}

impl ForwardPass {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }
}

fn block_forward(b: &Block, input: TensorGrid, dropout: f64, mode: &mut Mode<'_>) -> Result<BlockCache> {
    let mut a1 = layers::conv_forward(&input, &b.conv1.weight, &b.conv1.bias, b.conv1.cout, 3)?;
    layers::relu_forward(&mut a1);
    let mut a2 = layers::conv_forward(&a1, &b.conv2.weight, &b.conv2.bias, b.conv2.cout, 3)?;
    layers::relu_forward(&mut a2);
    let mut out = a2.clone();
    let mut norm = None;
    if let Some(n) = &b.norm {
        let (y, stats, batch_stats) = match mode {
            Mode::Train(_) => {
                let (y, c) = layers::batchnorm_forward_train(&out, &n.gamma, &n.beta);
                (y, c, true)
            }
            Mode::Eval => {
                let y = layers::batchnorm_forward_eval(&out, &n.gamma, &n.beta, &n.running_mean, &n.running_var);
                let inv: Vec<f64> = n.running_var.iter().map(|v| 1.0 / math::sqrt(v + layers::BN_EPS)).collect();
                let mut xhat = out.clone();
                for ch in 0..xhat.channels() {
                    for v in xhat.channel_mut(ch) {
                        *v = (*v - n.running_mean[ch]) * inv[ch];
                    }
                }
                let c = BatchNormCache {
                    xhat,
                    inv_std: inv,
                    mean: n.running_mean.clone(),
                    var: n.running_var.clone(),
                };
                (y, c, false)
            }
        };
        out = y;
        norm = Some(NormCache { stats, batch_stats });
    }
    let mut drop = None;
    if dropout > 0.0 {
        if let Mode::Train(rng) = mode {
            let keep = 1.0 / (1.0 - dropout);
            let m: Vec<f64> = (0..out.data().len())
                .map(|_| if rng.random::<f64>() < dropout { 0.0 } else { keep })
                .collect();
            for (v, s) in out.data_mut().iter_mut().zip(&m) {
                *v *= s;
            }
            drop = Some(m);
        }
    }
    Ok(BlockCache {
        input,
        a1,
        a2,
        norm,
        drop,
        output: out,
    })
}

fn block_backward(b: &Block, c: &BlockCache, mut g: TensorGrid, grads: &mut Block) -> TensorGrid {
    if let Some(m) = &c.drop {
        for (v, s) in g.data_mut().iter_mut().zip(m) {
            *v *= s;
        }
    }
    if let (Some(n), Some(nc), Some(gn)) = (&b.norm, &c.norm, &mut grads.norm) {
        g = if nc.batch_stats {
            layers::batchnorm_backward(&nc.stats, &n.gamma, &g, &mut gn.gamma, &mut gn.beta)
        } else {
            let mut gx = g.clone();
            for ch in 0..g.channels() {
                let gc = g.channel(ch);
                let xh = nc.stats.xhat.channel(ch);
                gn.beta[ch] += gc.iter().sum::<f64>();
                gn.gamma[ch] += gc.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                let s = n.gamma[ch] * nc.stats.inv_std[ch];
                for v in gx.channel_mut(ch) {
                    *v *= s;
                }
            }
            gx
        };
    }
    layers::relu_backward(&c.a2, &mut g);
    let mut g1 = layers::conv_backward(&c.a1, &b.conv2.weight, &g, 3, &mut grads.conv2.weight, &mut grads.conv2.bias);
    layers::relu_backward(&c.a1, &mut g1);
    layers::conv_backward(&c.input, &b.conv1.weight, &g1, 3, &mut grads.conv1.weight, &mut grads.conv1.bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> TensorGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        TensorGrid::from_vec(c, h, w, data).unwrap()
    }

    /// Extent propagation that walks an explicit layer list.
    fn symbolic_extent(depth: usize, input: usize) -> Option<usize> {
        enum L {
            Conv3,
            Pool,
            Up,
        }
        let mut chain = Vec::new();
        for l in 0..depth {
            chain.extend([L::Conv3, L::Conv3]);
            if l + 1 < depth {
                chain.push(L::Pool);
            }
        }
        for _ in 1..depth {
            chain.extend([L::Up, L::Conv3, L::Conv3]);
        }
        let mut s = input as i64;
        for layer in chain {
            s = match layer {
                L::Conv3 => s - 2,
                L::Pool if s % 2 == 0 => s / 2,
                L::Pool => return None,
                L::Up => 2 * s,
            };
            if s <= 0 {
                return None;
            }
        }
        Some(s as usize)
    }

    #[test]
    fn full_size_geometry_extent() {
        assert_eq!(output_extent(4, 572).unwrap(), 484);
    }

    #[test]
    fn desk_geometry_extent_matches_symbolic_chain() {
        assert_eq!(output_extent(2, 108).unwrap(), symbolic_extent(2, 108).unwrap());
        assert_eq!(output_extent(2, 108).unwrap(), 92);
        for d in 1..5 {
            for s in 1..300 {
                assert_eq!(output_extent(d, s).ok(), symbolic_extent(d, s), "depth {d} input {s}");
            }
        }
        assert_eq!(UNetConfig::default().margin(), 8);
        assert_eq!(UNetConfig::new(4, 64, 1).margin(), 44);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let p = NetworkParams::init(UNetConfig::default(), 1).unwrap();
        assert!(p.predict(&random_input(1, 16, 16, 0)).is_err());
        assert!(p.predict(&random_input(2, 52, 52, 0)).is_err());
    }

    #[test]
    fn zero_params_give_one_half() {
        let p = NetworkParams::init(UNetConfig::default(), 3).unwrap().zeros_like();
        let out = p.predict(&random_input(1, 108, 108, 4)).unwrap();
        assert_eq!(out.shape(), (1, 92, 92));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_schedule_doubles_and_halves() {
        let p = NetworkParams::init(UNetConfig::new(4, 64, 2), 0).unwrap();
        let enc: Vec<usize> = p.encoder.iter().map(|b| b.conv2.cout).collect();
        assert_eq!(enc, vec![64, 128, 256, 512]);
        assert_eq!(p.encoder[0].conv1.cin, 2);
        let ups: Vec<(usize, usize)> = p.ups.iter().map(|c| (c.cin, c.cout)).collect();
        assert_eq!(ups, vec![(128, 64), (256, 128), (512, 256)]);
        assert_eq!(p.decoder[2].conv1.cin, 512);
        assert_eq!(p.output.cin, 64);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = NetworkParams::init(UNetConfig::new(2, 2, 1), 5).unwrap();
        let x = random_input(1, 36, 36, 1);
        let pass = p.forward(&x, Mode::Eval).unwrap();
        let g = TensorGrid::zeros(1, 20, 20);
        assert!(p.backward(&pass, &g).is_ok());
        assert!(p.backward(&pass, &TensorGrid::zeros(1, 19, 20)).is_err());
        p.output.bias[0] += 1.0;
        assert!(p.backward(&pass, &g).is_err());
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let p = NetworkParams::init(UNetConfig::new(2, 4, 1), 2).unwrap();
        let pass = p.forward(&random_input(1, 52, 52, 9), Mode::Eval).unwrap();
        let g = p.backward(&pass, &TensorGrid::zeros(1, 36, 36)).unwrap();
        assert!(g.trainable().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tensor_roundtrip() {
        let mut cfg = UNetConfig::new(2, 2, 1);
        cfg.batch_norm = true;
        let p = NetworkParams::init(cfg, 11).unwrap();
        let values: Vec<Vec<f64>> = p.tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let mut q = p.zeros_like();
        q.load_tensors(&values).unwrap();
        assert_eq!(p, q);
        assert!(q.load_tensors(&values[1..]).is_err());
    }

    /// Loss `Σ c_i z_i` over logits, so its logit gradient is `c`.
    fn linear_loss(p: &NetworkParams, x: &TensorGrid, c: &TensorGrid, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pass = p.forward(x, Mode::Train(&mut rng)).unwrap();
        pass.logits.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    fn check_all_gradients(cfg: UNetConfig, extent: usize, stride: usize) {
        let mut p = NetworkParams::init(cfg, 21).unwrap();
        // zero biases put fully dead windows exactly on the ReLU kink
        let names: Vec<String> = p.trainable().iter().map(|(n, _)| n.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (t, name) in p.trainable_mut().into_iter().zip(&names) {
            if name.ends_with(".bias") {
                t.iter_mut().for_each(|v| *v = rng.random::<f64>() * 0.2 - 0.1);
            }
        }
        let x = random_input(cfg.in_channels, extent, extent, 7);
        let o = cfg.output_extent(extent).unwrap();
        let c = random_input(1, o, o, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pass = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        let grads = p.backward(&pass, &c).unwrap();
        let analytic: Vec<Vec<f64>> = grads.trainable().iter().map(|(_, t)| t.to_vec()).collect();
        let names: Vec<String> = p.trainable().iter().map(|(n, _)| n.clone()).collect();
        let h = 1e-5;
        for (ti, name) in names.iter().enumerate() {
            for i in (0..analytic[ti].len()).step_by(stride) {
                let mut plus = p.clone();
                plus.trainable_mut()[ti][i] += h;
                let mut minus = p.clone();
                minus.trainable_mut()[ti][i] -= h;
                let fd = (linear_loss(&plus, &x, &c, 99) - linear_loss(&minus, &x, &c, 99)) / (2.0 * h);
                let a = analytic[ti][i];
                let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-5, "{name}[{i}]: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_plain() {
        check_all_gradients(UNetConfig::new(2, 2, 2), 36, 1);
    }

    #[test]
    fn gradients_match_finite_differences_with_norm_and_dropout() {
        let mut cfg = UNetConfig::new(3, 2, 1);
        cfg.batch_norm = true;
        cfg.dropout = 0.2;
        check_all_gradients(cfg, 44, 3);
    }
}
