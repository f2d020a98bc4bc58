//! Configurable 3D encoder-decoder shared by teacher and student.
//!
//! Level `l` of the encoder works at `base_filters * 2^l` channels and
//! resolution `input / 2^l`; the deepest level's output is the bottleneck.
//! Levels below the first open with a strided `2^3` convolution, every level
//! then applies two `3^3` conv + instance-norm + leaky-ReLU blocks. The
//! decoder mirrors this with `2^3` transposed convolutions and optionally
//! concatenates the matching encoder features (skip connections) before its
//! conv blocks. A `1^3` convolution maps to the region logits.

mod checkpoint;
pub mod ops;
mod real;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::{Activation, ConvGeometry, NormCache};
pub use real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_regions: usize,
    /// Number of downsampling steps.
    pub depth: usize,
    pub base_filters: usize,
    /// Either 0 or `depth`.
    pub skip_connections: usize,
    pub negative_slope: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            out_regions: 3,
            depth: 4,
            base_filters: 16,
            skip_connections: 4,
            negative_slope: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.out_regions == 0 {
            return Err(Error::Config("out_regions must be positive".into()));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("depth {} not in 1..=8", self.depth)));
        }
        if self.skip_connections != 0 && self.skip_connections != self.depth {
            return Err(Error::Config(format!(
                "skip_connections must be 0 or depth ({}), got {}",
                self.depth, self.skip_connections
            )));
        }
        if !(self.negative_slope >= 0.0 && self.negative_slope < 1.0) {
            return Err(Error::Config(format!(
                "negative_slope {} not in [0, 1)",
                self.negative_slope
            )));
        }
        Ok(())
    }

    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        NetworkConfig {
            in_channels,
            ..self.clone()
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn has_skips(&self) -> bool {
        self.skip_connections > 0
    }

    /// Checks that a spatial size can pass through all downsamplings.
    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << self.depth;
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::contract(format!(
                "spatial dims {dims:?} not divisible by 2^depth = {f}"
            )));
        }
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ParamId(usize);

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    out_channels: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    out_channels: usize,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Option<Conv>,
    blocks: [ConvBlock; 2],
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    blocks: [ConvBlock; 2],
}

/// Logits and deepest encoder activation for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<T = f32> {
    /// `(batch, regions, D, H, W)`, pre-activation.
    pub logits: Tensor<T>,
    /// `(batch, C_b, D/2^depth, H/2^depth, W/2^depth)`.
    pub bottleneck: Tensor<T>,
}

/// Gradients for every parameter, in declaration order.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32>(pub Vec<Vec<T>>);

impl<T: Real> Gradients<T> {
    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|&g| g.widen() * g.widen())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Activation<T>,
    norm: NormCache<T>,
    output: Vec<T>,
}

#[derive(Clone, Debug)]
struct SampleTape<T> {
    /// Inputs to each encoder level's down convolution (level >= 1).
    down_inputs: Vec<Option<Activation<T>>>,
    encoder_blocks: Vec<[BlockCache<T>; 2]>,
    /// Inputs to each decoder level's transposed convolution.
    up_inputs: Vec<Activation<T>>,
    decoder_blocks: Vec<[BlockCache<T>; 2]>,
    head_input: Activation<T>,
}

/// Saved activations of a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T = f32> {
    samples: Vec<SampleTape<T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    seed: u64,
    params: Vec<Param<T>>,
    encoder: Vec<EncoderLevel>,
    /// Indexed by level; `decoder[l]` upsamples from level `l + 1` to `l`.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        self.params.push(Param { name, shape, value });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-normal weights for a leaky rectifier, scaled by fan-in.
    fn kaiming(&mut self, name: String, shape: Vec<usize>, fan_in: usize, slope: f32) -> ParamId {
        let gain = (2.0 / (1.0 + f64::from(slope).powi(2))).sqrt();
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect();
        self.push(name, shape, value)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![T::from_f64(v); n])
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, slope: f32) -> ConvBlock {
        let taps = ConvGeometry::SAME3.taps();
        ConvBlock {
            weight: self.kaiming(
                format!("{prefix}.conv.weight"),
                vec![cout, cin * taps],
                cin * taps,
                slope,
            ),
            gamma: self.constant(format!("{prefix}.norm.gamma"), vec![cout], 1.0),
            beta: self.constant(format!("{prefix}.norm.beta"), vec![cout], 0.0),
            out_channels: cout,
        }
    }
}

impl Network<f32> {
    /// Builds a single-precision network with deterministic, seed-derived
    /// initialization.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::init(config, seed)
    }
}

impl<T: Real> Network<T> {
    /// Builds a network of any precision; the same seed yields the same
    /// parameters up to rounding.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let slope = config.negative_slope;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let taps2 = ConvGeometry::DOWN2.taps();
        let mut encoder = Vec::with_capacity(config.depth + 1);
        for level in 0..=config.depth {
            let c = config.channels_at(level);
            let (down, cin) = if level == 0 {
                (None, config.in_channels)
            } else {
                let cprev = config.channels_at(level - 1);
                let down = Conv {
                    weight: b.kaiming(
                        format!("enc{level}.down.weight"),
                        vec![c, cprev * taps2],
                        cprev * taps2,
                        slope,
                    ),
                    bias: b.constant(format!("enc{level}.down.bias"), vec![c], 0.0),
                    out_channels: c,
                };
                (Some(down), c)
            };
            let blocks = [
                b.block(&format!("enc{level}.block0"), cin, c, slope),
                b.block(&format!("enc{level}.block1"), c, c, slope),
            ];
            encoder.push(EncoderLevel { down, blocks });
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c = config.channels_at(level);
            let cdeep = config.channels_at(level + 1);
            let up = Conv {
                weight: b.kaiming(format!("dec{level}.up.weight"), vec![c * taps2, cdeep], cdeep, slope),
                bias: b.constant(format!("dec{level}.up.bias"), vec![c], 0.0),
                out_channels: c,
            };
            let cin = if config.has_skips() { 2 * c } else { c };
            let blocks = [
                b.block(&format!("dec{level}.block0"), cin, c, slope),
                b.block(&format!("dec{level}.block1"), c, c, slope),
            ];
            decoder.push(DecoderLevel { up, blocks });
        }
        decoder.reverse();
        let c0 = config.channels_at(0);
        let head = Conv {
            weight: b.kaiming("head.weight".into(), vec![config.out_regions, c0], c0, 1.0),
            bias: b.constant("head.bias".into(), vec![config.out_regions], 0.0),
            out_channels: config.out_regions,
        };
        Ok(Network {
            config,
            seed,
            params: b.params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over every parameter's bytes, in declaration order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in &p.value {
                h.update(v.widen().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients(self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect())
    }

    fn p(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(Error::contract(format!(
                "network input must be (batch, C, D, H, W), got {s:?}"
            )));
        }
        if s[1] != self.config.in_channels {
            return Err(Error::contract(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, s[1]
            )));
        }
        let dims = [s[2], s[3], s[4]];
        self.config.check_spatial(dims)?;
        Ok(dims)
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardResult<T>> {
        self.run(x, false).map(|(r, _)| r)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(ForwardResult<T>, Tape<T>)> {
        self.run(x, true).map(|(r, t)| (r, t.expect("recorded tape")))
    }

    fn run(&self, x: &Tensor<T>, record: bool) -> Result<(ForwardResult<T>, Option<Tape<T>>)> {
        let dims = self.check_input(x)?;
        let batch = x.batch();
        let mut logits = Vec::with_capacity(batch * self.config.out_regions * ops::volume(dims));
        let mut bottleneck = Vec::new();
        let mut bn_shape = Vec::new();
        let mut samples = Vec::new();
        for b in 0..batch {
            let input = Activation {
                channels: self.config.in_channels,
                dims,
                data: x.item(b).to_vec(),
            };
            let (out, bn, tape) = self.forward_sample(input, record);
            logits.extend_from_slice(&out.data);
            bn_shape = vec![batch, bn.channels, bn.dims[0], bn.dims[1], bn.dims[2]];
            bottleneck.extend_from_slice(&bn.data);
            if let Some(t) = tape {
                samples.push(t);
            }
        }
        let result = ForwardResult {
            logits: Tensor::new(&[batch, self.config.out_regions, dims[0], dims[1], dims[2]], logits)?,
            bottleneck: Tensor::new(&bn_shape, bottleneck)?,
        };
        Ok((result, record.then_some(Tape { samples })))
    }

    fn block_forward(
        &self,
        block: &ConvBlock,
        input: Activation<T>,
        record: bool,
    ) -> (Activation<T>, Option<BlockCache<T>>) {
        let pre = ops::conv_forward(
            &input,
            self.p(block.weight),
            None,
            block.out_channels,
            ConvGeometry::SAME3,
        );
        let (mut y, norm) = ops::instance_norm_forward(&pre, self.p(block.gamma), self.p(block.beta));
        ops::leaky_relu(&mut y, self.slope());
        let cache = record.then(|| BlockCache {
            input,
            norm,
            output: y.data.clone(),
        });
        (y, cache)
    }

    fn blocks_forward(
        &self,
        blocks: &[ConvBlock; 2],
        input: Activation<T>,
        record: bool,
    ) -> (Activation<T>, Option<[BlockCache<T>; 2]>) {
        let (h, c0) = self.block_forward(&blocks[0], input, record);
        let (h, c1) = self.block_forward(&blocks[1], h, record);
        (h, c0.zip(c1).map(|(a, b)| [a, b]))
    }

    fn forward_sample(
        &self,
        input: Activation<T>,
        record: bool,
    ) -> (Activation<T>, Activation<T>, Option<SampleTape<T>>) {
        let depth = self.config.depth;
        let mut down_inputs = Vec::new();
        let mut encoder_blocks = Vec::new();
        let mut features: Vec<Activation<T>> = Vec::with_capacity(depth + 1);
        let mut h = input;
        for level in &self.encoder {
            if let Some(down) = &level.down {
                let next = ops::conv_forward(
                    &h,
                    self.p(down.weight),
                    Some(self.p(down.bias)),
                    down.out_channels,
                    ConvGeometry::DOWN2,
                );
                down_inputs.push(record.then(|| h.clone()));
                h = next;
            } else {
                down_inputs.push(None);
            }
            let (out, caches) = self.blocks_forward(&level.blocks, h, record);
            if let Some(c) = caches {
                encoder_blocks.push(c);
            }
            features.push(out.clone());
            h = out;
        }
        let bottleneck = h.clone();
        let mut up_inputs = Vec::new();
        let mut decoder_blocks = Vec::new();
        for level in (0..depth).rev() {
            let dec = &self.decoder[level];
            let up = ops::conv_transpose_forward(
                &h,
                self.p(dec.up.weight),
                self.p(dec.up.bias),
                dec.up.out_channels,
                ConvGeometry::DOWN2,
            );
            if record {
                up_inputs.push(h);
            }
            let merged = if self.config.has_skips() {
                up.concat(&features[level])
            } else {
                up
            };
            let (out, caches) = self.blocks_forward(&dec.blocks, merged, record);
            if let Some(c) = caches {
                decoder_blocks.push(c);
            }
            h = out;
        }
        let logits = ops::conv_forward(
            &h,
            self.p(self.head.weight),
            Some(self.p(self.head.bias)),
            self.head.out_channels,
            ConvGeometry::POINT,
        );
        let tape = record.then(|| SampleTape {
            down_inputs,
            encoder_blocks,
            up_inputs,
            decoder_blocks,
            head_input: h,
        });
        (logits, bottleneck, tape)
    }

    fn block_backward(
        &self,
        block: &ConvBlock,
        cache: &BlockCache<T>,
        mut grad: Activation<T>,
        grads: &mut Gradients<T>,
        need_input: bool,
    ) -> Activation<T> {
        ops::leaky_relu_backward(&mut grad, &cache.output, self.slope());
        let (gg, gb) = {
            let (lo, hi) = grads.0.split_at_mut(block.beta.0);
            (&mut lo[block.gamma.0], &mut hi[0])
        };
        let dpre = ops::instance_norm_backward(&grad, &cache.norm, self.p(block.gamma), gg, gb);
        ops::conv_backward(
            &cache.input,
            self.p(block.weight),
            &dpre,
            &mut grads.0[block.weight.0],
            None,
            ConvGeometry::SAME3,
            need_input,
        )
        .unwrap_or_else(|| Activation::zeros(0, [0, 0, 0]))
    }

    fn blocks_backward(
        &self,
        blocks: &[ConvBlock; 2],
        caches: &[BlockCache<T>; 2],
        grad: Activation<T>,
        grads: &mut Gradients<T>,
    ) -> Activation<T> {
        let g = self.block_backward(&blocks[1], &caches[1], grad, grads, true);
        self.block_backward(&blocks[0], &caches[0], g, grads, true)
    }

    fn conv_grads<'g>(grads: &'g mut Gradients<T>, conv: &Conv) -> (&'g mut [T], &'g mut [T]) {
        let (lo, hi) = grads.0.split_at_mut(conv.bias.0);
        (&mut lo[conv.weight.0], &mut hi[0])
    }

    /// Back-propagates gradients w.r.t. the logits and, optionally, w.r.t. the
    /// bottleneck; returns parameter gradients summed over the batch.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_logits: &Tensor<T>,
        grad_bottleneck: Option<&Tensor<T>>,
    ) -> Result<Gradients<T>> {
        let mut grads = self.zero_gradients();
        if grad_logits.batch() != tape.samples.len() {
            return Err(Error::contract("logits gradient batch does not match tape"));
        }
        for (b, sample) in tape.samples.iter().enumerate() {
            let dims = sample.head_input.dims;
            let g_logits = Activation {
                channels: self.config.out_regions,
                dims,
                data: grad_logits.item(b).to_vec(),
            };
            let (gw, gb) = Self::conv_grads(&mut grads, &self.head);
            let mut g = ops::conv_backward(
                &sample.head_input,
                self.p(self.head.weight),
                &g_logits,
                gw,
                Some(gb),
                ConvGeometry::POINT,
                true,
            )
            .expect("input gradient requested");
            let depth = self.config.depth;
            // gradients flowing into encoder features through skip connections
            let mut skip_grads: Vec<Option<Activation<T>>> = vec![None; depth + 1];
            for level in 0..depth {
                let dec = &self.decoder[level];
                let caches = &sample.decoder_blocks[depth - 1 - level];
                let g_merged = self.blocks_backward(&dec.blocks, caches, g, &mut grads);
                let g_up = if self.config.has_skips() {
                    let (g_up, g_skip) = g_merged.split(dec.up.out_channels);
                    skip_grads[level] = Some(g_skip);
                    g_up
                } else {
                    g_merged
                };
                let up_input = &sample.up_inputs[depth - 1 - level];
                let (gw, gb) = Self::conv_grads(&mut grads, &dec.up);
                g = ops::conv_transpose_backward(up_input, self.p(dec.up.weight), &g_up, gw, gb, ConvGeometry::DOWN2);
            }
            // g is now the gradient at the bottleneck
            if let Some(gbn) = grad_bottleneck {
                for (a, &e) in g.data.iter_mut().zip(gbn.item(b)) {
                    *a += e;
                }
            }
            for level in (0..=depth).rev() {
                let enc = &self.encoder[level];
                if let Some(extra) = skip_grads[level].take() {
                    for (a, e) in g.data.iter_mut().zip(extra.data) {
                        *a += e;
                    }
                }
                let caches = &sample.encoder_blocks[level];
                g = self.block_backward(&enc.blocks[1], &caches[1], g, &mut grads, true);
                let Some(down) = &enc.down else {
                    // level 0: no gradient w.r.t. the network input
                    self.block_backward(&enc.blocks[0], &caches[0], g, &mut grads, false);
                    break;
                };
                g = self.block_backward(&enc.blocks[0], &caches[0], g, &mut grads, true);
                let input = sample.down_inputs[level].as_ref().expect("recorded down input");
                let (gw, gb) = Self::conv_grads(&mut grads, down);
                g = ops::conv_backward(input, self.p(down.weight), &g, gw, Some(gb), ConvGeometry::DOWN2, true)
                    .expect("input gradient requested");
            }
        }
        Ok(grads)
    }

    /// Wraps the network so that it can only run inference.
    pub fn freeze(self) -> FrozenNetwork<T> {
        FrozenNetwork(self)
    }

    fn slope(&self) -> T {
        T::from_f64(f64::from(self.config.negative_slope))
    }
}

/// An inference-only network: parameters cannot be borrowed mutably and no
/// backward pass or gradient buffer exists for it.
#[derive(Clone, Debug)]
pub struct FrozenNetwork<T = f32>(Network<T>);

impl<T: Real> FrozenNetwork<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardResult<T>> {
        self.0.forward(x)
    }

    pub fn network(&self) -> &Network<T> {
        &self.0
    }

    pub fn config(&self) -> &NetworkConfig {
        self.0.config()
    }

    pub fn checksum(&self) -> String {
        self.0.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(in_channels: usize, skips: bool) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            depth: 2,
            base_filters: 2,
            skip_connections: if skips { 2 } else { 0 },
            ..Default::default()
        }
    }

    fn input(channels: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_fn(&[1, channels, size, size, size], |_| normal.sample(&mut rng))
    }

    #[test]
    fn teacher_and_student_differ_only_in_first_conv() {
        let cfg = NetworkConfig::default();
        let t = Network::build(cfg.clone(), 3).unwrap();
        let s = Network::build(cfg.with_in_channels(1), 3).unwrap();
        assert_eq!(t.params().len(), s.params().len());
        for (i, (a, b)) in t.params().iter().zip(s.params()).enumerate() {
            if i == 0 {
                assert_eq!(a.value.len(), 4 * b.value.len());
            } else {
                assert_eq!(a.value.len(), b.value.len(), "{}", a.name);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::build(small(2, true), 9).unwrap();
        let b = Network::build(small(2, true), 9).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Network::build(small(2, true), 10).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn skip_setting_only_changes_decoder_widths() {
        let a = Network::build(small(1, true), 5).unwrap();
        let b = Network::build(small(1, false), 5).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            if pa.name.starts_with("enc") {
                assert_eq!(pa.value, pb.value);
            }
        }
        let widened: Vec<_> = a
            .params()
            .iter()
            .zip(b.params())
            .filter(|(x, y)| x.shape != y.shape)
            .map(|(x, _)| x.name.clone())
            .collect();
        assert_eq!(widened, vec!["dec1.block0.conv.weight", "dec0.block0.conv.weight"]);
    }

    #[test]
    fn forward_shapes() {
        let cfg = NetworkConfig {
            in_channels: 1,
            base_filters: 2,
            ..Default::default()
        };
        let net = Network::build(cfg, 1).unwrap();
        let out = net.forward(&input(1, 32, 1)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 3, 32, 32, 32]);
        assert_eq!(out.bottleneck.shape(), &[1, 32, 2, 2, 2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::build(small(2, true), 4).unwrap();
        let x = input(2, 8, 2);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        let (train, _) = net.forward_train(&x).unwrap();
        assert_eq!(train, net.forward(&x).unwrap());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = Network::build(small(2, true), 4).unwrap();
        assert!(matches!(net.forward(&input(1, 8, 0)), Err(Error::Contract(_))));
        assert!(matches!(net.forward(&input(2, 6, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = NetworkConfig {
            skip_connections: 2,
            ..Default::default()
        };
        assert!(matches!(Network::build(cfg, 0), Err(Error::Config(_))));
    }

    fn dot_loss(net: &Network<f64>, x: &Tensor<f64>, probe_l: &Tensor<f64>, probe_b: &Tensor<f64>) -> f64 {
        let out = net.forward(x).unwrap();
        let a: f64 = out.logits.data().iter().zip(probe_l.data()).map(|(a, b)| a * b).sum();
        let c: f64 = out
            .bottleneck
            .data()
            .iter()
            .zip(probe_b.data())
            .map(|(a, b)| a * b)
            .sum();
        a + c
    }

    fn check_gradients(skips: bool) {
        let net = Network::<f64>::init(small(2, skips), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let x = Tensor::from_fn(&[2, 2, 8, 8, 8], |_| normal.sample(&mut rng));
        let (out, tape) = net.forward_train(&x).unwrap();
        let probe_l = Tensor::from_fn(out.logits.shape(), |_| normal.sample(&mut rng));
        let probe_b = Tensor::from_fn(out.bottleneck.shape(), |_| normal.sample(&mut rng));
        let grads = net.backward(&tape, &probe_l, Some(&probe_b)).unwrap();
        // directional derivative along a random direction, per parameter tensor
        for (i, p) in net.params().iter().enumerate() {
            let dir: Vec<f64> = (0..p.value.len()).map(|_| normal.sample(&mut rng)).collect();
            let analytic: f64 = grads.0[i].iter().zip(&dir).map(|(g, d)| g * d).sum();
            let h = 1e-6;
            let mut plus = net.clone();
            let mut minus = net.clone();
            for ((vp, vm), d) in plus.params_mut()[i]
                .value
                .iter_mut()
                .zip(minus.params_mut()[i].value.iter_mut())
                .zip(&dir)
            {
                *vp += h * d;
                *vm -= h * d;
            }
            let fd = (dot_loss(&plus, &x, &probe_l, &probe_b) - dot_loss(&minus, &x, &probe_l, &probe_b)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
            assert!(rel < 1e-4, "{} (skips={skips}): fd {fd} vs analytic {analytic}", p.name);
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_skips() {
        check_gradients(true);
    }

    #[test]
    fn backward_matches_finite_differences_without_skips() {
        check_gradients(false);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for skips in [true, false] {
            let net = Network::build(small(2, skips), 8).unwrap();
            let x = input(2, 8, 4);
            let (out, tape) = net.forward_train(&x).unwrap();
            let target = Tensor::from_fn(out.logits.shape(), |i| if i % 3 == 0 { 1.0 } else { 0.0 });
            let g = crate::losses::gt_loss_with_grad(&out.logits.to_f64(), &target).unwrap();
            let grads = net.backward(&tape, &g.grad.to_f32(), None).unwrap();
            for (p, gp) in net.params().iter().zip(&grads.0) {
                assert!(gp.iter().any(|&v| v != 0.0), "dead parameter {}", p.name);
            }
        }
    }
}
