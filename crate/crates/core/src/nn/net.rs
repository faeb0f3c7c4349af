//! The encoder-decoder change network with concatenative skip connections.

use super::ops::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, dropout, leaky_relu, leaky_relu_backward, scaled_sigmoid,
    scaled_sigmoid_backward, update_running_stats, BnCache, Conv,
};
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    /// Convolution, leaky ReLU.
    CR,
    /// Convolution, batch norm, ReLU.
    CBR,
    /// Convolution, batch norm, ReLU, dropout.
    CBRD,
    /// Convolution only.
    C,
}

impl Block {
    pub fn has_bn(self) -> bool {
        matches!(self, Block::CBR | Block::CBRD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Strided convolution.
    Encode,
    /// Strided transposed convolution.
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub block: Block,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub direction: Direction,
}

impl LayerSpec {
    const fn new(block: Block, out_channels: usize, kernel: usize, stride: usize, direction: Direction) -> Self {
        Self {
            block,
            out_channels,
            kernel,
            stride,
            direction,
        }
    }

    /// Padding that halves (stride 2) or preserves (stride 1) spatial dims.
    pub fn pad(&self) -> usize {
        (self.kernel - self.stride).div_ceil(2)
    }
}

use Block::*;
use Direction::*;

pub const ENCODER: [LayerSpec; 8] = [
    LayerSpec::new(CR, 64, 3, 1, Encode),
    LayerSpec::new(CBR, 128, 4, 2, Encode),
    LayerSpec::new(CBR, 256, 4, 2, Encode),
    LayerSpec::new(CBR, 512, 4, 2, Encode),
    LayerSpec::new(CBR, 512, 4, 2, Encode),
    LayerSpec::new(CBR, 512, 4, 2, Encode),
    LayerSpec::new(CBR, 512, 4, 2, Encode),
    LayerSpec::new(CBR, 512, 4, 2, Encode),
];

pub const DECODER: [LayerSpec; 8] = [
    LayerSpec::new(CBRD, 512, 4, 2, Decode),
    LayerSpec::new(CBRD, 512, 4, 2, Decode),
    LayerSpec::new(CBRD, 512, 4, 2, Decode),
    LayerSpec::new(CBR, 512, 4, 2, Decode),
    LayerSpec::new(CBR, 256, 4, 2, Decode),
    LayerSpec::new(CBR, 128, 4, 2, Decode),
    LayerSpec::new(CBR, 64, 4, 2, Decode),
    LayerSpec::new(C, 1, 3, 1, Decode),
];

/// Spatial dims must be multiples of this (seven stride-2 stages).
pub const SPATIAL_MULTIPLE: usize = 128;

fn default_slope() -> f64 {
    0.2
}
fn default_dropout() -> f64 {
    0.5
}
fn default_s_max() -> f64 {
    255.0
}
fn default_divisor() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// 8 with flow (DOF-CDNet), 6 without (CDNet).
    pub in_channels: usize,
    #[serde(default = "encoder_default")]
    pub encoder: Vec<LayerSpec>,
    #[serde(default = "decoder_default")]
    pub decoder: Vec<LayerSpec>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    /// Divides every hidden channel count. 1 builds the full-width network;
    /// larger values keep the topology at a fraction of the cost.
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
}

fn encoder_default() -> Vec<LayerSpec> {
    ENCODER.to_vec()
}
fn decoder_default() -> Vec<LayerSpec> {
    DECODER.to_vec()
}

/// Shape of one layer after applying the width divisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub conv: Conv,
    pub block: Block,
}

impl LayerShape {
    pub fn has_bias(&self) -> bool {
        !self.block.has_bn()
    }

    pub fn parameter_count(&self) -> usize {
        let c = self.conv.out_channels;
        self.conv.weight_len() + if self.has_bias() { c } else { 2 * c }
    }
}

impl NetworkConfig {
    pub fn dof_cdnet() -> Self {
        Self::with_inputs(8)
    }

    pub fn cdnet() -> Self {
        Self::with_inputs(6)
    }

    pub fn with_inputs(in_channels: usize) -> Self {
        Self {
            in_channels,
            encoder: encoder_default(),
            decoder: decoder_default(),
            leaky_slope: default_slope(),
            dropout_rate: default_dropout(),
            s_max: default_s_max(),
            width_divisor: default_divisor(),
        }
    }

    pub fn with_width_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    pub fn uses_flow(&self) -> bool {
        self.in_channels == 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 6 && self.in_channels != 8 {
            return Err(param_err!("in_channels must be 6 or 8, got {}", self.in_channels));
        }
        if self.encoder != ENCODER || self.decoder != DECODER {
            return Err(param_err!("layer table differs from the network definition"));
        }
        if !self.width_divisor.is_power_of_two() || self.width_divisor > 64 {
            return Err(param_err!(
                "width_divisor must be a power of two up to 64, got {}",
                self.width_divisor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(param_err!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.leaky_slope >= 0.0 && self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(param_err!("leaky_slope must be >= 0 and s_max positive"));
        }
        Ok(())
    }

    fn width(&self, spec: &LayerSpec) -> usize {
        if spec.out_channels == 1 {
            1
        } else {
            spec.out_channels / self.width_divisor
        }
    }

    /// Encoder layers followed by decoder layers, with concatenated skip
    /// inputs accounted for in the decoder input depths.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let enc_out: Vec<usize> = self.encoder.iter().map(|s| self.width(s)).collect();
        let mut shapes = Vec::with_capacity(16);
        let mut cin = self.in_channels;
        for (spec, &out) in self.encoder.iter().zip(&enc_out) {
            shapes.push(LayerShape {
                conv: Conv {
                    in_channels: cin,
                    out_channels: out,
                    kernel: spec.kernel,
                    stride: spec.stride,
                    pad: spec.pad(),
                    transposed: false,
                },
                block: spec.block,
            });
            cin = out;
        }
        let n = self.encoder.len();
        for (k, spec) in self.decoder.iter().enumerate() {
            let cin = if k == 0 {
                enc_out[n - 1]
            } else {
                self.width(&self.decoder[k - 1]) + enc_out[n - 1 - k]
            };
            shapes.push(LayerShape {
                conv: Conv {
                    in_channels: cin,
                    out_channels: self.width(spec),
                    kernel: spec.kernel,
                    stride: spec.stride,
                    pad: spec.pad(),
                    transposed: true,
                },
                block: spec.block,
            });
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.parameter_count()).sum()
    }

    pub fn layer_name(index: usize) -> String {
        if index < 8 {
            format!("enc{}", index + 1)
        } else {
            format!("dec{}", index - 7)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BatchNormParams<T>>,
}

/// Learned weights and batch-norm statistics of all 16 layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> NetworkParams<T> {
    fn build(cfg: &NetworkConfig, mut weight: impl FnMut(usize, &Conv) -> Vec<T>, gamma: T) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layer_shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = s.conv.out_channels;
                LayerParams {
                    weight: weight(i, &s.conv),
                    bias: s.has_bias().then(|| vec![T::zero(); c]),
                    bn: s.block.has_bn().then(|| BatchNormParams {
                        gamma: vec![gamma; c],
                        beta: vec![T::zero(); c],
                        running_mean: vec![T::zero(); c],
                        running_var: vec![T::one(); c],
                    }),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Gaussian weights (mean 0, std 0.02), zero biases, unit BN scales.
    ///
    /// Each layer draws from its own stream, indexed by output channel, so
    /// networks that differ only in input depth share every other weight and
    /// the first-layer weights of the common input channels.
    pub fn init(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let base: u64 = rng.random();
        Self::build(
            cfg,
            |layer, conv| {
                let mut w = vec![T::zero(); conv.weight_len()];
                let [a, b, k, _] = conv.weight_shape();
                let per = b * k * k;
                for row in 0..a {
                    let mut r = ChaCha8Rng::seed_from_u64(base);
                    r.set_stream(((layer as u64) << 32) | row as u64);
                    for v in &mut w[row * per..(row + 1) * per] {
                        *v = T::from_f64_lossy(normal.sample(&mut r));
                    }
                }
                w
            },
            T::one(),
        )
    }

    /// Every learnable value zero; running statistics at their identity.
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        Self::build(cfg, |_, conv| vec![T::zero(); conv.weight_len()], T::zero())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(0.0))).collect();
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: c(&l.weight),
                    bias: l.bias.as_ref().map(c),
                    bn: l.bn.as_ref().map(|b| BatchNormParams {
                        gamma: c(&b.gamma),
                        beta: c(&b.beta),
                        running_mean: c(&b.running_mean),
                        running_var: c(&b.running_var),
                    }),
                })
                .collect(),
        }
    }

    /// Named views of every stored tensor, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let name = NetworkConfig::layer_name(i);
            out.push((format!("{name}.weight"), l.weight.as_slice()));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b.as_slice()));
            }
            if let Some(bn) = &l.bn {
                out.push((format!("{name}.bn.gamma"), bn.gamma.as_slice()));
                out.push((format!("{name}.bn.beta"), bn.beta.as_slice()));
                out.push((format!("{name}.bn.running_mean"), bn.running_mean.as_slice()));
                out.push((format!("{name}.bn.running_var"), bn.running_var.as_slice()));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = NetworkConfig::layer_name(i);
            out.push((format!("{name}.weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((format!("{name}.bias"), b));
            }
            if let Some(bn) = &mut l.bn {
                out.push((format!("{name}.bn.gamma"), &mut bn.gamma));
                out.push((format!("{name}.bn.beta"), &mut bn.beta));
                out.push((format!("{name}.bn.running_mean"), &mut bn.running_mean));
                out.push((format!("{name}.bn.running_var"), &mut bn.running_var));
            }
        }
        out
    }

    /// Learnable tensors only (weights, biases, BN scales and shifts).
    pub fn learnables_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    fn check(&self, cfg: &NetworkConfig) -> Result<Vec<LayerShape>> {
        let shapes = cfg.layer_shapes();
        let ok = self.layers.len() == shapes.len()
            && self.layers.iter().zip(&shapes).all(|(l, s)| {
                let c = s.conv.out_channels;
                l.weight.len() == s.conv.weight_len()
                    && l.bias.as_ref().map(|b| b.len()) == s.has_bias().then_some(c)
                    && l.bn
                        .as_ref()
                        .map(|b| [b.gamma.len(), b.beta.len(), b.running_mean.len(), b.running_var.len()])
                        == s.block.has_bn().then_some([c; 4])
            });
        if ok {
            Ok(shapes)
        } else {
            Err(shape_err!("parameters do not match the network configuration"))
        }
    }
}

/// Gradients of the learnable tensors, laid out like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

impl<T: Real> NetworkGrads<T> {
    /// Gradients in the same order as [`NetworkParams::learnables_mut`].
    pub fn flat(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.extend(l.bias.iter());
            out.extend(l.gamma.iter());
            out.extend(l.beta.iter());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum Activation {
    Leaky(f64),
    Sigmoid(f64),
}

struct LayerCache<T> {
    input: Tensor4<T>,
    bn: Option<BnCache<T>>,
    /// Post-activation output before dropout.
    activated: Tensor4<T>,
    drop_mask: Option<Tensor4<T>>,
}

/// Activations kept by a forward pass for [`backward`].
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    mode: Mode,
}

fn activation(cfg: &NetworkConfig, index: usize, block: Block) -> Activation {
    if index < 8 {
        Activation::Leaky(cfg.leaky_slope)
    } else if block == Block::C {
        Activation::Sigmoid(cfg.s_max)
    } else {
        Activation::Leaky(0.0)
    }
}

fn check_input(cfg: &NetworkConfig, x: &Tensor4<impl Real>) -> Result<()> {
    let [b, c, h, w] = x.dims();
    if c != cfg.in_channels {
        return Err(shape_err!(
            "network expects {} input channels, got {}",
            cfg.in_channels,
            c
        ));
    }
    if b == 0 || h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(shape_err!(
            "input {}x{}x{} must be non-empty with spatial dims divisible by {}",
            b,
            h,
            w,
            SPATIAL_MULTIPLE
        ));
    }
    Ok(())
}

fn run_layer<T: Real>(
    params: &LayerParams<T>,
    shape: &LayerShape,
    act: Activation,
    dropout_rate: f64,
    x: Tensor4<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, LayerCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    let z = shape.conv.forward(&x, &params.weight, params.bias.as_deref())?;
    let (z, bn, stats) = match (&params.bn, mode) {
        (Some(bn), Mode::Train) => {
            let (y, cache) = batch_norm_train(&z, &bn.gamma, &bn.beta, super::ops::BN_EPS)?;
            let stats = (cache.mean.clone(), cache.var_unbiased.clone());
            (y, Some(cache), Some(stats))
        }
        (Some(bn), Mode::Eval) => (
            batch_norm_eval(
                &z,
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                super::ops::BN_EPS,
            )?,
            None,
            None,
        ),
        (None, _) => (z, None, None),
    };
    let activated = match act {
        Activation::Leaky(s) => leaky_relu(&z, s),
        Activation::Sigmoid(s) => scaled_sigmoid(&z, s),
    };
    let (out, drop_mask) = if shape.block == Block::CBRD {
        dropout(&activated, dropout_rate, rng, mode == Mode::Train)?
    } else {
        (activated.clone(), None)
    };
    Ok((
        out,
        LayerCache {
            input: x,
            bn,
            activated,
            drop_mask,
        },
        stats,
    ))
}

fn forward_impl<T: Real>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    x: &Tensor4<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, ForwardCache<T>, Vec<Option<(Vec<T>, Vec<T>)>>)> {
    cfg.validate()?;
    check_input(cfg, x)?;
    let shapes = params.check(cfg)?;
    let mut caches = Vec::with_capacity(16);
    let mut stats = Vec::with_capacity(16);
    let mut enc_out: Vec<Tensor4<T>> = Vec::with_capacity(8);
    let mut h = x.clone();
    for (i, shape) in shapes.iter().enumerate() {
        let input = if i < 8 || i == 8 {
            h
        } else {
            Tensor4::concat_channels(&[&h, &enc_out[15 - i]])?
        };
        let act = activation(cfg, i, shape.block);
        let (out, cache, st) = run_layer(&params.layers[i], shape, act, cfg.dropout_rate, input, mode, rng)?;
        if i < 8 {
            enc_out.push(out.clone());
        }
        caches.push(cache);
        stats.push(st);
        h = out;
    }
    Ok((h, ForwardCache { layers: caches, mode }, stats))
}

/// Forward pass returning `s_max * sigmoid(.)` in `[0, s_max]` and the cache
/// needed by [`backward`]. Training mode uses batch statistics, updates the
/// running statistics and draws dropout masks from `rng`.
pub fn forward<T: Real>(
    params: &mut NetworkParams<T>,
    cfg: &NetworkConfig,
    x: &Tensor4<T>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    let (y, cache, stats) = forward_impl(params, cfg, x, mode, rng)?;
    for (layer, st) in params.layers.iter_mut().zip(stats) {
        if let (Some(bn), Some((mean, var))) = (&mut layer.bn, st) {
            update_running_stats(&mut bn.running_mean, &mean, super::ops::BN_MOMENTUM);
            update_running_stats(&mut bn.running_var, &var, super::ops::BN_MOMENTUM);
        }
    }
    Ok((y, cache))
}

/// Training-mode forward that leaves the running statistics untouched.
pub fn forward_train_pure<T: Real>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    x: &Tensor4<T>,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    let (y, cache, _) = forward_impl(params, cfg, x, Mode::Train, rng)?;
    Ok((y, cache))
}

/// Eval-mode forward: a pure function of parameters and input.
pub fn predict<T: Real>(params: &NetworkParams<T>, cfg: &NetworkConfig, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    // Eval mode draws no random numbers; any generator will do.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(forward_impl(params, cfg, x, Mode::Eval, &mut rng)?.0)
}

/// Gradients of a scalar loss with output gradient `dy`.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    cache: &ForwardCache<T>,
    dy: &Tensor4<T>,
) -> Result<NetworkGrads<T>> {
    if cache.mode != Mode::Train {
        return Err(param_err!("backward needs a training-mode forward cache"));
    }
    let shapes = params.check(cfg)?;
    let mut grads: Vec<Option<LayerGrads<T>>> = vec![None; 16];
    let mut skip: Vec<Option<Tensor4<T>>> = vec![None; 8];
    let mut g = dy.clone();
    for i in (0..16).rev() {
        let shape = &shapes[i];
        let lc = &cache.layers[i];
        let p = &params.layers[i];
        if i < 8 {
            if let Some(s) = skip[i].take() {
                g = g.add(&s)?;
            }
        }
        if let Some(mask) = &lc.drop_mask {
            g = g.mul(mask)?;
        }
        g = match activation(cfg, i, shape.block) {
            Activation::Leaky(s) => leaky_relu_backward(&lc.activated, &g, s)?,
            Activation::Sigmoid(s) => scaled_sigmoid_backward(&lc.activated, &g, s)?,
        };
        let (mut gamma, mut beta) = (None, None);
        if let (Some(bn), Some(bc)) = (&p.bn, &lc.bn) {
            let (dx, dg, db) = batch_norm_backward(&g, &bn.gamma, bc)?;
            g = dx;
            gamma = Some(dg);
            beta = Some(db);
        }
        let cg = shape.conv.backward(&lc.input, &p.weight, &g)?;
        grads[i] = Some(LayerGrads {
            weight: cg.dw,
            bias: p.bias.as_ref().map(|_| cg.db),
            gamma,
            beta,
        });
        g = cg.dx;
        if i > 8 {
            let prev = shapes[i - 1].conv.out_channels;
            let (dec, enc) = g.split_channels(prev)?;
            skip[15 - i] = Some(enc);
            g = dec;
        }
    }
    Ok(NetworkGrads {
        layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Parameter count from the layer table alone: every convolution has
    /// `in * out * k * k` weights, plus a bias when no batch norm follows and
    /// a scale and shift when one does.
    fn counting_oracle(in_channels: usize, div: usize) -> usize {
        let w = |c: usize| if c == 1 { 1 } else { c / div };
        let enc = [
            (64, 3, false),
            (128, 4, true),
            (256, 4, true),
            (512, 4, true),
            (512, 4, true),
            (512, 4, true),
            (512, 4, true),
            (512, 4, true),
        ];
        let dec = [
            (512, 4, true),
            (512, 4, true),
            (512, 4, true),
            (512, 4, true),
            (256, 4, true),
            (128, 4, true),
            (64, 4, true),
            (1, 3, false),
        ];
        let mut total = 0;
        let mut cin = in_channels;
        for &(c, k, bn) in &enc {
            total += cin * w(c) * k * k + if bn { 2 * w(c) } else { w(c) };
            cin = w(c);
        }
        for (j, &(c, k, bn)) in dec.iter().enumerate() {
            let cin = if j == 0 {
                w(512)
            } else {
                w(dec[j - 1].0) + w(enc[7 - j].0)
            };
            total += cin * w(c) * k * k + if bn { 2 * w(c) } else { w(c) };
        }
        total
    }

    #[test]
    fn variants_share_initial_weights() {
        let eight = NetworkParams::<f32>::init(
            &NetworkConfig::dof_cdnet().with_width_divisor(16),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let six = NetworkParams::<f32>::init(
            &NetworkConfig::cdnet().with_width_divisor(16),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(eight.layers[1..], six.layers[1..]);
        for (r8, r6) in eight.layers[0].weight.chunks(72).zip(six.layers[0].weight.chunks(54)) {
            assert_eq!(&r8[..54], r6);
        }
        let other = NetworkParams::<f32>::init(
            &NetworkConfig::cdnet().with_width_divisor(16),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_ne!(other.layers[3].weight, six.layers[3].weight);
    }

    #[test]
    fn parameter_count_matches_oracle() {
        assert_eq!(NetworkConfig::dof_cdnet().parameter_count(), counting_oracle(8, 1));
        assert_eq!(NetworkConfig::cdnet().parameter_count(), counting_oracle(6, 1));
        for d in [2, 8, 64] {
            let cfg = NetworkConfig::dof_cdnet().with_width_divisor(d);
            assert_eq!(cfg.parameter_count(), counting_oracle(8, d));
        }
        // Only the first kernel differs: 2 input channels * 64 * 3 * 3.
        assert_eq!(
            NetworkConfig::dof_cdnet().parameter_count() - NetworkConfig::cdnet().parameter_count(),
            2 * 64 * 9
        );
    }

    #[test]
    fn variants_differ_only_in_first_layer_depth() {
        let a = NetworkConfig::dof_cdnet().layer_shapes();
        let b = NetworkConfig::cdnet().layer_shapes();
        assert_eq!(a[0].conv.in_channels, 8);
        assert_eq!(b[0].conv.in_channels, 6);
        assert_eq!(a[1..], b[1..]);
        assert_eq!(a[0].conv.out_channels, b[0].conv.out_channels);
    }

    #[test]
    fn decoder_inputs_follow_skip_wiring() {
        let s = NetworkConfig::dof_cdnet().layer_shapes();
        let dec_in: Vec<usize> = s[8..].iter().map(|l| l.conv.in_channels).collect();
        assert_eq!(dec_in, [512, 1024, 1024, 1024, 1024, 512, 256, 128]);
    }

    #[test]
    fn validation_rejects_edits() {
        let mut cfg = NetworkConfig::dof_cdnet();
        cfg.decoder[0].out_channels = 256;
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::with_inputs(7).validate().is_err());
        assert!(NetworkConfig::cdnet().with_width_divisor(3).validate().is_err());
    }

    #[test]
    fn zero_network_outputs_half_scale() {
        let cfg = NetworkConfig::dof_cdnet().with_width_divisor(32);
        let params = NetworkParams::<f32>::zeros(&cfg).unwrap();
        let x = random_tensor([1, 8, 128, 256], &mut ChaCha8Rng::seed_from_u64(1)).cast::<f32>();
        let y = predict(&params, &cfg, &x).unwrap();
        assert_eq!(y.dims(), [1, 1, 128, 256]);
        assert!(y.data().iter().all(|&v| v == 127.5));
    }

    #[test]
    fn wrong_channels_or_dims_are_rejected() {
        let cfg = NetworkConfig::cdnet().with_width_divisor(64);
        let params = NetworkParams::<f64>::zeros(&cfg).unwrap();
        assert!(predict(&params, &cfg, &Tensor4::zeros([1, 8, 128, 128])).is_err());
        assert!(predict(&params, &cfg, &Tensor4::zeros([1, 6, 96, 128])).is_err());
        let other = NetworkParams::<f64>::zeros(&NetworkConfig::dof_cdnet().with_width_divisor(64)).unwrap();
        assert!(predict(&other, &cfg, &Tensor4::zeros([1, 6, 128, 128])).is_err());
    }

    #[test]
    fn eval_forward_is_pure_and_bounded() {
        let cfg = NetworkConfig::dof_cdnet().with_width_divisor(32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = NetworkParams::<f32>::init(&cfg, &mut rng).unwrap();
        let x = random_tensor([2, 8, 128, 128], &mut rng).scale(5.0).cast::<f32>();
        let a = predict(&params, &cfg, &x).unwrap();
        let b = predict(&params, &cfg, &x).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let cfg = NetworkConfig::cdnet().with_width_divisor(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let before = params.clone();
        let x = random_tensor([2, 6, 128, 128], &mut rng);
        forward(&mut params, &cfg, &x, Mode::Train, &mut rng).unwrap();
        let bn = params.layers[1].bn.as_ref().unwrap();
        assert_ne!(bn.running_mean, before.layers[1].bn.as_ref().unwrap().running_mean);
        assert_eq!(params.layers[1].weight, before.layers[1].weight);
        // A 1x1 bottleneck with a single item has one element per channel.
        assert!(forward(&mut params, &cfg, &x.batch_item(0), Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = NetworkConfig::dof_cdnet().with_width_divisor(64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        // Larger weights give gradients well above the finite-difference noise.
        for t in params.learnables_mut() {
            t.iter_mut().for_each(|v| *v *= 10.0);
        }
        // 128x256 leaves two bottleneck pixels per item, so batch norm there
        // normalizes four values rather than a degenerate pair.
        let x = random_tensor([2, 8, 128, 256], &mut rng);
        let probe = random_tensor([2, 1, 128, 256], &mut rng);
        let seed = 99;
        let loss = |p: &NetworkParams<f64>, xx: &Tensor4<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (y, _) = forward_train_pure(p, &cfg, xx, &mut r).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (_, cache) = forward_train_pure(&params, &cfg, &x, &mut r).unwrap();
        let grads = backward(&params, &cfg, &cache, &probe).unwrap();
        for layer in [0usize, 3, 7, 8, 12, 15] {
            let w = params.layers[layer].weight.clone();
            let wt = Tensor4::from_vec([1, 1, 1, w.len()], w).unwrap();
            let gw = Tensor4::from_vec(wt.dims(), grads.layers[layer].weight.clone()).unwrap();
            // Thousands of activations depend on each weight; a small step keeps
            // them on one side of their ReLU kinks.
            let e = crate::nn::gradcheck::gradient_error_with_step(
                &wt,
                &gw,
                |t| {
                    let mut p = params.clone();
                    p.layers[layer].weight = t.data().to_vec();
                    loss(&p, &x)
                },
                6,
                layer as u64,
                1e-6,
            );
            assert!(e < 1e-4, "layer {layer}: relative error {e:e}");
        }
    }
}
