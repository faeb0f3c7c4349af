//! Minibatch training with Adam on the L1 loss.

use super::net::{backward, forward, Mode, NetworkConfig, NetworkParams};
use super::ops::l1_loss;
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when non-zero.
    pub max_iterations: usize,
    pub seed: u64,
    /// Runs every kernel on the calling thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 10,
            max_iterations: 0,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(param_err!("batch_size and epochs must be positive"));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.learning_rate > 0.0 && unit(self.beta1) && unit(self.beta2) && self.adam_eps > 0.0) {
            return Err(param_err!("invalid optimizer hyper-parameters"));
        }
        Ok(())
    }
}

/// One training example: a `1 x C x H x W` input and `1 x 1 x H x W` target
/// in `[0, s_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: Tensor4<f32>,
    pub target: Tensor4<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,iteration,loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.iteration, r.loss);
        }
        s
    }

    /// Mean batch loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss;
            out[r.epoch].1 += 1;
        }
        out.into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| s / n as f64)
            .collect()
    }

    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.epoch_means().last().copied()
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &mut NetworkParams<f32>) -> Self {
        let shapes: Vec<usize> = params.learnables_mut().iter().map(|p| p.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut NetworkParams<f32>, grads: &[&Vec<f32>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate as f32;
        let eps = cfg.adam_eps as f32;
        for (((p, g), m), v) in params
            .learnables_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    // A lone trailing item would give batch norm a single sample.
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn check_samples(cfg: &NetworkConfig, data: &[TrainSample]) -> Result<()> {
    if data.is_empty() {
        return Err(param_err!("training set is empty"));
    }
    let [_, c, h, w] = data[0].input.dims();
    if c != cfg.in_channels {
        return Err(shape_err!(
            "samples have {} channels, network expects {}",
            c,
            cfg.in_channels
        ));
    }
    for s in data {
        if s.input.dims() != [1, c, h, w] || s.target.dims() != [1, 1, h, w] {
            return Err(shape_err!(
                "sample dims {:?} / {:?} differ from {:?}",
                s.input.dims(),
                s.target.dims(),
                [1, c, h, w]
            ));
        }
    }
    Ok(())
}

/// Trains `params` in place, returning the per-iteration loss log.
///
/// Shuffling and dropout draw from separate streams of a generator seeded
/// with `cfg.seed`, so a run is reproducible bit for bit.
pub fn train(
    params: &mut NetworkParams<f32>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    data: &[TrainSample],
) -> Result<TrainLog> {
    cfg.validate()?;
    net.validate()?;
    check_samples(net, data)?;
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| param_err!("thread pool: {}", e))?;
        pool.install(|| train_loop(params, net, cfg, data))
    } else {
        train_loop(params, net, cfg, data)
    }
}

fn train_loop(
    params: &mut NetworkParams<f32>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    data: &[TrainSample],
) -> Result<TrainLog> {
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = Adam::new(params);
    let mut log = TrainLog::default();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in batches(&order, cfg.batch_size) {
            let inputs: Vec<&Tensor4<f32>> = batch.iter().map(|&i| &data[i].input).collect();
            let targets: Vec<&Tensor4<f32>> = batch.iter().map(|&i| &data[i].target).collect();
            let x = Tensor4::stack(&inputs)?;
            let t = Tensor4::stack(&targets)?;
            let (y, cache) = forward(params, net, &x, Mode::Train, &mut dropout_rng)?;
            let (loss, g) = l1_loss(&y, &t)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss {loss} at epoch {epoch}, iteration {iteration}"
                )));
            }
            let grads = backward(params, net, &cache, &g)?;
            let flat = grads.flat();
            if flat.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {epoch}, iteration {iteration} (loss {loss})"
                )));
            }
            adam.step(params, &flat, cfg);
            if !params.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite parameters after epoch {epoch}, iteration {iteration}"
                )));
            }
            log.records.push(LossRecord {
                epoch,
                iteration,
                loss: loss as f64,
            });
            iteration += 1;
            if cfg.max_iterations > 0 && iteration >= cfg.max_iterations {
                return Ok(log);
            }
        }
    }
    Ok(log)
}

/// Mean eval-mode L1 loss over `data`.
pub fn evaluate_loss(params: &NetworkParams<f32>, net: &NetworkConfig, data: &[TrainSample]) -> Result<f64> {
    check_samples(net, data)?;
    let mut total = 0.0;
    for s in data {
        let y = super::net::predict(params, net, &s.input)?;
        total += l1_loss(&y, &s.target)?.0 as f64;
    }
    Ok(total / data.len() as f64)
}
