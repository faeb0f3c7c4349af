//! End-to-end stages: flow estimation for a pair, full-frame prediction by
//! sliding windows, and the TOML pipeline configuration.

use crate::datasets::{augment_rotations, extract_patches, PatchConfig, PatchSample, ScenePair, SynthConfig};
use crate::densify::{densify, DensifyConfig, ImagePair};
use crate::epipolar::{ransac_essential, CameraModel, RansacConfig, RansacResult};
use crate::error::{param_err, shape_err, Error, Result};
use crate::matcher::{match_images, MatchConfig, MatchSet};
use crate::metrics::{Aggregation, DEFAULT_THRESHOLD};
use crate::nn::{predict, NetworkConfig, NetworkParams, TrainConfig};
use crate::tensor::{FlowField, Tensor4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Images only, 6 input channels.
    Cdnet,
    /// Images plus flow, 8 input channels.
    #[default]
    DofCdnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub variant: Variant,
    /// Divides every hidden layer width; 1 is the full network.
    pub width_divisor: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            variant: Variant::DofCdnet,
            width_divisor: 1,
        }
    }
}

impl NetworkSection {
    pub fn network(&self) -> NetworkConfig {
        let base = match self.variant {
            Variant::Cdnet => NetworkConfig::cdnet(),
            Variant::DofCdnet => NetworkConfig::dof_cdnet(),
        };
        base.with_width_divisor(self.width_divisor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub threshold: f64,
    /// Average scores over pairs instead of pooling pixels.
    pub per_pair: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            per_pair: true,
        }
    }
}

impl MetricsSection {
    pub fn aggregation(&self) -> Aggregation {
        if self.per_pair {
            Aggregation::PerPair
        } else {
            Aggregation::Pooled
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldSection {
    pub k: usize,
    /// Quarter-turn rotations of every training patch.
    pub augment: bool,
}

impl Default for FoldSection {
    fn default() -> Self {
        Self { k: 5, augment: true }
    }
}

/// Every tunable of the pipeline. Unknown keys are rejected; missing
/// sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds RANSAC, training, fold assignment and synthesis.
    pub seed: u64,
    /// Defaults to an equirectangular panorama spanning the image.
    pub camera: Option<CameraModel>,
    pub matcher: MatchConfig,
    pub ransac: RansacConfig,
    pub densify: DensifyConfig,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub patches: PatchConfig,
    pub folds: FoldSection,
    pub metrics: MetricsSection,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Sets the top-level seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.ransac.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.camera {
            c.validate()?;
        }
        self.densify.validate()?;
        self.network.network().validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.folds.k < 2 {
            return Err(param_err!("folds.k must be at least 2"));
        }
        if !(self.metrics.threshold > 0.0 && self.metrics.threshold < 1.0) {
            return Err(param_err!("metrics.threshold must lie in (0, 1)"));
        }
        if !(self.patches.d_max > 0.0) || self.patches.patch == 0 || self.patches.stride == 0 || self.patches.out == 0 {
            return Err(param_err!("patch sizes and d_max must be positive"));
        }
        Ok(())
    }

    pub fn camera_for(&self, width: usize, height: usize) -> CameraModel {
        self.camera
            .unwrap_or_else(|| CameraModel::equirectangular(width, height))
    }
}

/// Output of [`estimate_flow`].
#[derive(Clone, Debug)]
pub struct FlowEstimate {
    pub flow: FlowField,
    /// Tentative matches with RANSAC inlier flags set.
    pub matches: MatchSet,
    pub ransac: RansacResult,
}

/// Matching, robust essential-matrix fit and densification of the inliers.
pub fn estimate_flow(pair: &ImagePair, cam: &CameraModel, cfg: &PipelineConfig) -> Result<FlowEstimate> {
    let tentative = match_images(&pair.first, &pair.second, &cfg.matcher)?;
    let ransac = ransac_essential(&tentative, cam, &cfg.ransac)?;
    let matches = ransac.annotate(&tentative);
    let flow = densify(pair, &matches.inliers(), &cfg.densify)?;
    Ok(FlowEstimate { flow, matches, ransac })
}

/// The recorded flow of a pair when present, otherwise an estimate.
pub fn pair_flow(pair: &ScenePair, cfg: &PipelineConfig) -> Result<FlowField> {
    if let Some(f) = &pair.flow {
        return Ok(f.clone());
    }
    let images = ImagePair::new(pair.t0.clone(), pair.t1.clone())?;
    let cam = cfg.camera_for(pair.width(), pair.height());
    estimate_flow(&images, &cam, cfg)
        .map(|e| e.flow)
        .map_err(|e| Error::Ingestion(format!("{}: flow estimation failed: {e}", pair.key())))
}

/// Patches of the pairs whose keys are listed, in list order, with flow
/// channels when the configured network takes them.
pub fn patches_for(
    pairs: &[ScenePair],
    keys: &[&str],
    cfg: &PipelineConfig,
    augment: bool,
) -> Result<Vec<PatchSample>> {
    let selected = keys
        .iter()
        .map(|k| {
            pairs
                .iter()
                .find(|p| p.key() == *k)
                .ok_or_else(|| Error::Ingestion(format!("pair {k} is not in the dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let with_flow = cfg.network.network().uses_flow();
    let per_pair = selected
        .par_iter()
        .map(|p| {
            let flow = if with_flow { Some(pair_flow(p, cfg)?) } else { None };
            let patches = extract_patches(p, flow.as_ref(), &cfg.patches)?;
            if !augment {
                return Ok(patches);
            }
            let mut out = Vec::with_capacity(4 * patches.len());
            for s in &patches {
                out.extend(augment_rotations(s)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

pub const WINDOW: usize = 256;
pub const WINDOW_STRIDE: usize = 128;

/// Window offsets along one axis: every `stride`, with the last window
/// moved back to end at the border.
pub fn window_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + window <= len).collect();
    if *out.last().unwrap() + window < len {
        out.push(len - window);
    }
    out
}

fn pad_replicate(x: &Tensor4<f32>, h: usize, w: usize) -> Tensor4<f32> {
    let [n, c, h0, w0] = x.dims();
    Tensor4::from_fn([n, c, h, w], |[b, ch, y, xx]| {
        x.get(b, ch, y.min(h0 - 1), xx.min(w0 - 1))
    })
}

/// Change probability for every pixel of a full-frame input `1 x C x H x W`.
///
/// Inputs smaller than a window are edge-replicated up to it. Overlapping
/// window outputs are averaged.
pub fn predict_full(params: &NetworkParams<f32>, cfg: &NetworkConfig, input: &Tensor4<f32>) -> Result<Vec<f64>> {
    let [n, c, h, w] = input.dims();
    if n != 1 {
        return Err(shape_err!("full-frame prediction takes one item, got {}", n));
    }
    if c != cfg.in_channels {
        return Err(shape_err!(
            "network expects {} input channels, got {}{}",
            cfg.in_channels,
            c,
            if cfg.uses_flow() { " (flow required)" } else { "" }
        ));
    }
    let (hp, wp) = (h.max(WINDOW), w.max(WINDOW));
    let padded = if (hp, wp) == (h, w) {
        input.clone()
    } else {
        pad_replicate(input, hp, wp)
    };
    let ys = window_offsets(hp, WINDOW, WINDOW_STRIDE);
    let xs = window_offsets(wp, WINDOW, WINDOW_STRIDE);
    let mut sum = vec![0.0f64; hp * wp];
    let mut count = vec![0u32; hp * wp];
    let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    for chunk in windows.chunks(4) {
        let crops = chunk
            .iter()
            .map(|&(y, x)| padded.crop(y, x, WINDOW, WINDOW))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor4::stack(&crops.iter().collect::<Vec<_>>())?;
        let out = predict(params, cfg, &batch)?;
        for (b, &(y0, x0)) in chunk.iter().enumerate() {
            let plane = out.item(b);
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let i = (y0 + dy) * wp + x0 + dx;
                    sum[i] += plane[dy * WINDOW + dx] as f64;
                    count[i] += 1;
                }
            }
        }
    }
    let s_max = cfg.s_max as f64;
    let mut prob = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * wp + x;
            prob.push((sum[i] / count[i] as f64 / s_max).clamp(0.0, 1.0));
        }
    }
    Ok(prob)
}

/// 8-bit encoding of a probability, `round(255 p)` with halves rounded up.
pub fn probability_to_u8(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0) + 0.5).floor() as u8
}
