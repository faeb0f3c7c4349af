//! Scene pairs on disk, the patch pipeline, cross-validation folds and a
//! synthetic scene generator with exact ground truth.

use crate::epipolar::CameraModel;
use crate::error::{param_err, shape_err, Error, Result};
use crate::io::write_atomic;
use crate::nn::TrainSample;
use crate::tensor::{
    concat_inputs, normalize_flow, normalize_image, read_flo, write_flo, ChangeMask, FlowField, Image, Tensor4,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "TSUNAMI")]
    Tsunami,
    #[serde(rename = "GSV")]
    Gsv,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Tsunami => "TSUNAMI",
            Subset::Gsv => "GSV",
            Subset::Synth => "SYNTH",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TSUNAMI" => Ok(Subset::Tsunami),
            "GSV" => Ok(Subset::Gsv),
            "SYNTH" => Ok(Subset::Synth),
            _ => Err(Error::Ingestion(format!("unknown subset {s:?}"))),
        }
    }
}

/// Two views of a scene with the ground-truth change mask in the `t0` frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub subset: Subset,
    pub t0: Image,
    pub t1: Image,
    pub mask: ChangeMask,
    pub flow: Option<FlowField>,
}

impl ScenePair {
    pub fn new(id: impl Into<String>, subset: Subset, t0: Image, t1: Image, mask: ChangeMask) -> Result<Self> {
        let id = id.into();
        let dims = (t0.width(), t0.height());
        if (t1.width(), t1.height()) != dims || (mask.width(), mask.height()) != dims {
            return Err(shape_err!("pair {} has mismatched dims", id));
        }
        Ok(Self {
            id,
            subset,
            t0,
            t1,
            mask,
            flow: None,
        })
    }

    /// Identifier unique across subsets, `<subset>/<id>`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.subset, self.id)
    }

    pub fn width(&self) -> usize {
        self.t0.width()
    }

    pub fn height(&self) -> usize {
        self.t0.height()
    }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Loads every `<root>/<subset>/{t0,t1,mask}/<id>.png` triplet, plus
/// `flow/<id>.flo` when present. Pairs come back sorted by subset and id.
pub fn load_pcd(root: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    let root = root.as_ref();
    let mut subsets = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            subsets.push((name.parse::<Subset>()?, path));
        }
    }
    subsets.sort();
    let mut pairs = Vec::new();
    for (subset, dir) in subsets {
        let t0 = png_stems(&dir.join("t0"))?;
        let t1 = png_stems(&dir.join("t1"))?;
        let mask = png_stems(&dir.join("mask"))?;
        let all: BTreeSet<&String> = t0.iter().chain(&t1).chain(&mask).collect();
        for id in all {
            for (name, set) in [("t0", &t0), ("t1", &t1), ("mask", &mask)] {
                if !set.contains(id) {
                    return Err(Error::Ingestion(format!("{subset}/{id}: missing {name}/{id}.png")));
                }
            }
            let read = |p: &str| Image::read_png(dir.join(p).join(format!("{id}.png")));
            let ctx = |e: Error| Error::Ingestion(format!("{subset}/{id}: {e}"));
            let mask = ChangeMask::from_image(&read("mask").map_err(ctx)?);
            let mut pair = ScenePair::new(
                id.clone(),
                subset,
                read("t0").map_err(ctx)?,
                read("t1").map_err(ctx)?,
                mask,
            )
            .map_err(ctx)?;
            let flo = dir.join("flow").join(format!("{id}.flo"));
            if flo.is_file() {
                let flow = read_flo(&flo).map_err(ctx)?;
                if (flow.width(), flow.height()) != (pair.width(), pair.height()) {
                    return Err(Error::Ingestion(format!("{subset}/{id}: flow dims differ")));
                }
                pair.flow = Some(flow);
            }
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

/// Writes pairs in the layout read by [`load_pcd`].
pub fn write_dataset(root: impl AsRef<Path>, pairs: &[ScenePair]) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root)?;
    for p in pairs {
        let dir = root.join(p.subset.to_string());
        for sub in ["t0", "t1", "mask"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        p.t0.write_png(dir.join("t0").join(format!("{}.png", p.id)))?;
        p.t1.write_png(dir.join("t1").join(format!("{}.png", p.id)))?;
        p.mask.write_png(dir.join("mask").join(format!("{}.png", p.id)))?;
        if let Some(flow) = &p.flow {
            std::fs::create_dir_all(dir.join("flow"))?;
            write_flo(flow, dir.join("flow").join(format!("{}.flo", p.id)))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub patch: usize,
    pub stride: usize,
    pub out: usize,
    /// Flow displacement mapped to +-1 in the network input, in output pixels.
    pub d_max: f32,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch: 224,
            stride: 56,
            out: 256,
            d_max: 64.0,
        }
    }
}

/// Crop offsets `0, s, 2s, ...` up to the largest one that fits.
pub fn patch_positions(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(param_err!("patch and stride must be positive"));
    }
    if len < patch {
        return Err(shape_err!("extent {} is smaller than the {} patch", len, patch));
    }
    Ok((0..=(len - patch) / stride).map(|i| i * stride).collect())
}

/// Where a patch came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub pair: String,
    pub x: usize,
    pub y: usize,
    /// Quarter turns applied by augmentation.
    pub rotation: u8,
}

/// A network input with its target, both square.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `1 x C x out x out`, C = 8 with flow, 6 without.
    pub input: Tensor4<f32>,
    /// `1 x 1 x out x out` mask values in `[0, s_max]`.
    pub target: Tensor4<f32>,
    pub provenance: Provenance,
}

impl PatchSample {
    pub fn to_train_sample(&self) -> TrainSample {
        TrainSample {
            input: self.input.clone(),
            target: self.target.clone(),
        }
    }

    pub fn target_mask(&self) -> Result<ChangeMask> {
        ChangeMask::from_tensor(&self.target, 0, crate::tensor::S_MAX)
    }
}

/// Full-frame network input for a pair: normalized images and, when given,
/// flow divided by `d_max`.
pub fn pair_input(pair: &ScenePair, flow: Option<&FlowField>, d_max: f32) -> Result<Tensor4<f32>> {
    let a = normalize_image::<f32>(&pair.t0.to_rgb());
    let b = normalize_image::<f32>(&pair.t1.to_rgb());
    let f = flow.map(|f| normalize_flow::<f32>(f, d_max)).transpose()?;
    concat_inputs(&a, &b, f.as_ref())
}

/// Sliding-window crops of a pair, each resized to `out x out`.
///
/// Flow vectors are rescaled with the crop so they stay in output pixels.
pub fn extract_patches(pair: &ScenePair, flow: Option<&FlowField>, cfg: &PatchConfig) -> Result<Vec<PatchSample>> {
    if cfg.out == 0 {
        return Err(param_err!("output size must be positive"));
    }
    let xs = patch_positions(pair.width(), cfg.patch, cfg.stride)?;
    let ys = patch_positions(pair.height(), cfg.patch, cfg.stride)?;
    let scale = cfg.out as f32 / cfg.patch as f32;
    let flow = flow
        .map(|f| {
            if (f.width(), f.height()) != (pair.width(), pair.height()) {
                return Err(shape_err!("flow dims differ from pair {}", pair.id));
            }
            let u = f.u().iter().map(|v| v * scale).collect();
            let v = f.v().iter().map(|v| v * scale).collect();
            FlowField::new(f.width(), f.height(), u, v)
        })
        .transpose()?;
    let full = pair_input(pair, flow.as_ref(), cfg.d_max)?;
    let mask = pair.mask.to_tensor::<f32>();
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let input = full
                .crop(y, x, cfg.patch, cfg.patch)?
                .bilinear_resize(cfg.out, cfg.out)?;
            let s_max = pair.mask.s_max();
            let target = mask
                .crop(y, x, cfg.patch, cfg.patch)?
                .bilinear_resize(cfg.out, cfg.out)?
                .map(|v| v.clamp(0.0, s_max));
            out.push(PatchSample {
                input,
                target,
                provenance: Provenance {
                    pair: pair.key(),
                    x,
                    y,
                    rotation: 0,
                },
            });
        }
    }
    Ok(out)
}

/// Rotates a sample by one quarter turn; flow channels turn as vectors.
pub fn rotate_sample(s: &PatchSample) -> Result<PatchSample> {
    let [_, c, h, w] = s.input.dims();
    if h != w {
        return Err(shape_err!("rotation needs a square sample, got {}x{}", h, w));
    }
    let mut input = s.input.rotate90();
    if c == 8 {
        let u = input.plane(0, 6).to_vec();
        let v = input.plane(0, 7).to_vec();
        input.plane_mut(0, 6).iter_mut().zip(v).for_each(|(d, v)| *d = -v);
        input.plane_mut(0, 7).copy_from_slice(&u);
    }
    Ok(PatchSample {
        input,
        target: s.target.rotate90(),
        provenance: Provenance {
            rotation: (s.provenance.rotation + 1) % 4,
            ..s.provenance.clone()
        },
    })
}

/// The sample rotated by 0, 90, 180 and 270 degrees.
pub fn augment_rotations(s: &PatchSample) -> Result<Vec<PatchSample>> {
    let mut out = vec![s.clone()];
    for _ in 0..3 {
        let next = rotate_sample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Assignment of pair keys to `k` cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, key: &str) -> Option<usize> {
        self.assignments.get(key).copied()
    }

    pub fn test_keys(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn train_keys(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pair_id", "fold"]).map_err(csv_err)?;
        for (key, fold) in &self.assignments {
            w.write_record([key.as_str(), &fold.to_string()]).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses `pair_id,fold` rows; every fold index must be below `k`.
    pub fn from_csv(text: &[u8], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(param_err!("k must be at least 2"));
        }
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
        let header = r.headers().map_err(csv_err)?;
        if header.iter().collect::<Vec<_>>() != ["pair_id", "fold"] {
            return Err(Error::Format("fold plan header must be pair_id,fold".into()));
        }
        let mut assignments = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 2 || rec[0].is_empty() {
                return Err(Error::Format(format!("bad fold plan row {:?}", rec)));
            }
            let fold: usize = rec[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad fold index {:?}", &rec[1])))?;
            if fold >= k {
                return Err(Error::Format(format!("fold {fold} out of range for k = {k}")));
            }
            if assignments.insert(rec[0].to_string(), fold).is_some() {
                return Err(Error::Format(format!("duplicate pair {:?}", &rec[0])));
            }
        }
        Ok(Self { k, assignments })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>, k: usize) -> Result<Self> {
        Self::from_csv(&std::fs::read(path)?, k)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Stratified folds: keys of each subset are shuffled with a seeded
/// generator and dealt round-robin, so fold sizes per subset differ by at
/// most one.
pub fn make_folds(pairs: &[(String, Subset)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(param_err!("k must be at least 2"));
    }
    let mut by_subset: BTreeMap<Subset, Vec<&String>> = BTreeMap::new();
    for (key, subset) in pairs {
        by_subset.entry(*subset).or_default().push(key);
    }
    let mut assignments = BTreeMap::new();
    for (i, (subset, mut keys)) in by_subset.into_iter().enumerate() {
        if keys.len() < k {
            return Err(param_err!(
                "subset {} has {} pairs, fewer than k = {}",
                subset,
                keys.len(),
                k
            ));
        }
        keys.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        keys.shuffle(&mut rng);
        for (j, key) in keys.into_iter().enumerate() {
            if assignments.insert(key.clone(), j % k).is_some() {
                return Err(param_err!("duplicate pair {}", key));
            }
        }
    }
    Ok(FoldPlan { k, assignments })
}

/// Keys and subsets of a pair list, the input of [`make_folds`].
pub fn pair_keys(pairs: &[ScenePair]) -> Vec<(String, Subset)> {
    pairs.iter().map(|p| (p.key(), p.subset)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Number of sinusoids summed into the background texture.
    pub texture_waves: usize,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
    /// Peak deviation of the background from mid-gray.
    pub texture_contrast: f64,
    /// Mean horizontal disparity in pixels; its sign is drawn per pair.
    pub disparity: f64,
    /// Relative spread of the disparity field around its mean.
    pub disparity_variation: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Target fraction of changed pixels.
    pub change_fraction: f64,
    /// Standard deviation of gray-level noise added to `t1`.
    pub jitter: f64,
    /// Texture objects like the background instead of with bright stripes,
    /// so changes are found only by comparing the aligned views.
    pub camouflage: bool,
    /// Probability that an object is inserted (present in `t1` only) rather
    /// than deleted.
    pub insert_probability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 128,
            texture_waves: 6,
            min_wavelength: 24.0,
            max_wavelength: 80.0,
            texture_contrast: 90.0,
            disparity: 12.0,
            disparity_variation: 0.25,
            min_objects: 1,
            max_objects: 8,
            change_fraction: 0.1,
            jitter: 0.0,
            camouflage: false,
            insert_probability: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(param_err!("canvas must be at least 8x8"));
        }
        if !(0.0..=1.0).contains(&self.insert_probability) {
            return Err(param_err!(
                "insert_probability {} outside [0, 1]",
                self.insert_probability
            ));
        }
        if !(0.0..=1.0).contains(&self.change_fraction) {
            return Err(param_err!("change_fraction {} outside [0, 1]", self.change_fraction));
        }
        if !(self.min_wavelength > 2.0 && self.max_wavelength >= self.min_wavelength) {
            return Err(param_err!("wavelengths must satisfy 2 < min <= max"));
        }
        if !(self.disparity >= 0.0 && (0.0..1.0).contains(&self.disparity_variation)) {
            return Err(param_err!("disparity must be >= 0 with variation in [0, 1)"));
        }
        if self.min_objects > self.max_objects || self.texture_contrast < 0.0 || self.jitter < 0.0 {
            return Err(param_err!("invalid object range, contrast or jitter"));
        }
        Ok(())
    }

    /// A pinhole camera with a roughly 53 degree horizontal field of view.
    pub fn camera(&self) -> CameraModel {
        CameraModel::Pinhole {
            fx: self.width as f64,
            fy: self.width as f64,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

/// Smooth RGB texture: a sum of sinusoids around mid-gray.
struct Texture {
    waves: Vec<([f64; 2], f64, f64, [f64; 3])>,
    base: [f64; 3],
}

impl Texture {
    fn random(rng: &mut impl Rng, n: usize, lmin: f64, lmax: f64, contrast: f64, base: [f64; 3]) -> Self {
        let waves = (0..n)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..TAU);
                let lambda = if lmax > lmin {
                    rng.random_range(lmin..lmax)
                } else {
                    lmin
                };
                let k = TAU / lambda;
                let amp = contrast / n.max(1) as f64 * rng.random_range(0.5..1.0);
                let tint = [
                    rng.random_range(0.4..1.0),
                    rng.random_range(0.4..1.0),
                    rng.random_range(0.4..1.0),
                ];
                (
                    [k * theta.cos(), k * theta.sin()],
                    rng.random_range(0.0..TAU),
                    amp,
                    tint,
                )
            })
            .collect();
        Self { waves, base }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, amp, tint) in &self.waves {
            let s = amp * (k[0] * x + k[1] * y + phase).sin();
            for ch in 0..3 {
                c[ch] += s * tint[ch];
            }
        }
        c
    }
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

struct Object {
    shape: Shape,
    /// Present in `t1` only when true, in `t0` only otherwise.
    inserted: bool,
    color: [f64; 3],
    stripe: [f64; 2],
    texture: Option<Texture>,
}

impl Object {
    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some(t) = &self.texture {
            return t.eval(x, y);
        }
        let s = (self.stripe[0] * x + self.stripe[1] * y).sin();
        self.color.map(|c| c + 40.0 * s)
    }
}

/// A generated pair with its exact ground truth.
#[derive(Clone, Debug)]
pub struct SynthPair {
    /// The pair, with `flow` set to the true `t0 -> t1` displacement.
    pub pair: ScenePair,
    /// Pixels of `t1` covered by inserted objects.
    pub t1_changes: Vec<bool>,
}

/// Generates pair `index` of the stream defined by `cfg.seed`.
///
/// The background is a continuous texture seen from two horizontally offset
/// positions: `t0` samples it directly, `t1` at `x - d(x0, y)` where `d` is a
/// smooth disparity field, so the true flow is `(d, 0)`. Changes are shapes
/// present in only one view; the mask marks them in the `t0` frame, with
/// inserted shapes mapped back through the flow.
pub fn synth_generate_indexed(cfg: &SynthConfig, index: u64) -> Result<SynthPair> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let texture = Texture::random(
        &mut rng,
        cfg.texture_waves,
        cfg.min_wavelength,
        cfg.max_wavelength,
        cfg.texture_contrast,
        [128.0; 3],
    );
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let span = (w.max(h) as f64) * 2.0;
    let field: Vec<([f64; 2], f64)> = (0..2)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..TAU);
            let k = TAU / (span * rng.random_range(1.0..2.0));
            ([k * theta.cos(), k * theta.sin()], rng.random_range(0.0..TAU))
        })
        .collect();
    let disparity = |x: f64, y: f64| {
        let g: f64 = field.iter().map(|(k, p)| 0.5 * (k[0] * x + k[1] * y + p).sin()).sum();
        sign * cfg.disparity * (1.0 + cfg.disparity_variation * g)
    };

    let mut flow_u = vec![0.0f32; w * h];
    let mut source_x = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            flow_u[y * w + x] = disparity(xf, yf) as f32;
            // Invert x1 = x0 + d(x0, y); d varies slowly, so this contracts.
            let mut x0 = xf - disparity(xf, yf);
            for _ in 0..30 {
                x0 = xf - disparity(x0, yf);
            }
            source_x[y * w + x] = x0;
        }
    }
    let flow = FlowField::new(w, h, flow_u.clone(), vec![0.0; w * h])?;

    // Objects, added until the changed fraction reaches the target.
    let mut objects: Vec<Object> = Vec::new();
    let mut mask = vec![false; w * h];
    let mut t1_changes = vec![false; w * h];
    let target = cfg.change_fraction;
    let side = w.min(h) as f64;
    let total = (w * h) as f64;
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count() as f64 / total;
    if target > 0.0 {
        let mut attempts = 0;
        while objects.len() < cfg.max_objects && attempts < 200 {
            attempts += 1;
            let frac = count(&mask);
            if objects.len() >= cfg.min_objects && frac >= target - 0.01 {
                break;
            }
            let rx = rng.random_range(0.06..0.2) * side;
            let ry = rng.random_range(0.06..0.2) * side;
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let shape = if rng.random::<bool>() {
                Shape::Ellipse { cx, cy, rx, ry }
            } else {
                Shape::Rect {
                    x0: cx - rx,
                    y0: cy - ry,
                    x1: cx + rx,
                    y1: cy + ry,
                }
            };
            let inserted = rng.random_bool(cfg.insert_probability);
            let hue: f64 = rng.random_range(0.0..TAU);
            let color = [0.0, TAU / 3.0, 2.0 * TAU / 3.0].map(|o| 128.0 + 90.0 * (hue + o).cos());
            let sk = TAU / rng.random_range(5.0..10.0);
            let st: f64 = rng.random_range(0.0..TAU);
            let texture = cfg.camouflage.then(|| {
                let base = [0; 3].map(|_| 128.0 + rng.random_range(-25.0..25.0));
                Texture::random(
                    &mut rng,
                    cfg.texture_waves,
                    cfg.min_wavelength,
                    cfg.max_wavelength,
                    cfg.texture_contrast,
                    base,
                )
            });
            let obj = Object {
                shape,
                inserted,
                color,
                stripe: [sk * st.cos(), sk * st.sin()],
                texture,
            };
            let mut new_mask = mask.clone();
            let mut new_t1 = t1_changes.clone();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if inserted {
                        if shape.contains(x as f64 + flow_u[i] as f64, y as f64) {
                            new_mask[i] = true;
                        }
                        if shape.contains(x as f64, y as f64) {
                            new_t1[i] = true;
                        }
                    } else if shape.contains(x as f64, y as f64) {
                        new_mask[i] = true;
                    }
                }
            }
            if count(&new_mask) <= target + 0.02 || objects.len() < cfg.min_objects && count(&new_mask) <= target + 0.05
            {
                mask = new_mask;
                t1_changes = new_t1;
                objects.push(obj);
            }
        }
    }

    let mut t0 = Image::filled(w, h, 3, 0)?;
    let mut t1 = Image::filled(w, h, 3, 0)?;
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut c0 = texture.eval(xf, yf);
            let mut c1 = texture.eval(source_x[y * w + x], yf);
            for o in &objects {
                if o.inserted && o.shape.contains(xf, yf) {
                    c1 = o.color_at(xf, yf);
                }
                if !o.inserted && o.shape.contains(xf, yf) {
                    c0 = o.color_at(xf, yf);
                }
            }
            for ch in 0..3 {
                let noise = if cfg.jitter > 0.0 {
                    cfg.jitter * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    0.0
                };
                t0.set_sample(x, y, ch, quantize(c0[ch]));
                t1.set_sample(x, y, ch, quantize(c1[ch] + noise));
            }
        }
    }
    let mask_values = mask.iter().map(|&m| if m { 255.0 } else { 0.0 }).collect();
    let mut pair = ScenePair::new(
        format!("synth_{index:04}"),
        Subset::Synth,
        t0,
        t1,
        ChangeMask::new(w, h, mask_values, crate::tensor::S_MAX)?,
    )?;
    pair.flow = Some(flow);
    Ok(SynthPair { pair, t1_changes })
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthPair> {
    synth_generate_indexed(cfg, 0)
}

/// `n` pairs from the stream of `cfg.seed`, generated in parallel.
pub fn synth_dataset(cfg: &SynthConfig, n: usize) -> Result<Vec<SynthPair>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| synth_generate_indexed(cfg, i))
        .collect()
}

/// Largest per-channel difference, in units of full scale, between `t0`
/// and `t1` sampled bilinearly at `x + flow(x)`.
///
/// Pixels changed in `t0`, pixels whose target leaves the frame and pixels
/// whose bilinear footprint touches a changed `t1` pixel are skipped.
pub fn warp_error(pair: &ScenePair, flow: &FlowField, t1_changes: &[bool]) -> Result<f64> {
    let (w, h) = (pair.width(), pair.height());
    if (flow.width(), flow.height()) != (w, h) || t1_changes.len() != w * h {
        return Err(shape_err!("warp check inputs differ in size"));
    }
    let changed = pair.mask.binarize();
    let (a, b) = (pair.t0.to_rgb(), pair.t1.to_rgb());
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if changed[y * w + x] {
                continue;
            }
            let (u, v) = flow.at(x, y);
            let (x1, y1) = (x as f64 + u as f64, y as f64 + v as f64);
            if x1 < 0.0 || y1 < 0.0 || x1 > (w - 1) as f64 || y1 > (h - 1) as f64 {
                continue;
            }
            let (xa, ya) = (x1.floor() as usize, y1.floor() as usize);
            let (xb, yb) = ((xa + 1).min(w - 1), (ya + 1).min(h - 1));
            if [(xa, ya), (xb, ya), (xa, yb), (xb, yb)]
                .iter()
                .any(|&(i, j)| t1_changes[j * w + i])
            {
                continue;
            }
            let (fx, fy) = (x1 - xa as f64, y1 - ya as f64);
            for ch in 0..3 {
                let s = |i: usize, j: usize| b.sample(i, j, ch) as f64;
                let top = s(xa, ya) * (1.0 - fx) + s(xb, ya) * fx;
                let bot = s(xa, yb) * (1.0 - fx) + s(xb, yb) * fx;
                let warped = top * (1.0 - fy) + bot * fy;
                worst = worst.max((warped - a.sample(x, y, ch) as f64).abs() / 255.0);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::new(w, h, 1, (0..w * h).map(|i| ((i % w) * 255 / w.max(1)) as u8).collect()).unwrap()
    }

    fn pair(w: usize, h: usize, id: &str) -> ScenePair {
        ScenePair::new(id, Subset::Tsunami, ramp(w, h), ramp(w, h), ChangeMask::zeros(w, h)).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_positions(1024, 224, 56).unwrap().len(), 15);
        assert_eq!(patch_positions(224, 224, 56).unwrap(), vec![0]);
        assert_eq!(*patch_positions(1024, 224, 56).unwrap().last().unwrap(), 784);
        assert!(patch_positions(200, 224, 56).is_err());
    }

    #[test]
    fn crop_matches_direct_indexing() {
        let mut p = pair(400, 224, "a");
        p.t0 = Image::new(
            400,
            224,
            1,
            (0..400 * 224)
                .map(|i| ((i % 400) as u8).wrapping_mul(3) ^ (i / 400) as u8)
                .collect(),
        )
        .unwrap();
        let cfg = PatchConfig {
            out: 224,
            ..PatchConfig::default()
        };
        let patches = extract_patches(&p, None, &cfg).unwrap();
        assert_eq!(patches.len(), 4);
        let s = &patches[1];
        assert_eq!((s.provenance.x, s.provenance.y), (56, 0));
        for y in [0, 100, 223] {
            for x in [0, 17, 223] {
                let expect = p.t0.sample(56 + x, y, 0) as f32 / 127.5 - 1.0;
                assert_eq!(s.input.get(0, 0, y, x), expect);
            }
        }
    }

    #[test]
    fn patches_have_expected_shape_and_range() {
        let mut p = pair(448, 224, "b");
        p.mask = ChangeMask::new(
            448,
            224,
            (0..448 * 224).map(|i| if i % 7 == 0 { 255.0 } else { 0.0 }).collect(),
            255.0,
        )
        .unwrap();
        let flow = FlowField::constant(448, 224, 10.0, -3.0);
        let ps = extract_patches(&p, Some(&flow), &PatchConfig::default()).unwrap();
        assert_eq!(ps.len(), 5);
        for s in &ps {
            assert_eq!(s.input.dims(), [1, 8, 256, 256]);
            assert_eq!(s.target.dims(), [1, 1, 256, 256]);
            assert!(s.target.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
            let u = s.input.get(0, 6, 10, 10);
            assert!((u - 10.0 * 256.0 / 224.0 / 64.0).abs() < 1e-5);
        }
        assert!(
            extract_patches(&p, None, &PatchConfig::default()).unwrap()[0]
                .input
                .channels()
                == 6
        );
    }

    #[test]
    fn rotations_form_a_group() {
        let mut p = pair(224, 224, "c");
        p.t1 = Image::new(224, 224, 1, (0..224 * 224).map(|i| (i * 7 % 251) as u8).collect()).unwrap();
        let flow = FlowField::new(
            224,
            224,
            (0..224 * 224).map(|i| (i % 13) as f32).collect(),
            (0..224 * 224).map(|i| -((i % 5) as f32)).collect(),
        )
        .unwrap();
        let s = &extract_patches(
            &p,
            Some(&flow),
            &PatchConfig {
                out: 128,
                ..PatchConfig::default()
            },
        )
        .unwrap()[0];
        let rots = augment_rotations(s).unwrap();
        assert_eq!(&rots[0], s);
        let back = rotate_sample(&rots[3]).unwrap();
        assert_eq!(back.input, s.input);
        assert_eq!(back.target, s.target);
        assert_eq!(back.provenance, s.provenance);
    }

    #[test]
    fn rotated_flow_channels_match_rotated_field() {
        let flow = FlowField::new(
            4,
            4,
            (0..16).map(|i| i as f32).collect(),
            (0..16).map(|i| 0.5 * i as f32).collect(),
        )
        .unwrap();
        let p = pair(4, 4, "d");
        let cfg = PatchConfig {
            patch: 4,
            stride: 4,
            out: 4,
            d_max: 100.0,
        };
        let s = &extract_patches(&p, Some(&flow), &cfg).unwrap()[0];
        let r = rotate_sample(s).unwrap();
        let expect = normalize_flow::<f32>(&flow.rotate90(), 100.0).unwrap();
        assert_eq!(r.input.plane(0, 6), expect.plane(0, 0));
        assert_eq!(r.input.plane(0, 7), expect.plane(0, 1));
    }

    #[test]
    fn rotated_shift_still_warps_consistently() {
        // A synthetic shift, rotated: t1 sampled at x + rotated flow must
        // reproduce rotated t0.
        let cfg = SynthConfig {
            width: 64,
            height: 64,
            disparity: 5.0,
            disparity_variation: 0.0,
            change_fraction: 0.0,
            ..SynthConfig::default()
        };
        let sp = synth_generate(&cfg).unwrap();
        let flow = sp.pair.flow.clone().unwrap();
        let pc = PatchConfig {
            patch: 64,
            stride: 64,
            out: 64,
            d_max: 64.0,
        };
        let s = &extract_patches(&sp.pair, Some(&flow), &pc).unwrap()[0];
        let r = rotate_sample(s).unwrap();
        let to_img = |ch0: usize| {
            let t = Tensor4::from_vec(
                [1, 3, 64, 64],
                r.input.item(0)[ch0 * 64 * 64..(ch0 + 3) * 64 * 64].to_vec(),
            )
            .unwrap();
            crate::tensor::denormalize_image(&t, 0).unwrap()
        };
        let u: Vec<f32> = r.input.plane(0, 6).iter().map(|v| v * 64.0).collect();
        let v: Vec<f32> = r.input.plane(0, 7).iter().map(|v| v * 64.0).collect();
        let rflow = FlowField::new(64, 64, u, v).unwrap();
        assert!(rflow.u().iter().all(|&c| c.abs() < 1e-4));
        let rpair = ScenePair::new("r", Subset::Synth, to_img(0), to_img(3), ChangeMask::zeros(64, 64)).unwrap();
        assert!(warp_error(&rpair, &rflow, &vec![false; 64 * 64]).unwrap() < 2.0 / 255.0);
    }

    #[test]
    fn non_square_rotation_fails() {
        let s = PatchSample {
            input: Tensor4::zeros([1, 6, 4, 8]),
            target: Tensor4::zeros([1, 1, 4, 8]),
            provenance: Provenance {
                pair: "x".into(),
                x: 0,
                y: 0,
                rotation: 0,
            },
        };
        assert!(rotate_sample(&s).is_err());
    }

    fn keys(n: usize, subset: Subset) -> Vec<(String, Subset)> {
        (0..n).map(|i| (format!("{subset}/{i:03}"), subset)).collect()
    }

    #[test]
    fn folds_are_stratified_partitions() {
        let mut items = keys(100, Subset::Tsunami);
        items.extend(keys(100, Subset::Gsv));
        let plan = make_folds(&items, 5, 3).unwrap();
        assert_eq!(plan, make_folds(&items, 5, 3).unwrap());
        assert_ne!(plan, make_folds(&items, 5, 4).unwrap());
        let mut seen = BTreeSet::new();
        for f in 0..5 {
            let test = plan.test_keys(f);
            for s in ["TSUNAMI/", "GSV/"] {
                assert_eq!(test.iter().filter(|k| k.starts_with(s)).count(), 20);
            }
            assert_eq!(plan.train_keys(f).len(), 160);
            for k in test {
                assert!(seen.insert(k.to_string()));
            }
        }
        assert_eq!(seen.len(), 200);
        assert!(make_folds(&keys(4, Subset::Gsv), 5, 0).is_err());
    }

    #[test]
    fn uneven_subsets_differ_by_at_most_one() {
        let plan = make_folds(&keys(23, Subset::Synth), 5, 1).unwrap();
        let sizes: Vec<usize> = (0..5).map(|f| plan.test_keys(f).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn fold_csv_round_trip_and_rejections() {
        let plan = make_folds(&keys(10, Subset::Gsv), 5, 0).unwrap();
        let text = plan.to_csv().unwrap();
        assert!(text.starts_with("pair_id,fold\n"));
        assert_eq!(FoldPlan::from_csv(text.as_bytes(), 5).unwrap(), plan);
        assert!(FoldPlan::from_csv(b"pair_id,fold\na,5\n", 5).is_err());
        assert!(FoldPlan::from_csv(b"pair_id,fold\na,1\na,2\n", 5).is_err());
        assert!(FoldPlan::from_csv(b"id,fold\na,1\n", 5).is_err());
        assert!(FoldPlan::from_csv(b"pair_id,fold\na,x\n", 5).is_err());
        assert!(FoldPlan::from_csv(b"pair_id,fold\na,1,2\n", 5).is_err());
    }

    #[test]
    fn pcd_layout_round_trip_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut pairs: Vec<ScenePair> = (0..3).map(|i| pair(16, 8, &format!("{i:02}"))).collect();
        pairs[1].subset = Subset::Gsv;
        pairs[2].flow = Some(FlowField::constant(16, 8, 1.5, -2.0));
        write_dataset(dir.path(), &pairs).unwrap();
        let loaded = load_pcd(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].key(), "TSUNAMI/00");
        assert_eq!(loaded[2].key(), "GSV/01");
        assert_eq!(loaded[1].flow, pairs[2].flow);
        assert_eq!(loaded[0].t0.to_rgb(), pairs[0].t0.to_rgb());
        std::fs::remove_file(dir.path().join("TSUNAMI/mask/02.png")).unwrap();
        let err = load_pcd(dir.path()).unwrap_err().to_string();
        assert!(err.contains("02") && err.contains("mask"), "{err}");
    }

    #[test]
    fn two_hundred_pairs_in_two_subsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut pairs = Vec::new();
        for subset in [Subset::Tsunami, Subset::Gsv] {
            for i in 0..100 {
                let mut p = pair(8, 8, &format!("{i:03}"));
                p.subset = subset;
                pairs.push(p);
            }
        }
        write_dataset(dir.path(), &pairs).unwrap();
        let loaded = load_pcd(dir.path()).unwrap();
        assert_eq!(loaded.len(), 200);
        assert_eq!(loaded.iter().filter(|p| p.subset == Subset::Gsv).count(), 100);
    }

    #[test]
    fn null_synth_config_gives_identical_views() {
        let cfg = SynthConfig {
            disparity: 0.0,
            change_fraction: 0.0,
            ..SynthConfig::default()
        };
        let sp = synth_generate(&cfg).unwrap();
        assert_eq!(sp.pair.t0, sp.pair.t1);
        assert!(sp.pair.flow.unwrap().u().iter().all(|&u| u == 0.0));
        assert!(sp.pair.mask.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synth_is_seeded() {
        let cfg = SynthConfig {
            seed: 5,
            ..SynthConfig::default()
        };
        let a = synth_generate_indexed(&cfg, 3).unwrap();
        let b = synth_generate_indexed(&cfg, 3).unwrap();
        assert_eq!(a.pair, b.pair);
        assert_ne!(a.pair.t0, synth_generate_indexed(&cfg, 4).unwrap().pair.t0);
    }

    #[test]
    fn synth_change_fraction_tracks_target() {
        let cfg = SynthConfig {
            width: 128,
            height: 96,
            ..SynthConfig::default()
        };
        let mut total = 0.0;
        for i in 0..100 {
            let f = synth_generate_indexed(&cfg, i).unwrap().pair.mask.changed_fraction();
            assert!((f - 0.1).abs() <= 0.05, "pair {i}: {f}");
            total += f;
        }
        assert!((total / 100.0 - 0.1).abs() <= 0.05);
    }

    #[test]
    fn synth_flow_warps_t0_onto_t1() {
        for (i, d) in [(0u64, 12.0), (1, 8.0), (2, 20.0), (3, 3.5)] {
            let cfg = SynthConfig {
                disparity: d,
                ..SynthConfig::default()
            };
            let sp = synth_generate_indexed(&cfg, i).unwrap();
            let flow = sp.pair.flow.clone().unwrap();
            let err = warp_error(&sp.pair, &flow, &sp.t1_changes).unwrap();
            assert!(err < 2.0 / 255.0, "pair {i}: {}", err * 255.0);
            let mags = flow.magnitudes();
            assert!(mags.iter().all(|&m| m >= 0.75 * d as f32 - 1e-3));
        }
    }
}
