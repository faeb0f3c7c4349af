use crate::Global;
use clap::{Args, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use viewchange::datasets::{
    load_pcd, make_folds, pair_input, pair_keys, synth_generate_indexed, write_dataset, FoldPlan, ScenePair, Subset,
};
use viewchange::densify::ImagePair;
use viewchange::io::write_atomic;
use viewchange::metrics::{binarize, evaluate_fold, overlay, EvalItem};
use viewchange::nn::{load_checkpoint, save_checkpoint, train as train_network, NetworkParams};
use viewchange::pipeline::{estimate_flow, patches_for, predict_full, probability_to_u8, PipelineConfig};
use viewchange::tensor::{flow_to_color, read_flo, write_flo, ChangeMask, Image};
use viewchange::Error;

/// A command failure and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::NoModel(_)) => 2,
            Failure::Core(Error::Divergence(_)) => 3,
            Failure::Core(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Loads the configuration and applies the global flags.
pub fn setup(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::read(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = g.threads {
        if n == 1 {
            cfg.train.deterministic = true;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<Image> {
    Image::read_png(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    #[arg(long)]
    pub t0: PathBuf,
    #[arg(long)]
    pub t1: PathBuf,
    /// Output flow in Middlebury .flo format.
    #[arg(long)]
    pub out: PathBuf,
    /// Tentative matches with RANSAC inlier flags.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    /// Color-coded flow image.
    #[arg(long)]
    pub color: Option<PathBuf>,
}

pub fn flow(cfg: &PipelineConfig, a: &FlowArgs) -> Result<()> {
    let pair = ImagePair::new(read_image(&a.t0)?, read_image(&a.t1)?)?;
    let cam = cfg.camera_for(pair.width(), pair.height());
    let est = estimate_flow(&pair, &cam, cfg).map_err(|e| match e {
        Error::InsufficientData(m) => Error::NoModel(m),
        e => e,
    })?;
    let color = a.color.as_ref().map(|_| flow_to_color(&est.flow, None)).transpose()?;
    for p in [Some(&a.out), a.matches.as_ref(), a.color.as_ref()]
        .into_iter()
        .flatten()
    {
        ensure_parent(p)?;
    }
    write_flo(&est.flow, &a.out)?;
    if let Some(p) = &a.matches {
        est.matches.write(p)?;
    }
    if let (Some(p), Some(img)) = (&a.color, color) {
        img.write_png(p)?;
    }
    println!(
        "{} matches, {} inliers after {} RANSAC iterations",
        est.matches.len(),
        est.matches.inlier_count(),
        est.ransac.iterations_run
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset root; pairs go to `<out>/SYNTH`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
}

pub fn synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<()> {
    use rayon::prelude::*;
    let pairs = (0..a.count as u64)
        .into_par_iter()
        .map(|i| synth_generate_indexed(&cfg.synth, i).map(|s| s.pair))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let root = a.out.join(Subset::Synth.to_string());
    for sub in ["t0", "t1", "mask", "flow"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    write_dataset(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), root.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root in the `<subset>/{t0,t1,mask}/<id>.png` layout.
    #[arg(long)]
    pub data: PathBuf,
    /// Fold held out for testing.
    #[arg(long)]
    pub fold: usize,
    /// Fold assignment CSV; created with the configured seed when absent.
    /// Defaults to `<data>/folds.csv`.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn fold_plan(cfg: &PipelineConfig, pairs: &[ScenePair], path: &Path) -> Result<FoldPlan> {
    if path.exists() {
        let plan = FoldPlan::read(path, cfg.folds.k)?;
        if let Some(p) = pairs.iter().find(|p| plan.fold_of(&p.key()).is_none()) {
            return Err(usage(format!("{} has no fold for pair {}", path.display(), p.key())));
        }
        return Ok(plan);
    }
    let plan = make_folds(&pair_keys(pairs), cfg.folds.k, cfg.seed)?;
    plan.write(path)?;
    Ok(plan)
}

pub fn train(cfg: &PipelineConfig, a: &TrainArgs) -> Result<()> {
    if a.fold >= cfg.folds.k {
        return Err(usage(format!(
            "fold {} out of range, valid folds are 0-{}",
            a.fold,
            cfg.folds.k - 1
        )));
    }
    let pairs = load_pcd(&a.data)?;
    let plan_path = a.folds.clone().unwrap_or_else(|| a.data.join("folds.csv"));
    let plan = fold_plan(cfg, &pairs, &plan_path)?;
    let present: BTreeSet<String> = pairs.iter().map(|p| p.key()).collect();
    let keys: Vec<&str> = plan
        .train_keys(a.fold)
        .into_iter()
        .filter(|k| present.contains(*k))
        .collect();
    let samples: Vec<_> = patches_for(&pairs, &keys, cfg, cfg.folds.augment)?
        .iter()
        .map(|s| s.to_train_sample())
        .collect();
    if samples.is_empty() {
        return Err(Failure::Core(Error::InsufficientData(format!(
            "fold {} has no training patches",
            a.fold
        ))));
    }
    let net = cfg.network.network();
    let mut params = NetworkParams::init(&net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let log = train_network(&mut params, &net, &cfg.train, &samples)?;
    ensure_parent(&a.checkpoint)?;
    save_checkpoint(&a.checkpoint, &params, &net)?;
    if let Some(p) = &a.log {
        ensure_parent(p)?;
        write_atomic(p, log.to_csv().as_bytes())?;
    }
    println!(
        "trained on {} pairs, {} patches; final epoch loss {:.4}",
        keys.len(),
        samples.len(),
        log.final_epoch_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub t0: PathBuf,
    #[arg(long)]
    pub t1: PathBuf,
    /// Flow from t0 to t1, required by flow-input networks.
    #[arg(long, conflicts_with = "estimate_flow")]
    pub flow: Option<PathBuf>,
    /// Estimate the flow instead of reading it.
    #[arg(long)]
    pub estimate_flow: bool,
    /// Change probability as 8-bit grayscale, round(255 p).
    #[arg(long)]
    pub out: PathBuf,
    /// t0 tinted by the change probability.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

pub fn predict(cfg: &PipelineConfig, a: &PredictArgs) -> Result<()> {
    let (net, params) = load_checkpoint(&a.checkpoint)?;
    let (t0, t1) = (read_image(&a.t0)?, read_image(&a.t1)?);
    let pair = ScenePair::new(
        "input",
        Subset::Synth,
        t0.clone(),
        t1.clone(),
        ChangeMask::zeros(t0.width(), t0.height()),
    )?;
    let flow = match (net.uses_flow(), &a.flow, a.estimate_flow) {
        (true, Some(p), _) => Some(read_flo(p)?),
        (true, None, true) => {
            let images = ImagePair::new(t0.clone(), t1)?;
            Some(estimate_flow(&images, &cfg.camera_for(pair.width(), pair.height()), cfg)?.flow)
        }
        (true, None, false) => {
            return Err(usage("the checkpoint takes flow input; pass --flow or --estimate-flow"));
        }
        (false, None, false) => None,
        (false, _, _) => return Err(usage("the checkpoint takes images only; drop --flow")),
    };
    if let Some(f) = &flow {
        if (f.width(), f.height()) != (pair.width(), pair.height()) {
            return Err(usage("flow dimensions differ from the images"));
        }
    }
    let input = pair_input(&pair, flow.as_ref(), cfg.patches.d_max)?;
    let prob = predict_full(&params, &net, &input)?;
    let out = Image::new(
        pair.width(),
        pair.height(),
        1,
        prob.iter().map(|&p| probability_to_u8(p)).collect(),
    )?;
    let tinted = a.overlay.as_ref().map(|_| tint(&t0, &prob)).transpose()?;
    ensure_parent(&a.out)?;
    out.write_png(&a.out)?;
    if let (Some(p), Some(img)) = (&a.overlay, tinted) {
        ensure_parent(p)?;
        img.write_png(p)?;
    }
    Ok(())
}

fn tint(base: &Image, prob: &[f64]) -> Result<Image> {
    let rgb = base.to_rgb();
    let mut out = rgb.clone();
    for y in 0..rgb.height() {
        for x in 0..rgb.width() {
            let p = prob[y * rgb.width() + x];
            for ch in 0..3 {
                let target = if ch == 0 { 255.0 } else { 0.0 };
                let v = rgb.sample(x, y, ch) as f64 * (1.0 - 0.6 * p) + 0.6 * p * target;
                out.set_sample(x, y, ch, v.round() as u8);
            }
        }
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of probability PNGs named `<id>.png`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks with the same names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report CSV: one row per pair, then mean and std rows.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-pair TP/FP/FN overlays.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

pub fn evaluate(cfg: &PipelineConfig, a: &EvaluateArgs) -> Result<()> {
    let preds = png_ids(&a.pred)?;
    let gts = png_ids(&a.gt)?;
    if let Some(id) = preds.symmetric_difference(&gts).next() {
        let side = if gts.contains(id) { "prediction" } else { "ground truth" };
        return Err(usage(format!("missing {side} for {id}")));
    }
    let mut loaded = Vec::with_capacity(preds.len());
    for id in &preds {
        let p = read_image(&a.pred.join(format!("{id}.png")))?;
        let g = ChangeMask::from_image(&read_image(&a.gt.join(format!("{id}.png")))?);
        if (p.width(), p.height()) != (g.width(), g.height()) {
            return Err(usage(format!("{id}: prediction and ground truth differ in size")));
        }
        let prob: Vec<f64> = p.luma().iter().map(|v| v / 255.0).collect();
        loaded.push((id.clone(), prob, g));
    }
    let items: Vec<EvalItem> = loaded.iter().map(|(id, prob, gt)| EvalItem { id, prob, gt }).collect();
    let report = evaluate_fold(&items, cfg.metrics.threshold, cfg.metrics.aggregation())?;
    let overlays = match &a.overlays {
        Some(_) => loaded
            .iter()
            .map(|(_, prob, gt)| overlay(&gt.to_image(), &binarize(prob, cfg.metrics.threshold)?, &gt.binarize()))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    ensure_parent(&a.out)?;
    write_atomic(&a.out, report.to_csv()?.as_bytes())?;
    if let Some(dir) = &a.overlays {
        std::fs::create_dir_all(dir)?;
        for ((id, _, _), img) in loaded.iter().zip(&overlays) {
            img.write_png(dir.join(format!("{id}.png")))?;
        }
    }
    println!(
        "{} pairs: F1 {:.4} (std {:.4}), mIOU {:.4} (std {:.4})",
        report.pairs.len(),
        report.f1.mean,
        report.f1.std,
        report.miou.mean,
        report.miou.std
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[command(subcommand)]
    pub what: Visual,
}

#[derive(Subcommand, Debug)]
pub enum Visual {
    /// Color-code a .flo file: hue is direction, saturation magnitude.
    Flow {
        #[arg(long)]
        flo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Magnitude drawn at full saturation; defaults to the field maximum.
        #[arg(long)]
        max_magnitude: Option<f32>,
    },
    /// Mark true positives green, false positives red and misses blue.
    Overlay {
        /// Probability PNG.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth mask PNG.
        #[arg(long)]
        gt: PathBuf,
        /// Background image; the mask is used when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

pub fn visualize(a: &VisualizeArgs) -> Result<()> {
    match &a.what {
        Visual::Flow {
            flo,
            out,
            max_magnitude,
        } => {
            let img = flow_to_color(&read_flo(flo)?, *max_magnitude)?;
            ensure_parent(out)?;
            img.write_png(out)?;
        }
        Visual::Overlay {
            pred,
            gt,
            image,
            out,
            threshold,
        } => {
            let p = read_image(pred)?;
            let g = ChangeMask::from_image(&read_image(gt)?);
            let base = match image {
                Some(i) => read_image(i)?,
                None => g.to_image(),
            };
            let dims = (p.width(), p.height());
            if dims != (g.width(), g.height()) || dims != (base.width(), base.height()) {
                return Err(usage("overlay inputs differ in size"));
            }
            let prob: Vec<f64> = p.luma().iter().map(|v| v / 255.0).collect();
            let img = overlay(&base, &binarize(&prob, *threshold)?, &g.binarize())?;
            ensure_parent(out)?;
            img.write_png(out)?;
        }
    }
    Ok(())
}
