//! Tentative quasi-dense correspondences by grid-anchored, coarse-to-fine
//! normalized cross-correlation.

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Image, Tensor4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// One tentative correspondence `p` in `I` to `q` in `I'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub p: [f64; 2],
    pub q: [f64; 2],
    pub score: f64,
    pub inlier: bool,
}

impl Match {
    pub fn displacement(&self) -> [f64; 2] {
        [self.q[0] - self.p[0], self.q[1] - self.p[1]]
    }
}

/// Matches between two images of identical size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub width: usize,
    pub height: usize,
    pub matches: Vec<Match>,
}

const MATCHES_HEADER: &str = "# viewchange-matches v1";

impl MatchSet {
    pub fn new(width: usize, height: usize, matches: Vec<Match>) -> Self {
        Self { width, height, matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Copy holding only the matches flagged as inliers.
    pub fn inliers(&self) -> MatchSet {
        MatchSet {
            width: self.width,
            height: self.height,
            matches: self.matches.iter().copied().filter(|m| m.inlier).collect(),
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.matches.iter().filter(|m| m.inlier).count()
    }

    /// Serializes to the line format `x1 y1 x2 y2 score inlier`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", MATCHES_HEADER, self.width, self.height);
        for m in &self.matches {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                m.p[0],
                m.p[1],
                m.q[0],
                m.q[1],
                m.score,
                u8::from(m.inlier)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty match file".into()))?;
        let rest = header
            .strip_prefix(MATCHES_HEADER)
            .ok_or_else(|| Error::Format(format!("bad match header {:?}", header)))?;
        let dims: Vec<&str> = rest.split_whitespace().collect();
        let [w, h] = dims[..] else {
            return Err(Error::Format(format!("bad match header {:?}", header)));
        };
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dimension {:?}", s)))
        };
        let (width, height) = (parse_dim(w)?, parse_dim(h)?);
        let mut matches = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::Format(format!(
                    "line {}: expected 6 fields, got {}",
                    i + 1,
                    f.len()
                )));
            }
            let mut v = [0.0f64; 5];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = f[k]
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Format(format!("line {}: bad number {:?}", i + 1, f[k])))?;
            }
            let inlier = match f[5] {
                "0" => false,
                "1" => true,
                other => return Err(Error::Format(format!("line {}: bad inlier flag {:?}", i + 1, other))),
            };
            let m = Match {
                p: [v[0], v[1]],
                q: [v[2], v[3]],
                score: v[4],
                inlier,
            };
            let inside = |pt: [f64; 2]| pt[0] >= 0.0 && pt[1] >= 0.0 && pt[0] < width as f64 && pt[1] < height as f64;
            if !inside(m.p) || !inside(m.q) || !(-1.0..=1.0).contains(&m.score) {
                return Err(Error::Format(format!("line {}: match out of range", i + 1)));
            }
            matches.push(m);
        }
        Ok(Self { width, height, matches })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }
}

/// Parameters of [`match_images`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Anchor spacing in pixels.
    pub grid: usize,
    /// Odd NCC window side.
    pub patch: usize,
    pub levels: usize,
    /// Search radius at the coarsest level, in coarse pixels.
    pub radius_coarse: usize,
    /// Refinement radius at each finer level.
    pub refine: usize,
    pub min_score: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            patch: 9,
            levels: 3,
            radius_coarse: 4,
            refine: 2,
            min_score: 0.4,
        }
    }
}

impl MatchConfig {
    fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.levels == 0 {
            return Err(param_err!("grid and levels must be positive"));
        }
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(param_err!("patch must be odd, got {}", self.patch));
        }
        if !(-1.0..=1.0).contains(&self.min_score) {
            return Err(param_err!("min_score {} outside [-1, 1]", self.min_score));
        }
        Ok(())
    }
}

/// Gray pyramid: level 0 is the luma of `img`, each further level is a 2x2
/// box average of the previous one.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<Vec<Tensor4<f64>>> {
    if levels == 0 {
        return Err(param_err!("pyramid needs at least one level"));
    }
    let min_side = 1usize << (levels - 1);
    if img.width() < min_side || img.height() < min_side {
        return Err(param_err!(
            "{}x{} image too small for {} pyramid levels",
            img.width(),
            img.height(),
            levels
        ));
    }
    let base = Tensor4::from_vec([1, 1, img.height(), img.width()], img.luma())?;
    let mut out = vec![base];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let (h, w) = (prev.height() / 2, prev.width() / 2);
        let src = prev.plane(0, 0);
        let pw = prev.width();
        let next = Tensor4::from_fn([1, 1, h, w], |[_, _, y, x]| {
            let (x2, y2) = (2 * x, 2 * y);
            0.25 * (src[y2 * pw + x2] + src[y2 * pw + x2 + 1] + src[(y2 + 1) * pw + x2] + src[(y2 + 1) * pw + x2 + 1])
        });
        out.push(next);
    }
    Ok(out)
}

/// Zero-mean normalized cross-correlation. Returns 0 when either patch has
/// no variance.
pub fn ncc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("ncc patches of {} and {} samples", a.len(), b.len()));
    }
    Ok(ncc_unchecked(a, b))
}

fn ncc_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Variances below this are rounding noise on 8-bit data.
    const FLAT: f64 = 1e-9;
    if saa <= FLAT * n || sbb <= FLAT * n {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

struct Level<'a> {
    data: &'a [f64],
    w: usize,
    h: usize,
}

impl Level<'_> {
    fn patch(&self, cx: isize, cy: isize, half: isize, out: &mut Vec<f64>) {
        out.clear();
        for dy in -half..=half {
            let y = (cy + dy).clamp(0, self.h as isize - 1) as usize;
            for dx in -half..=half {
                let x = (cx + dx).clamp(0, self.w as isize - 1) as usize;
                out.push(self.data[y * self.w + x]);
            }
        }
    }
}

/// Finds, for every grid anchor of `a`, the best NCC correspondence in `b`
/// using a coarse-to-fine search. Anchors whose best score stays below
/// `cfg.min_score` emit nothing.
pub fn match_images(a: &Image, b: &Image, cfg: &MatchConfig) -> Result<MatchSet> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(shape_err!(
            "match inputs {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        ));
    }
    cfg.validate()?;
    let pa = build_pyramid(a, cfg.levels)?;
    let pb = build_pyramid(b, cfg.levels)?;
    let (w, h) = (a.width(), a.height());
    let half = cfg.patch / 2;

    let mut anchors = Vec::new();
    let start = half.min(w.saturating_sub(1));
    let mut y = half.min(h.saturating_sub(1));
    while y + half < h {
        let mut x = start;
        while x + half < w {
            anchors.push((x, y));
            x += cfg.grid;
        }
        y += cfg.grid;
    }

    let levels_a: Vec<Level> = pa
        .iter()
        .map(|t| Level {
            data: t.plane(0, 0),
            w: t.width(),
            h: t.height(),
        })
        .collect();
    let levels_b: Vec<Level> = pb
        .iter()
        .map(|t| Level {
            data: t.plane(0, 0),
            w: t.width(),
            h: t.height(),
        })
        .collect();

    let matches: Vec<Match> = anchors
        .par_iter()
        .filter_map(|&(x, y)| {
            match_anchor(&levels_a, &levels_b, x, y, half as isize, cfg).filter(|m| m.score >= cfg.min_score)
        })
        .collect();
    Ok(MatchSet::new(w, h, matches))
}

fn match_anchor(la: &[Level], lb: &[Level], x: usize, y: usize, half: isize, cfg: &MatchConfig) -> Option<Match> {
    let mut pa = Vec::with_capacity(cfg.patch * cfg.patch);
    let mut pb = Vec::with_capacity(cfg.patch * cfg.patch);
    let mut disp = (0isize, 0isize);
    let mut score = f64::NEG_INFINITY;
    for level in (0..la.len()).rev() {
        let (ax, ay) = ((x >> level) as isize, (y >> level) as isize);
        la[level].patch(ax, ay, half, &mut pa);
        let (center, radius) = if level + 1 == la.len() {
            ((0, 0), cfg.radius_coarse as isize)
        } else {
            ((disp.0 * 2, disp.1 * 2), cfg.refine as isize)
        };
        let bl = &lb[level];
        let mut best: Option<(f64, (isize, isize))> = None;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let d = (center.0 + dx, center.1 + dy);
                let (qx, qy) = (ax + d.0, ay + d.1);
                if level == 0 && (qx < 0 || qy < 0 || qx >= bl.w as isize || qy >= bl.h as isize) {
                    continue;
                }
                bl.patch(qx, qy, half, &mut pb);
                let s = ncc_unchecked(&pa, &pb);
                let better = match best {
                    None => true,
                    Some((bs, bd)) => s > bs || (s == bs && tie_break(d, bd)),
                };
                if better {
                    best = Some((s, d));
                }
            }
        }
        let (s, d) = best?;
        disp = d;
        score = s;
    }
    let q = [(x as isize + disp.0) as f64, (y as isize + disp.1) as f64];
    Some(Match {
        p: [x as f64, y as f64],
        q,
        score,
        inlier: false,
    })
}

/// True when displacement `a` wins a score tie against `b`: smaller
/// magnitude first, then lexicographic `(x, y)`.
fn tie_break(a: (isize, isize), b: (isize, isize)) -> bool {
    let ma = a.0 * a.0 + a.1 * a.1;
    let mb = b.0 * b.0 + b.1 * b.1;
    ma < mb || (ma == mb && a < b)
}
