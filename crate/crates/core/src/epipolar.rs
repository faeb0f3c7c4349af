//! Calibrated two-view geometry: bearings, the five-point essential-matrix
//! solver and RANSAC outlier rejection over tentative matches.

use crate::error::{param_err, Error, Result};
use crate::matcher::MatchSet;
use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};

/// Projection model used to lift pixels to rays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CameraModel {
    Pinhole {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
    },
    /// Longitude/latitude panorama centered on the principal direction.
    Equirectangular {
        width: f64,
        height: f64,
        span_h: f64,
        span_v: f64,
    },
}

impl CameraModel {
    /// Full-turn panorama whose vertical span keeps square pixels.
    pub fn equirectangular(width: usize, height: usize) -> Self {
        CameraModel::Equirectangular {
            width: width as f64,
            height: height as f64,
            span_h: TAU,
            span_v: TAU * height as f64 / width as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CameraModel::Pinhole { fx, fy, cx, cy } => {
                if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
                    return Err(param_err!("pinhole focal lengths must be positive"));
                }
            }
            CameraModel::Equirectangular {
                width,
                height,
                span_h,
                span_v,
            } => {
                let ok_span = |s: f64| s > 0.0 && s <= TAU;
                if !(width > 0.0 && height > 0.0 && ok_span(span_h) && ok_span(span_v)) {
                    return Err(param_err!("equirectangular spans must lie in (0, 2pi]"));
                }
            }
        }
        Ok(())
    }
}

/// A unit-length viewing ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bearing(Vector3<f64>);

impl Bearing {
    /// Normalizes `v`; returns `None` for a zero or non-finite vector.
    pub fn new(v: Vector3<f64>) -> Option<Self> {
        let n = v.norm();
        (n > 0.0 && n.is_finite()).then(|| Bearing(v / n))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Lifts pixel `(x, y)` to a unit ray under `cam`.
pub fn pixel_to_bearing(p: [f64; 2], cam: &CameraModel) -> Bearing {
    let v = match *cam {
        CameraModel::Pinhole { fx, fy, cx, cy } => Vector3::new((p[0] - cx) / fx, (p[1] - cy) / fy, 1.0),
        CameraModel::Equirectangular {
            width,
            height,
            span_h,
            span_v,
        } => {
            let lon = (p[0] / width - 0.5) * span_h;
            let lat = (0.5 - p[1] / height) * span_v;
            Vector3::new(lat.cos() * lon.sin(), -lat.sin(), lat.cos() * lon.cos())
        }
    };
    Bearing(v.normalize())
}

/// Essential matrix scaled to unit Frobenius norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    /// Scales `m` to unit Frobenius norm without checking the invariants.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let n = m.norm();
        (n > 0.0 && n.is_finite()).then(|| EssentialMatrix(m / n))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Largest entry of `2 E E^T E - tr(E E^T) E`.
    pub fn trace_constraint_residual(&self) -> f64 {
        let e = &self.0;
        let eet = e * e.transpose();
        (2.0 * eet * e - eet.trace() * e).abs().max()
    }

    /// Checks both defining invariants at the given tolerances.
    pub fn satisfies_invariants(&self, det_tol: f64, trace_tol: f64) -> bool {
        self.determinant().abs() <= det_tol && self.trace_constraint_residual() <= trace_tol
    }

    /// Frobenius distance to `other` up to sign.
    pub fn distance_up_to_scale(&self, other: &EssentialMatrix) -> f64 {
        (self.0 - other.0).norm().min((self.0 + other.0).norm())
    }
}

/// Angular distance of the pair from its epipolar planes, taking the worse of
/// the forward and backward directions. Degenerate planes score `pi / 2`.
pub fn epipolar_residual(e: &EssentialMatrix, p: &Bearing, q: &Bearing) -> f64 {
    let m = &e.0;
    let ep = m * p.0;
    let etq = m.transpose() * q.0;
    let one_side = |plane: &Vector3<f64>, ray: &Vector3<f64>| {
        let n = plane.norm() * ray.norm();
        if n <= f64::MIN_POSITIVE || !n.is_finite() {
            FRAC_PI_2
        } else {
            (plane.dot(ray).abs() / n).min(1.0).asin()
        }
    };
    one_side(&ep, &q.0).max(one_side(&etq, &p.0))
}

// Monomials in (x, y, z) up to degree 3. The first ten (cubics) are eliminated
// by Gauss-Jordan; the last ten form the quotient-ring basis.
const MONOMIALS: [[u8; 3]; 20] = [
    [3, 0, 0],
    [2, 1, 0],
    [2, 0, 1],
    [1, 2, 0],
    [1, 1, 1],
    [1, 0, 2],
    [0, 3, 0],
    [0, 2, 1],
    [0, 1, 2],
    [0, 0, 3],
    [2, 0, 0],
    [1, 1, 0],
    [1, 0, 1],
    [0, 2, 0],
    [0, 1, 1],
    [0, 0, 2],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [0, 0, 0],
];

fn monomial_index(e: [u8; 3]) -> usize {
    MONOMIALS
        .iter()
        .position(|&m| m == e)
        .expect("monomial degree at most 3")
}

#[derive(Clone, Copy)]
struct Poly([f64; 20]);

impl Poly {
    fn linear(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut c = [0.0; 20];
        c[monomial_index([1, 0, 0])] = x;
        c[monomial_index([0, 1, 0])] = y;
        c[monomial_index([0, 0, 1])] = z;
        c[monomial_index([0, 0, 0])] = w;
        Poly(c)
    }

    fn mul(&self, o: &Poly) -> Poly {
        let mut c = [0.0; 20];
        for (i, &a) in self.0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in o.0.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let (mi, mj) = (MONOMIALS[i], MONOMIALS[j]);
                let e = [mi[0] + mj[0], mi[1] + mj[1], mi[2] + mj[2]];
                c[monomial_index(e)] += a * b;
            }
        }
        Poly(c)
    }

    fn add(&self, o: &Poly) -> Poly {
        let mut c = self.0;
        c.iter_mut().zip(o.0).for_each(|(a, b)| *a += b);
        Poly(c)
    }

    fn scale(&self, k: f64) -> Poly {
        Poly(self.0.map(|a| a * k))
    }

    fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        MONOMIALS
            .iter()
            .zip(self.0)
            .map(|(m, c)| c * x.powi(m[0] as i32) * y.powi(m[1] as i32) * z.powi(m[2] as i32))
            .sum()
    }
}

const ZERO: Poly = Poly([0.0; 20]);

type PolyMat = [[Poly; 3]; 3];

fn polymat_mul(a: &PolyMat, b: &PolyMat) -> PolyMat {
    let mut out = [[ZERO; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for k in 0..3 {
                *cell = cell.add(&a[i][k].mul(&b[k][j]));
            }
        }
    }
    out
}

/// The ten cubic constraints `det E = 0` and `2 E E^T E - tr(E E^T) E = 0`
/// on `E = x X + y Y + z Z + W`.
fn essential_constraints(basis: &[Matrix3<f64>; 4]) -> [Poly; 10] {
    let [x, y, z, w] = basis;
    let mut e = [[ZERO; 3]; 3];
    for (i, row) in e.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = Poly::linear(x[(i, j)], y[(i, j)], z[(i, j)], w[(i, j)]);
        }
    }
    let mut et = [[ZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            et[i][j] = e[j][i];
        }
    }
    let det = e[0][0]
        .mul(&e[1][1].mul(&e[2][2]).add(&e[1][2].mul(&e[2][1]).scale(-1.0)))
        .add(&e[0][1].mul(&e[1][2].mul(&e[2][0]).add(&e[1][0].mul(&e[2][2]).scale(-1.0))))
        .add(&e[0][2].mul(&e[1][0].mul(&e[2][1]).add(&e[1][1].mul(&e[2][0]).scale(-1.0))));
    let eet = polymat_mul(&e, &et);
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    let eete = polymat_mul(&eet, &e);
    let mut out = [ZERO; 10];
    out[0] = det;
    for i in 0..3 {
        for j in 0..3 {
            out[1 + 3 * i + j] = eete[i][j].scale(2.0).add(&trace.mul(&e[i][j]).scale(-1.0));
        }
    }
    out
}

/// Relative singular-value floor below which the constraint matrix is
/// considered rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Five-point minimal solver. Returns every real essential matrix `E` with
/// `q_i^T E p_i = 0` for the five correspondences (up to ten).
///
/// The epipolar constraints leave a four-dimensional space of candidate
/// matrices `x X + y Y + z Z + W`. The ten cubic essential-matrix constraints
/// are reduced by Gauss-Jordan elimination, which yields the 10x10 action
/// matrix of multiplication by `x` on the quotient ring; its characteristic
/// polynomial is the degree-10 univariate polynomial of the problem and each
/// real eigenvalue gives one candidate.
pub fn five_point_essential(p: &[Bearing; 5], q: &[Bearing; 5]) -> Result<Vec<EssentialMatrix>> {
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..5 {
        let (pi, qi) = (p[i].0, q[i].0);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = qi[r] * pi[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateSample("constraint SVD failed".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = &svd.singular_values;
    if !(s[order[0]] > 0.0) || s[order[4]] < RANK_TOL * s[order[0]] {
        return Err(Error::DegenerateSample(format!(
            "constraint matrix rank below 5 (sigma5/sigma1 = {:e})",
            s[order[4]] / s[order[0]].max(f64::MIN_POSITIVE)
        )));
    }
    let null: Vec<Matrix3<f64>> = order[5..]
        .iter()
        .map(|&k| Matrix3::from_fn(|r, c| v_t[(k, 3 * r + c)]))
        .collect();
    let basis = [null[0], null[1], null[2], null[3]];

    let eqs = essential_constraints(&basis);
    let mut cubic = SMatrix::<f64, 10, 10>::zeros();
    let mut rest = SMatrix::<f64, 10, 10>::zeros();
    for (r, eq) in eqs.iter().enumerate() {
        for c in 0..10 {
            cubic[(r, c)] = eq.0[c];
            rest[(r, c)] = eq.0[10 + c];
        }
    }
    let lu = cubic.lu();
    let reduced = lu
        .solve(&rest)
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::DegenerateSample("cubic block is singular".into()))?;

    // Row j of the action matrix expresses x * basis[j] in the basis.
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for j in 0..10 {
        let m = MONOMIALS[10 + j];
        let shifted = monomial_index([m[0] + 1, m[1], m[2]]);
        if shifted < 10 {
            for c in 0..10 {
                action[(j, c)] = -reduced[(shifted, c)];
            }
        } else {
            action[(j, shifted - 10)] = 1.0;
        }
    }

    let eigenvalues = action.complex_eigenvalues();
    let scale = action.abs().max().max(1.0);
    let mut roots: Vec<f64> = eigenvalues
        .iter()
        .filter(|l| l.im.abs() <= 1e-8 * scale.max(l.re.abs()))
        .map(|l| l.re)
        .collect();
    roots.sort_by(f64::total_cmp);

    let ix = monomial_index([1, 0, 0]) - 10;
    let iy = monomial_index([0, 1, 0]) - 10;
    let iz = monomial_index([0, 0, 1]) - 10;
    let i1 = monomial_index([0, 0, 0]) - 10;
    let mut out = Vec::with_capacity(roots.len());
    for root in roots {
        let shifted = action - SMatrix::<f64, 10, 10>::identity() * root;
        let svd = shifted.svd(false, true);
        let Some(vt) = svd.v_t else { continue };
        let k = (0..10)
            .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
            .expect("ten singular values");
        let v = vt.row(k);
        if v[i1].abs() < 1e-12 {
            continue;
        }
        let (mut x, mut y, mut z) = (v[ix] / v[i1], v[iy] / v[i1], v[iz] / v[i1]);
        polish(&eqs, &mut x, &mut y, &mut z);
        let e = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        if let Some(e) = EssentialMatrix::from_matrix(e) {
            out.push(e);
        }
    }
    Ok(out)
}

/// Two Gauss-Newton steps on the ten constraints; kept only if they reduce
/// the residual.
fn polish(eqs: &[Poly; 10], x: &mut f64, y: &mut f64, z: &mut f64) {
    let residual = |x: f64, y: f64, z: f64| -> f64 { eqs.iter().map(|e| e.eval(x, y, z).powi(2)).sum() };
    for _ in 0..2 {
        let mut jac = SMatrix::<f64, 10, 3>::zeros();
        let mut f = SMatrix::<f64, 10, 1>::zeros();
        for (r, e) in eqs.iter().enumerate() {
            f[r] = e.eval(*x, *y, *z);
            for (c, var) in [[1u8, 0, 0], [0, 1, 0], [0, 0, 1]].iter().enumerate() {
                let mut d = 0.0;
                for (m, coef) in MONOMIALS.iter().zip(e.0) {
                    let k = var.iter().position(|&v| v == 1).expect("unit");
                    if m[k] == 0 || coef == 0.0 {
                        continue;
                    }
                    let mut exps = [m[0] as i32, m[1] as i32, m[2] as i32];
                    let factor = exps[k] as f64;
                    exps[k] -= 1;
                    d += coef * factor * x.powi(exps[0]) * y.powi(exps[1]) * z.powi(exps[2]);
                }
                jac[(r, c)] = d;
            }
        }
        let jtj = jac.transpose() * jac;
        let jtf = jac.transpose() * f;
        let Some(step) = jtj.lu().solve(&jtf) else { return };
        let (nx, ny, nz) = (*x - step[0], *y - step[1], *z - step[2]);
        if residual(nx, ny, nz) < residual(*x, *y, *z) {
            (*x, *y, *z) = (nx, ny, nz);
        } else {
            return;
        }
    }
}

/// Parameters of [`ransac_essential`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub seed: u64,
    pub max_iters: usize,
    /// Inlier threshold on [`epipolar_residual`], radians.
    pub threshold_rad: f64,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 2000,
            threshold_rad: 0.005,
            confidence: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub model: EssentialMatrix,
    pub inlier_flags: Vec<bool>,
    pub iterations_run: usize,
    pub best_inlier_count: usize,
}

impl RansacResult {
    /// Copies `matches` with the inlier flags of this result.
    pub fn annotate(&self, matches: &MatchSet) -> MatchSet {
        let mut out = matches.clone();
        for (m, &f) in out.matches.iter_mut().zip(&self.inlier_flags) {
            m.inlier = f;
        }
        out
    }
}

/// Iterations needed to draw one all-inlier five-sample with probability
/// `confidence` when a fraction `inlier_ratio` of the data are inliers.
pub fn adaptive_iteration_bound(confidence: f64, inlier_ratio: f64) -> f64 {
    let w5 = inlier_ratio.clamp(0.0, 1.0).powi(5);
    if w5 >= 1.0 {
        return 0.0;
    }
    if w5 <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - w5).ln()).ceil()
}

#[derive(Clone, Copy)]
struct Hypothesis {
    model: EssentialMatrix,
    inliers: usize,
    residual_sum: f64,
}

impl Hypothesis {
    fn beats(&self, other: &Hypothesis) -> bool {
        self.inliers > other.inliers || (self.inliers == other.inliers && self.residual_sum < other.residual_sum)
    }
}

/// Iterations evaluated concurrently before the in-order merge.
const CHUNK: usize = 32;

/// RANSAC over five-point hypotheses with an angular epipolar residual.
///
/// Iteration `i` draws its sample from a ChaCha stream keyed by
/// `(cfg.seed, i)` and results are merged in iteration order, so the outcome
/// does not depend on how iterations are scheduled.
pub fn ransac_essential(matches: &MatchSet, cam: &CameraModel, cfg: &RansacConfig) -> Result<RansacResult> {
    let n = matches.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "RANSAC needs at least 5 matches, got {}",
            n
        )));
    }
    cam.validate()?;
    if !(cfg.threshold_rad > 0.0) || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(param_err!("threshold must be positive and confidence in (0, 1)"));
    }
    let ps: Vec<Bearing> = matches.matches.iter().map(|m| pixel_to_bearing(m.p, cam)).collect();
    let qs: Vec<Bearing> = matches.matches.iter().map(|m| pixel_to_bearing(m.q, cam)).collect();

    let score = |e: &EssentialMatrix| -> Hypothesis {
        let mut inliers = 0;
        let mut residual_sum = 0.0;
        for (p, q) in ps.iter().zip(&qs) {
            let r = epipolar_residual(e, p, q);
            if r < cfg.threshold_rad {
                inliers += 1;
                residual_sum += r;
            }
        }
        Hypothesis {
            model: *e,
            inliers,
            residual_sum,
        }
    };

    let run_iteration = |i: usize| -> Option<Hypothesis> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let idx = rand::seq::index::sample(&mut rng, n, 5);
        let sp: [Bearing; 5] = std::array::from_fn(|k| ps[idx.index(k)]);
        let sq: [Bearing; 5] = std::array::from_fn(|k| qs[idx.index(k)]);
        let candidates = five_point_essential(&sp, &sq).ok()?;
        let mut best: Option<Hypothesis> = None;
        for e in &candidates {
            let h = score(e);
            if best.as_ref().is_none_or(|b| h.beats(b)) {
                best = Some(h);
            }
        }
        best
    };

    let mut best: Option<Hypothesis> = None;
    let mut iterations_run = 0;
    'outer: while iterations_run < cfg.max_iters {
        let end = (iterations_run + CHUNK).min(cfg.max_iters);
        let chunk: Vec<Option<Hypothesis>> = (iterations_run..end).into_par_iter().map(run_iteration).collect();
        for h in chunk {
            iterations_run += 1;
            if let Some(h) = h {
                if best.as_ref().is_none_or(|b| h.beats(b)) {
                    best = Some(h);
                }
            }
            if let Some(b) = &best {
                let bound = adaptive_iteration_bound(cfg.confidence, b.inliers as f64 / n as f64);
                if bound <= iterations_run as f64 {
                    break 'outer;
                }
            }
        }
    }

    let best = best.ok_or_else(|| Error::NoModel(format!("all {} RANSAC samples were degenerate", iterations_run)))?;
    let inlier_flags: Vec<bool> = ps
        .iter()
        .zip(&qs)
        .map(|(p, q)| epipolar_residual(&best.model, p, q) < cfg.threshold_rad)
        .collect();
    let best_inlier_count = inlier_flags.iter().filter(|&&f| f).count();
    Ok(RansacResult {
        model: best.model,
        inlier_flags,
        iterations_run,
        best_inlier_count,
    })
}
