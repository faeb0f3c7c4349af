//! Dense flow from inlier matches: coarse-to-fine minimization of a
//! Charbonnier data term, a Charbonnier smoothness term and a quadratic
//! match-fidelity term.

use crate::error::{param_err, shape_err, Result};
use crate::matcher::{build_pyramid, MatchSet};
use crate::tensor::{FlowField, Image};
use serde::{Deserialize, Serialize};

/// The two images of a scene at `t0` and `t1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub first: Image,
    pub second: Image,
}

impl ImagePair {
    pub fn new(first: Image, second: Image) -> Result<Self> {
        if first.width() != second.width() || first.height() != second.height() {
            return Err(shape_err!(
                "pair images {}x{} and {}x{}",
                first.width(),
                first.height(),
                second.width(),
                second.height()
            ));
        }
        Ok(Self { first, second })
    }

    pub fn width(&self) -> usize {
        self.first.width()
    }

    pub fn height(&self) -> usize {
        self.first.height()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub pyramid_levels: usize,
    /// Smoothness weight.
    pub alpha: f64,
    /// Match-fidelity weight.
    pub beta: f64,
    pub iters_per_level: usize,
    /// Charbonnier constant.
    pub epsilon: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            alpha: 8.0,
            beta: 50.0,
            iters_per_level: 200,
            epsilon: 1e-3,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.iters_per_level == 0 {
            return Err(param_err!("pyramid_levels and iters_per_level must be positive"));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.epsilon > 0.0) {
            return Err(param_err!("alpha, beta and epsilon must be positive"));
        }
        Ok(())
    }
}

/// Warps per level; the relaxation sweeps are split evenly between them.
const WARPS: usize = 5;
/// Over-relaxation factor of the point updates.
const OMEGA: f64 = 1.6;

/// The three energy terms, already weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerms {
    pub data: f64,
    pub smoothness: f64,
    pub matching: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.data + self.smoothness + self.matching
    }
}

#[inline]
fn charbonnier(s2: f64, eps: f64) -> f64 {
    (s2 + eps * eps).sqrt()
}

/// One pyramid level of the problem. Intensities are luma scaled to [0, 1].
struct Level {
    w: usize,
    h: usize,
    i0: Vec<f64>,
    i1: Vec<f64>,
    gx1: Vec<f64>,
    gy1: Vec<f64>,
    /// Sum of match weights per pixel.
    mw: Vec<f64>,
    /// Weighted sum of match displacements per pixel.
    mu: Vec<f64>,
    mv: Vec<f64>,
}

fn bilinear(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let a = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let b = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    a * (1.0 - fy) + b * fy
}

fn central_gradients(img: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let i = y * w + x;
            if xr > xl {
                gx[i] = (img[y * w + xr] - img[y * w + xl]) / (xr - xl) as f64;
            }
            if yd > yu {
                gy[i] = (img[yd * w + x] - img[yu * w + x]) / (yd - yu) as f64;
            }
        }
    }
    (gx, gy)
}

impl Level {
    fn new(i0: Vec<f64>, i1: Vec<f64>, w: usize, h: usize, matches: &MatchSet, scale: f64, beta: f64) -> Self {
        let (gx1, gy1) = central_gradients(&i1, w, h);
        let mut mw = vec![0.0; w * h];
        let mut mu = vec![0.0; w * h];
        let mut mv = vec![0.0; w * h];
        for m in &matches.matches {
            // Box-filter pyramids put fine pixel x at coarse (x + 0.5) / s - 0.5.
            let px = ((m.p[0] + 0.5) / scale - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            let py = ((m.p[1] + 0.5) / scale - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
            let d = m.displacement();
            let i = py * w + px;
            mw[i] += beta;
            mu[i] += beta * d[0] / scale;
            mv[i] += beta * d[1] / scale;
        }
        Self {
            w,
            h,
            i0,
            i1,
            gx1,
            gy1,
            mw,
            mu,
            mv,
        }
    }

    fn smooth_arg(&self, u: &[f64], v: &[f64], x: usize, y: usize) -> f64 {
        let i = y * self.w + x;
        let (mut s, w) = (0.0, self.w);
        if x + 1 < self.w {
            s += (u[i + 1] - u[i]).powi(2) + (v[i + 1] - v[i]).powi(2);
        }
        if y + 1 < self.h {
            s += (u[i + w] - u[i]).powi(2) + (v[i + w] - v[i]).powi(2);
        }
        s
    }

    fn energy(&self, u: &[f64], v: &[f64], cfg: &DensifyConfig) -> f64 {
        let eps = cfg.epsilon;
        let mut data = 0.0;
        let mut smooth = 0.0;
        let mut matching = 0.0;
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                let warped = bilinear(&self.i1, self.w, self.h, x as f64 + u[i], y as f64 + v[i]);
                data += charbonnier((warped - self.i0[i]).powi(2), eps);
                smooth += charbonnier(self.smooth_arg(u, v, x, y), eps);
                if self.mw[i] > 0.0 {
                    // sum_k b (w - d_k)^2 = W w^2 - 2 w sum(b d_k) + const; the
                    // constant does not affect comparisons at a fixed level.
                    matching +=
                        self.mw[i] * (u[i] * u[i] + v[i] * v[i]) - 2.0 * (u[i] * self.mu[i] + v[i] * self.mv[i]);
                }
            }
        }
        data + cfg.alpha * smooth + matching
    }

    /// Runs the warps of one level, accepting only energy-decreasing updates.
    fn solve(&self, u: &mut [f64], v: &mut [f64], cfg: &DensifyConfig) {
        let n = self.w * self.h;
        let sweeps = cfg.iters_per_level.div_ceil(WARPS).max(1);
        let warps = cfg.iters_per_level.div_ceil(sweeps);
        let eps = cfg.epsilon;
        let mut energy = self.energy(u, v, cfg);
        let mut it = vec![0.0; n];
        let mut ix = vec![0.0; n];
        let mut iy = vec![0.0; n];
        let mut psi_d = vec![0.0; n];
        let mut phi = vec![0.0; n];
        for _ in 0..warps {
            for y in 0..self.h {
                for x in 0..self.w {
                    let i = y * self.w + x;
                    let (wx, wy) = (x as f64 + u[i], y as f64 + v[i]);
                    it[i] = bilinear(&self.i1, self.w, self.h, wx, wy) - self.i0[i];
                    ix[i] = bilinear(&self.gx1, self.w, self.h, wx, wy);
                    iy[i] = bilinear(&self.gy1, self.w, self.h, wx, wy);
                }
            }
            let mut du = vec![0.0; n];
            let mut dv = vec![0.0; n];
            let mut nu = u.to_vec();
            let mut nv = v.to_vec();
            for _ in 0..sweeps {
                // Lagged nonlinearity: freeze the robust weights for this sweep.
                for y in 0..self.h {
                    for x in 0..self.w {
                        let i = y * self.w + x;
                        let r = it[i] + ix[i] * du[i] + iy[i] * dv[i];
                        psi_d[i] = 0.5 / charbonnier(r * r, eps);
                        phi[i] = 0.5 / charbonnier(self.smooth_arg(&nu, &nv, x, y), eps);
                    }
                }
                for color in 0..2 {
                    for y in 0..self.h {
                        let start = (y + color) % 2;
                        for x in (start..self.w).step_by(2) {
                            self.relax(
                                x, y, u, v, &mut du, &mut dv, &mut nu, &mut nv, &it, &ix, &iy, &psi_d, &phi, cfg,
                            );
                        }
                    }
                }
            }
            let candidate = self.energy(&nu, &nv, cfg);
            if candidate.is_finite() && candidate <= energy {
                energy = candidate;
                u.copy_from_slice(&nu);
                v.copy_from_slice(&nv);
            } else {
                break;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn relax(
        &self,
        x: usize,
        y: usize,
        u: &[f64],
        v: &[f64],
        du: &mut [f64],
        dv: &mut [f64],
        nu: &mut [f64],
        nv: &mut [f64],
        it: &[f64],
        ix: &[f64],
        iy: &[f64],
        psi_d: &[f64],
        phi: &[f64],
        cfg: &DensifyConfig,
    ) {
        let w = self.w;
        let i = y * w + x;
        let mut wsum = 0.0;
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut edge = |j: usize, weight: f64| {
            wsum += weight;
            su += weight * nu[j];
            sv += weight * nv[j];
        };
        if x + 1 < w {
            edge(i + 1, phi[i]);
        }
        if x > 0 {
            edge(i - 1, phi[i - 1]);
        }
        if y + 1 < self.h {
            edge(i + w, phi[i]);
        }
        if y > 0 {
            edge(i - w, phi[i - w]);
        }
        let a = cfg.alpha;
        let pd = psi_d[i];
        let mw = self.mw[i];
        // Both components see the same smoothness and match weights; the data
        // term couples them through the linearized residual.
        let den_u = pd * ix[i] * ix[i] + a * wsum + mw;
        let num_u = -pd * ix[i] * (it[i] + iy[i] * dv[i]) + a * (su - wsum * u[i]) + self.mu[i] - mw * u[i];
        if den_u > 0.0 {
            du[i] = (1.0 - OMEGA) * du[i] + OMEGA * num_u / den_u;
        }
        let den_v = pd * iy[i] * iy[i] + a * wsum + mw;
        let num_v = -pd * iy[i] * (it[i] + ix[i] * du[i]) + a * (sv - wsum * v[i]) + self.mv[i] - mw * v[i];
        if den_v > 0.0 {
            dv[i] = (1.0 - OMEGA) * dv[i] + OMEGA * num_v / den_v;
        }
        nu[i] = u[i] + du[i];
        nv[i] = v[i] + dv[i];
    }
}

fn gray01(img: &Image) -> Vec<f64> {
    img.luma().into_iter().map(|v| v / 255.0).collect()
}

/// Weighted energy terms of `flow` for the pair and inlier matches, with
/// Charbonnier penalty `sqrt(s^2 + eps^2)` on the data and smoothness terms.
pub fn flow_energy_terms(
    flow: &FlowField,
    pair: &ImagePair,
    inliers: &MatchSet,
    cfg: &DensifyConfig,
) -> Result<EnergyTerms> {
    let (w, h) = (pair.width(), pair.height());
    if flow.width() != w || flow.height() != h {
        return Err(shape_err!(
            "flow {}x{} for a {}x{} pair",
            flow.width(),
            flow.height(),
            w,
            h
        ));
    }
    let i0 = gray01(&pair.first);
    let i1 = gray01(&pair.second);
    let eps = cfg.epsilon;
    let u = flow.u();
    let v = flow.v();
    let mut data = 0.0;
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fu, fv) = (u[i] as f64, v[i] as f64);
            let warped = bilinear(&i1, w, h, x as f64 + fu, y as f64 + fv);
            data += charbonnier((warped - i0[i]).powi(2), eps);
            let mut s = 0.0;
            if x + 1 < w {
                s += (u[i + 1] as f64 - fu).powi(2) + (v[i + 1] as f64 - fv).powi(2);
            }
            if y + 1 < h {
                s += (u[i + w] as f64 - fu).powi(2) + (v[i + w] as f64 - fv).powi(2);
            }
            smooth += charbonnier(s, eps);
        }
    }
    let mut matching = 0.0;
    for m in &inliers.matches {
        let (fu, fv) = flow.sample(m.p[0], m.p[1]);
        let d = m.displacement();
        matching += (fu - d[0]).powi(2) + (fv - d[1]).powi(2);
    }
    Ok(EnergyTerms {
        data,
        smoothness: cfg.alpha * smooth,
        matching: cfg.beta * matching,
    })
}

/// Total energy, see [`flow_energy_terms`].
pub fn flow_energy(flow: &FlowField, pair: &ImagePair, inliers: &MatchSet, cfg: &DensifyConfig) -> Result<f64> {
    Ok(flow_energy_terms(flow, pair, inliers, cfg)?.total())
}

/// Inverse-distance-weighted (power 2) interpolation of all match
/// displacements; zero when there are no matches.
fn idw(w: usize, h: usize, matches: &MatchSet, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    if matches.is_empty() {
        return (u, v);
    }
    let pts: Vec<(f64, f64, f64, f64)> = matches
        .matches
        .iter()
        .map(|m| {
            let d = m.displacement();
            (
                (m.p[0] + 0.5) / scale - 0.5,
                (m.p[1] + 0.5) / scale - 0.5,
                d[0] / scale,
                d[1] / scale,
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
            let (mut exact_n, mut eu, mut ev) = (0usize, 0.0, 0.0);
            for &(px, py, du, dv) in &pts {
                let r2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                if r2 < 1e-12 {
                    exact_n += 1;
                    eu += du;
                    ev += dv;
                } else {
                    let k = 1.0 / r2;
                    sw += k;
                    su += k * du;
                    sv += k * dv;
                }
            }
            let i = y * w + x;
            if exact_n > 0 {
                u[i] = eu / exact_n as f64;
                v[i] = ev / exact_n as f64;
            } else {
                u[i] = su / sw;
                v[i] = sv / sw;
            }
        }
    }
    (u, v)
}

/// Full-resolution inverse-distance-weighted initialization.
pub fn initial_flow(width: usize, height: usize, inliers: &MatchSet) -> FlowField {
    let (u, v) = idw(width, height, inliers, 1.0);
    let to32 = |s: Vec<f64>| s.into_iter().map(|x| x as f32).collect();
    FlowField::new(width, height, to32(u), to32(v)).expect("finite interpolation")
}

/// Doubles the resolution of a flow level, scaling displacements by 2.
fn upsample(u: &[f64], v: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ou = vec![0.0; nw * nh];
    let mut ov = vec![0.0; nw * nh];
    for y in 0..nh {
        let sy = (y as f64 - 0.5) / 2.0;
        for x in 0..nw {
            let sx = (x as f64 - 0.5) / 2.0;
            ou[y * nw + x] = 2.0 * bilinear(u, w, h, sx, sy);
            ov[y * nw + x] = 2.0 * bilinear(v, w, h, sx, sy);
        }
    }
    (ou, ov)
}

/// Densifies inlier matches into a flow field over the pair.
///
/// The coarsest level starts from inverse-distance-weighted interpolation of
/// the inliers; each level runs `iters_per_level` red-black relaxation sweeps
/// split across re-linearizations (warps) of the data term. The result never
/// has higher energy than the full-resolution interpolation it started from.
pub fn densify(pair: &ImagePair, inliers: &MatchSet, cfg: &DensifyConfig) -> Result<FlowField> {
    cfg.validate()?;
    let (w, h) = (pair.width(), pair.height());
    if inliers.width != w || inliers.height != h {
        return Err(shape_err!(
            "matches for {}x{} used with a {}x{} pair",
            inliers.width,
            inliers.height,
            w,
            h
        ));
    }
    let max_levels = (usize::BITS - w.min(h).leading_zeros()) as usize;
    let levels = cfg.pyramid_levels.min(max_levels.max(1));
    let p0 = build_pyramid(&pair.first, levels)?;
    let p1 = build_pyramid(&pair.second, levels)?;

    let mut flow: Option<(Vec<f64>, Vec<f64>, usize, usize)> = None;
    for l in (0..levels).rev() {
        let (lw, lh) = (p0[l].width(), p0[l].height());
        let scale = (1usize << l) as f64;
        let to01 = |t: &crate::tensor::Tensor4<f64>| t.data().iter().map(|v| v / 255.0).collect();
        let level = Level::new(to01(&p0[l]), to01(&p1[l]), lw, lh, inliers, scale, cfg.beta);
        let (mut u, mut v) = match flow.take() {
            None => idw(lw, lh, inliers, scale),
            Some((pu, pv, pw, ph)) => upsample(&pu, &pv, pw, ph, lw, lh),
        };
        level.solve(&mut u, &mut v, cfg);
        flow = Some((u, v, lw, lh));
    }
    let (u, v, _, _) = flow.expect("at least one level");
    let to32 = |s: Vec<f64>| s.into_iter().map(|x| x as f32).collect();
    let out = FlowField::new(w, h, to32(u), to32(v))?;

    let init = initial_flow(w, h, inliers);
    if flow_energy(&out, pair, inliers, cfg)? <= flow_energy(&init, pair, inliers, cfg)? {
        Ok(out)
    } else {
        Ok(init)
    }
}
