//! Localization certificates for eigensystems, buffered subsets of a cover,
//! and numerical monitors for the deterministic decay estimates.
//!
//! Exact statements (the outer-bad-region bound) are checked as hard
//! inequalities; asymptotic ones ("for `ℓ` sufficiently large") are
//! reported as ratio measurements with explicit hypothesis gates.

use rayon::prelude::*;
use serde::Serialize;

use crate::disorder::Hamiltonian;
use crate::error::{Error, Result};
use crate::exponents::{floor_pow, ExponentSet};
use crate::lattice::{boundary, cover_disjoint, interior, sup_dist, Cover, Region, Site};
use crate::spectral::{eigenvalues, sigma_in, spectral_dist, spectral_separation, Eigensystem, EIG_TOL};

pub use crate::spectral::EnergyInterval;

/// Tolerance on `‖φ‖ = 1` before a vector is tested for localization.
pub const NORM_TOL: f64 = 1e-8;

/// Relative slack allowed when checking the outer-bad-region bound.
pub const OUTBAD_RTOL: f64 = 1e-8;

/// Resolution of `max_localizing_m`.
pub const M_RESOLUTION: f64 = 1e-4;

pub fn h_eval(i: &EnergyInterval, t: f64) -> f64 {
    i.h(t)
}

/// `(I_L, I^L)`.
pub fn shrink_expand(i: &EnergyInterval, l: f64, kappa: f64) -> Result<(EnergyInterval, EnergyInterval)> {
    if !(l > 1.0) {
        return Err(Error::invalid("L", format!("must exceed 1, got {l}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa", format!("must be positive, got {kappa}")));
    }
    Ok((i.shrink(l, kappa), i.expand(l, kappa)))
}

/// `(L^{-κ'}, ½ log(1 + A/4d))`: the admissible range of rates for a box of
/// side `side` and an interval of radius `radius`.
pub fn rate_bounds(side: f64, radius: f64, dim: usize, kappa_prime: f64) -> (f64, f64) {
    (side.powf(-kappa_prime), 0.5 * (1.0 + radius / (4.0 * dim as f64)).ln())
}

/// Smallest of `-log|φ(y)| - rate·‖y - x‖` over `y` with `‖y - x‖ >= lt`
/// (`+∞` when no such `y` carries mass).
fn margin_at(region: &Region, phi: &[f64], x: &[i64], rate: f64, lt: i64) -> f64 {
    let mut worst = f64::INFINITY;
    for (y, v) in region.iter().zip(phi) {
        let d = sup_dist(y, x);
        if d < lt || *v == 0.0 {
            continue;
        }
        worst = worst.min(-v.abs().ln() - rate * d as f64);
    }
    worst
}

fn check_normalized(phi: &[f64]) -> Result<()> {
    let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::invalid("phi", format!("norm {norm} differs from 1")));
    }
    Ok(())
}

/// Whether `phi` (indexed like `region`) is `(x, m)`-localized in a box of
/// side `l`, and the worst margin over the tested sites.
pub fn is_localized(region: &Region, phi: &[f64], x: &[i64], m: f64, l: f64, tau: f64) -> Result<(bool, f64)> {
    if phi.len() != region.len() {
        return Err(Error::invalid("phi", "length differs from the region size"));
    }
    if !region.contains(x) {
        return Err(Error::invalid("x", format!("center {x:?} is outside the box")));
    }
    check_normalized(phi)?;
    let lt = floor_pow(l, tau) as i64;
    let margin = margin_at(region, phi, x, m, lt);
    Ok((margin >= 0.0, margin))
}

/// Outcome for one eigenpair of a certified box.
#[derive(Clone, Debug, Serialize)]
pub struct PairCertificate {
    pub index: usize,
    pub value: f64,
    pub h: f64,
    /// Demanded rate `m χ_J(ν) h_I(ν)`.
    pub rate: f64,
    pub center: Site,
    pub margin: f64,
    pub pass: bool,
}

/// Result of testing a box for `(m, J, I)`-localization.
#[derive(Clone, Debug, Serialize)]
pub struct LocalizationCertificate {
    pub side: f64,
    pub m: f64,
    pub interval: EnergyInterval,
    pub inner: Option<EnergyInterval>,
    pub rate_bounds: (f64, f64),
    pub rate_ok: bool,
    /// Every eigenpair admits a center; `None` when the rate bounds already
    /// failed and the eigensystem was not examined.
    pub localized: Option<bool>,
    pub certified: bool,
    pub reason: Option<String>,
    pub pairs: Vec<PairCertificate>,
}

impl LocalizationCertificate {
    /// One row per eigenpair: `index,value,h,rate,center,margin,pass`, with
    /// center coordinates separated by spaces.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,value,h,rate,center,margin,pass\n");
        for p in &self.pairs {
            let center: Vec<String> = p.center.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.index,
                crate::fmt_f64(p.value),
                crate::fmt_f64(p.h),
                crate::fmt_f64(p.rate),
                center.join(" "),
                crate::fmt_f64(p.margin),
                p.pass
            ));
        }
        out
    }

    pub fn worst_margin(&self) -> f64 {
        self.pairs.iter().map(|p| p.margin).fold(f64::INFINITY, f64::min)
    }
}

fn check_inner(i: &EnergyInterval, j: Option<&EnergyInterval>) -> Result<()> {
    if let Some(j) = j {
        if j.center != i.center || j.radius > i.radius {
            return Err(Error::invalid("J", "must share the center of I and not exceed it"));
        }
    }
    Ok(())
}

/// Searches a center for every eigenvector: the argmax site first, then
/// every site of the box, keeping the best margin.
pub fn localized_pairs(
    es: &Eigensystem,
    side: f64,
    i: &EnergyInterval,
    j: Option<&EnergyInterval>,
    m: f64,
    tau: f64,
) -> Result<Vec<PairCertificate>> {
    let lt = floor_pow(side, tau) as i64;
    let sites = es.region.sites();
    (0..es.len())
        .into_par_iter()
        .map(|k| {
            let phi = es.vector(k);
            check_normalized(phi)?;
            let value = es.values[k];
            let h = i.h(value);
            let chi = j.is_none_or(|j| j.contains(value));
            let rate = if chi { m * h } else { 0.0 };
            let top = (0..phi.len())
                .max_by(|&a, &b| phi[a].abs().total_cmp(&phi[b].abs()).then(b.cmp(&a)))
                .expect("eigenvectors of a non-empty box");
            let mut center = top;
            let mut margin = margin_at(&es.region, phi, &sites[top], rate, lt);
            if margin < 0.0 {
                for (c, x) in sites.iter().enumerate() {
                    let mc = margin_at(&es.region, phi, x, rate, lt);
                    if mc > margin {
                        center = c;
                        margin = mc;
                        if margin >= 0.0 {
                            break;
                        }
                    }
                }
            }
            Ok(PairCertificate {
                index: k,
                value,
                h,
                rate,
                center: sites[center].clone(),
                margin,
                pass: margin >= 0.0,
            })
        })
        .collect()
}

/// Tests whether the box carrying `es` (real side `side`) is
/// `(m, I)`-localizing, or `(m, J, I)`-localizing when `j` is given.
pub fn certify_box(
    es: &Eigensystem,
    side: f64,
    i: &EnergyInterval,
    m: f64,
    exps: &ExponentSet,
    j: Option<&EnergyInterval>,
) -> Result<LocalizationCertificate> {
    check_inner(i, j)?;
    let radius = j.map_or(i.radius, |j| j.radius);
    let bounds = rate_bounds(side, radius, es.region.dim(), exps.kappa_prime);
    let rate_ok = bounds.0 <= m && m <= bounds.1;
    let mut cert = LocalizationCertificate {
        side,
        m,
        interval: *i,
        inner: j.copied(),
        rate_bounds: bounds,
        rate_ok,
        localized: None,
        certified: false,
        reason: None,
        pairs: Vec::new(),
    };
    if !rate_ok {
        cert.reason = Some("rate-bounds".into());
        return Ok(cert);
    }
    cert.pairs = localized_pairs(es, side, i, j, m, exps.tau)?;
    let all = cert.pairs.iter().all(|p| p.pass);
    cert.localized = Some(all);
    cert.certified = all;
    if !all {
        cert.reason = Some("eigenpair".into());
    }
    Ok(cert)
}

/// Largest rate each eigenvector supports: `max_x min_y -log|φ(y)| / ‖y - x‖`.
fn best_rate(region: &Region, phi: &[f64], lt: i64) -> f64 {
    let sites = region.sites();
    sites
        .iter()
        .map(|x| {
            let mut r = f64::INFINITY;
            for (y, v) in sites.iter().zip(phi) {
                let d = sup_dist(y, x);
                if d >= lt && *v != 0.0 {
                    r = r.min(-v.abs().ln() / d as f64);
                }
            }
            r
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest `m` on the grid `L^{-κ'} + k·1e-4` at which the box certifies,
/// or 0 when it certifies at no admissible `m`.
pub fn max_localizing_m(es: &Eigensystem, side: f64, i: &EnergyInterval, exps: &ExponentSet) -> Result<f64> {
    let (lower, cap) = rate_bounds(side, i.radius, es.region.dim(), exps.kappa_prime);
    if lower > cap {
        return Ok(0.0);
    }
    let lt = floor_pow(side, exps.tau) as i64;
    let mut sup = cap;
    for k in 0..es.len() {
        let h = i.h(es.values[k]);
        if h > 0.0 {
            sup = sup.min(best_rate(&es.region, es.vector(k), lt) / h);
        }
    }
    if sup < lower {
        return Ok(0.0);
    }
    let mut steps = ((sup - lower) / M_RESOLUTION).floor();
    loop {
        let m = lower + steps * M_RESOLUTION;
        if certify_box(es, side, i, m, exps, None)?.certified {
            return Ok(m);
        }
        if steps == 0.0 {
            return Ok(0.0);
        }
        steps -= 1.0;
    }
}

/// `dist(σ_A, σ_B) >= e^{-R^β}`; vacuous when either spectrum is empty.
pub fn r_separated(a: &[f64], b: &[f64], r: f64, beta: f64) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    spectral_separation(&a, &b) >= (-r.powf(beta)).exp()
}

/// Checks `r_separated` for every pair of disjoint members; overlapping
/// pairs are exempt. Returns the first violating pair.
pub fn family_r_separated(members: &[(Region, Vec<f64>)], r: f64, beta: f64) -> (bool, Option<(usize, usize)>) {
    for p in 0..members.len() {
        for q in p + 1..members.len() {
            if members[p].0.is_disjoint(&members[q].0) && !r_separated(&members[p].1, &members[q].1, r, beta) {
                return (false, Some((p, q)));
            }
        }
    }
    (true, None)
}

/// A buffered subset built around a `G₂`-connected cluster of bad cover boxes.
/// Centers are referred to by their index in the cover.
#[derive(Clone, Debug, Serialize)]
pub struct BufferedSubset {
    /// The cluster `Φ`.
    pub bad: Vec<usize>,
    /// `Φ̃ = {a : dist(a, Φ) <= k_ℓ ρ ℓ^ς}`.
    pub tilde: Vec<usize>,
    /// `𝒢_Υ`, the `G₁`-exterior boundary of `Φ̃`.
    pub buffer: Vec<usize>,
    /// `Υ = ⋃_{a ∈ Φ̃} Λ_ℓ(a) ∩ Λ_L`.
    pub upsilon: Region,
    pub diameter: i64,
    /// `6ℓ|Φ|`.
    pub diameter_bound: f64,
    /// Invariants that failed, empty when the subset is well formed.
    pub violations: Vec<String>,
}

impl BufferedSubset {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn buffer_centers(&self, cover: &Cover) -> Vec<Vec<f64>> {
        self.buffer.iter().map(|&a| cover.centers[a].clone()).collect()
    }
}

fn min_index_dist(cover: &Cover, a: usize, set: &[usize]) -> i64 {
    set.iter().map(|&b| cover.index_dist(a, b)).min().unwrap_or(i64::MAX)
}

/// Connected components of `nodes` under the edge relation `adj`, each
/// sorted, listed by smallest member.
fn components(nodes: &[usize], adj: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; nodes.len()];
    let mut out = Vec::new();
    for s in 0..nodes.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(nodes[p]);
            for q in 0..nodes.len() {
                if !seen[q] && adj(nodes[p], nodes[q]) {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort();
    out
}

/// Groups pairwise-disjoint bad boxes into `G₂`-clusters and surrounds each
/// with a buffer of neighbouring cover boxes, checking every structural
/// invariant by enumeration.
pub fn build_buffered(bad: &[usize], cover: &Cover, exps: &ExponentSet) -> Result<Vec<BufferedSubset>> {
    let k = cover.k_ell;
    for (p, &a) in bad.iter().enumerate() {
        if a >= cover.len() {
            return Err(Error::invalid("bad", format!("index {a} outside the cover")));
        }
        for &b in &bad[..p] {
            if !cover_disjoint(cover, a, b) {
                return Err(Error::Overlap(format!("bad boxes {b} and {a} intersect")));
            }
        }
    }
    let parent = cover.parent.sites();
    let ell = cover.child_side;
    let depth = floor_pow(ell, exps.tau_tilde) as f64;
    let all: Vec<usize> = (0..cover.len()).collect();

    let clusters = components(bad, |a, b| {
        let d = cover.index_dist(a, b);
        d >= k && d < 3 * k
    });
    let mut out: Vec<BufferedSubset> = clusters
        .into_iter()
        .map(|phi| {
            let tilde: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&a| min_index_dist(cover, a, &phi) <= k)
                .collect();
            let buffer: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&a| {
                    let d = min_index_dist(cover, a, &tilde);
                    d > 0 && d < k
                })
                .collect();
            let mut upsilon = Region::empty(parent.dim());
            for &a in &tilde {
                upsilon = upsilon.union(&cover.child_box(a).sites());
            }
            let upsilon = upsilon.intersection(&parent);
            let diameter = upsilon.diameter();
            let diameter_bound = 6.0 * ell * phi.len() as f64;

            let mut violations = Vec::new();
            if !upsilon.is_connected() {
                violations.push("upsilon is not connected".to_string());
            }
            if components(&tilde, |a, b| cover.index_dist(a, b) < k).len() != 1 {
                violations.push("tilde set is not G1-connected".to_string());
            }
            if diameter as f64 > diameter_bound {
                violations.push(format!("diameter {diameter} exceeds {diameter_bound}"));
            }
            let mut deep = Vec::new();
            for &a in &buffer {
                let sites = cover.child_box(a).sites();
                if !sites.is_subset_of(&parent) {
                    violations.push(format!("buffer box {a} leaves the parent box"));
                    continue;
                }
                deep.push(interior(&sites, &parent, depth).expect("buffer box inside parent"));
            }
            let inner = boundary(&upsilon, &parent).expect("upsilon inside parent").interior;
            for y in inner.iter() {
                if !deep.iter().any(|r| r.contains(y)) {
                    violations.push(format!("boundary site {y:?} is not deep in any buffer box"));
                }
            }
            BufferedSubset {
                bad: phi,
                tilde,
                buffer,
                upsilon,
                diameter,
                diameter_bound,
                violations,
            }
        })
        .collect();

    for r in 0..out.len() {
        for s in r + 1..out.len() {
            let d = out[r]
                .tilde
                .iter()
                .map(|&a| min_index_dist(cover, a, &out[s].tilde))
                .min()
                .unwrap_or(i64::MAX);
            if d < k {
                let msg = format!("tilde sets {r} and {s} are {d} spacings apart");
                out[r].violations.push(msg.clone());
                out[s].violations.push(msg);
            }
            if !out[r].upsilon.is_disjoint(&out[s].upsilon) {
                let msg = format!("upsilon {r} and {s} intersect");
                out[r].violations.push(msg.clone());
                out[s].violations.push(msg);
            }
        }
    }
    Ok(out)
}

/// Witness for one outer-bad-region check.
#[derive(Clone, Debug, Serialize)]
pub struct OutbadReport {
    /// `dist(λ, σ(H_Φ)) >= η` held with room for the eigenvalue error
    /// `EIG_TOL (1 + ‖H_Φ‖)`; when false nothing was tested.
    pub applicable: bool,
    pub bound: f64,
    /// `‖χ_Φ (H_Θ - λ)ψ‖ / η`, absorbing the eigenpair's numerical residual.
    pub slack: f64,
    pub violations: usize,
    /// Largest `|ψ(y)| / (bound + slack)` over `y ∈ Φ`.
    pub worst_ratio: f64,
    pub witness: Option<Site>,
    /// Exterior boundary site carrying `max |ψ|`.
    pub boundary_max_site: Option<Site>,
}

/// Checks `|ψ(y)| <= 2d η^{-1} |∂_ex Φ|^{1/2} max_{∂_ex Φ} |ψ|` for all
/// `y ∈ Φ`, where `(ψ, λ)` is an eigenpair of `h` (the operator on `Θ`).
pub fn verify_outbad(h: &Hamiltonian, psi: &[f64], lambda: f64, phi: &Region, eta: f64) -> Result<OutbadReport> {
    let theta = h.region();
    if psi.len() != theta.len() {
        return Err(Error::invalid("psi", "length differs from the region size"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", format!("must be positive, got {eta}")));
    }
    let sub = h.restrict(phi)?;
    // the hypothesis must survive the error in the computed spectrum
    let err = EIG_TOL * (1.0 + sub.norm_bound());
    let applicable = spectral_dist(&eigenvalues(&sub), lambda) - err >= eta;
    let mut report = OutbadReport {
        applicable,
        bound: f64::NAN,
        slack: f64::NAN,
        violations: 0,
        worst_ratio: 0.0,
        witness: None,
        boundary_max_site: None,
    };
    if !applicable {
        return Ok(report);
    }
    let b = boundary(phi, theta)?;
    let idx = |s: &[i64]| theta.index_of(s).expect("site of theta");
    let (mut vmax, mut vsite) = (0.0f64, None);
    for v in b.exterior.iter() {
        let a = psi[idx(v)].abs();
        if vsite.is_none() || a > vmax {
            vmax = a;
            vsite = Some(v.clone());
        }
    }
    let d = theta.dim() as f64;
    report.bound = 2.0 * d / eta * (b.exterior.len() as f64).sqrt() * vmax;
    let hpsi = h.matrix() * nalgebra::DVector::from_column_slice(psi);
    let resid: f64 = phi
        .iter()
        .map(|y| {
            let i = idx(y);
            let r = hpsi[i] - lambda * psi[i];
            r * r
        })
        .sum::<f64>()
        .sqrt();
    report.slack = resid / eta;
    report.boundary_max_site = vsite;
    let allowed = report.bound + report.slack;
    for y in phi.iter() {
        let a = psi[idx(y)].abs();
        let ratio = if allowed > 0.0 {
            a / allowed
        } else if a > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if ratio > report.worst_ratio || report.witness.is_none() {
            report.worst_ratio = report.worst_ratio.max(ratio);
            report.witness = Some(y.clone());
        }
        if a > allowed * (1.0 + OUTBAD_RTOL) {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// A hypothesis of a monitored estimate and whether it held.
#[derive(Clone, Debug, Serialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
}

/// Ratio measurement for an asymptotic decay estimate. A ratio `<= 1`
/// means the estimate held at the tested site.
#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub c_d: f64,
    /// `m₃ = m (1 - C_d ℓ^{-(1-τ)/2})`.
    pub m3: f64,
    pub h: f64,
    pub gates: Vec<Gate>,
    /// Some hypothesis failed; the ratios are then informational only.
    pub skipped: bool,
    pub n_points: usize,
    pub max_ratio: f64,
    pub witness: Option<Site>,
}

impl DecayReport {
    pub fn gate(&self, name: &str) -> Option<bool> {
        self.gates.iter().find(|g| g.name == name).map(|g| g.pass)
    }
}

pub fn m3(m: f64, ell: f64, tau: f64, c_d: f64) -> f64 {
    m * (1.0 - c_d * ell.powf(-(1.0 - tau) / 2.0))
}

fn gate(name: &str, pass: bool) -> Gate {
    Gate {
        name: name.to_string(),
        pass,
    }
}

/// `|a| / (factor · vmax)` computed in log space.
fn log_ratio(a: f64, log_factor: f64, vmax: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else if vmax == 0.0 || log_factor == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        (a.ln() - log_factor - vmax.ln()).exp()
    }
}

/// Monitors the interior decay of an eigenfunction `ψ` of `h` (on `Θ`)
/// inside a box `Λ_ℓ ⊆ Θ` with eigensystem `box_es`.
#[allow(clippy::too_many_arguments)]
pub fn verify_decay_lemma(
    h: &Hamiltonian,
    psi: &[f64],
    lambda: f64,
    side: f64,
    box_es: &Eigensystem,
    i: &EnergyInterval,
    m: f64,
    exps: &ExponentSet,
    c_d: f64,
) -> Result<DecayReport> {
    let theta = h.region();
    let cube = &box_es.region;
    if !cube.is_subset_of(theta) {
        return Err(Error::NotSubset("box is not inside theta".into()));
    }
    let big = side.powf(exps.gamma);
    let threshold = 0.5 * (-big.powf(exps.beta)).exp();
    let in_sigma: Vec<f64> = sigma_in(&box_es.values, i)
        .into_iter()
        .map(|k| box_es.values[k])
        .collect();
    let gates = vec![
        gate("lambda_in_inner", i.shrink(side, exps.kappa).contains(lambda)),
        gate("distance", spectral_dist(&in_sigma, lambda) >= threshold),
        gate("localizing", certify_box(box_es, side, i, m, exps, None)?.certified),
    ];

    let hv = i.h(lambda);
    let m3 = m3(m, side, exps.tau, c_d);
    let b = boundary(cube, theta)?;
    let vmax = b
        .exterior
        .iter()
        .map(|v| psi[theta.index_of(v).unwrap()].abs())
        .fold(0.0, f64::max);
    let points = interior(cube, theta, floor_pow(side, exps.tau_tilde) as f64)?;
    let (mut max_ratio, mut witness) = (0.0f64, None);
    for y in points.iter() {
        let r = b.interior.dist_to(y);
        let ratio = log_ratio(psi[theta.index_of(y).unwrap()].abs(), -m3 * hv * r, vmax);
        if witness.is_none() || ratio > max_ratio {
            max_ratio = max_ratio.max(ratio);
            witness = Some(y.clone());
        }
    }
    Ok(DecayReport {
        c_d,
        m3,
        h: hv,
        skipped: gates.iter().any(|g| !g.pass),
        gates,
        n_points: points.len(),
        max_ratio,
        witness,
    })
}

/// Monitors the decay of `ψ` (an eigenfunction of `h` on `Λ_L`) across a
/// buffered subset. `buffer_es[i]` is the eigensystem of the box at
/// `ups.buffer[i]`.
#[allow(clippy::too_many_arguments)]
pub fn verify_buffer_lemma(
    h: &Hamiltonian,
    psi: &[f64],
    lambda: f64,
    ups: &BufferedSubset,
    cover: &Cover,
    buffer_es: &[Eigensystem],
    i: &EnergyInterval,
    m: f64,
    exps: &ExponentSet,
    c_d: f64,
) -> Result<DecayReport> {
    let big = h.region();
    if buffer_es.len() != ups.buffer.len() {
        return Err(Error::invalid(
            "buffer_es",
            "one eigensystem per buffer box is required",
        ));
    }
    let ell = cover.child_side;
    let threshold = 0.5 * (-cover.parent.side.powf(exps.beta)).exp();
    let sigma_i = |vals: &[f64]| -> Vec<f64> { sigma_in(vals, i).into_iter().map(|k| vals[k]).collect() };

    let ups_vals = eigenvalues(&h.restrict(&ups.upsilon)?);
    let mut buffer_far = true;
    let mut buffer_loc = true;
    for es in buffer_es {
        buffer_far &= spectral_dist(&sigma_i(&es.values), lambda) >= threshold;
        buffer_loc &= certify_box(es, ell, i, m, exps, None)?.certified;
    }
    let gates = vec![
        gate("lambda_in_inner", i.shrink(ell, exps.kappa).contains(lambda)),
        gate("proper_subset", ups.upsilon.len() < big.len()),
        gate(
            "upsilon_distance",
            spectral_dist(&sigma_i(&ups_vals), lambda) >= threshold,
        ),
        gate("buffer_distance", buffer_far),
        gate("buffer_localizing", buffer_loc),
        gate("buffered_invariants", ups.is_valid()),
    ];

    let hv = i.h(lambda);
    let m3 = m3(m, ell, exps.tau, c_d);
    let mut wmax = 0.0f64;
    for es in buffer_es {
        for v in boundary(&es.region, big)?.exterior.iter() {
            wmax = wmax.max(psi[big.index_of(v).unwrap()].abs());
        }
    }
    let log_factor = -(m3 / 2.0) * hv * floor_pow(ell, exps.tau_tilde) as f64;
    let (mut max_ratio, mut witness) = (0.0f64, None);
    for y in ups.upsilon.iter() {
        let ratio = log_ratio(psi[big.index_of(y).unwrap()].abs(), log_factor, wmax);
        if witness.is_none() || ratio > max_ratio {
            max_ratio = max_ratio.max(ratio);
            witness = Some(y.clone());
        }
    }
    Ok(DecayReport {
        c_d,
        m3,
        h: hv,
        skipped: gates.iter().any(|g| !g.pass),
        gates,
        n_points: ups.upsilon.len(),
        max_ratio,
        witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::{hamiltonian, sample_potential, DisorderSpec};
    use crate::lattice::{suitable_cover, BoxSpec};
    use crate::spectral::eigensystem;

    fn hand_built() -> ExponentSet {
        ExponentSet::new(0.1, 0.2, 0.25, 0.9, 1.2, 0.3, 0.2, 0.5)
    }

    #[test]
    fn h_and_intervals() {
        let i = EnergyInterval::new(0.0, 2.0).unwrap();
        assert_eq!(h_eval(&i, 0.0), 1.0);
        assert_eq!(h_eval(&i, 1.0), 0.75);
        assert_eq!(h_eval(&i, 2.0), 0.0);
        assert_eq!(h_eval(&i, -2.0), 0.0);
        let (lo, hi) = shrink_expand(&i, 16.0, 0.3).unwrap();
        assert!((lo.radius - 2.0 * (1.0 - 16f64.powf(-0.3))).abs() < 1e-15);
        assert!((lo.radius - 1.1294).abs() < 1e-4);
        assert_eq!(hi.shrink(16.0, 0.3), i);
        assert!(shrink_expand(&i, 1.0, 0.3).is_err());
    }

    #[test]
    fn is_localized_examples() {
        // side 64 about 0.5 holds exactly the 64 sites -31..=32
        let r = BoxSpec::new(vec![0.5], 64.0).unwrap().sites();
        assert_eq!(r.len(), 64);
        let mut delta = vec![0.0; r.len()];
        delta[10] = 1.0;
        let x = r.sites()[10].clone();
        assert!(is_localized(&r, &delta, &x, 5.0, 64.0, 0.9).unwrap().0);
        let flat = vec![1.0 / 8.0; 64];
        let centre = vec![0];
        assert_eq!(floor_pow(64.0, 0.9), 42);
        // no site of the box is 42 away from its middle, so only an
        // off-center x exposes the flat profile
        assert!(is_localized(&r, &flat, &centre, 0.5, 64.0, 0.9).unwrap().0);
        let (ok, margin) = is_localized(&r, &flat, &[-31], 0.5, 64.0, 0.9).unwrap();
        assert!(!ok);
        assert!((margin - (8f64.ln() - 0.5 * 63.0)).abs() < 1e-12);
        assert!(is_localized(&r, &flat, &centre, 0.0, 64.0, 0.9).unwrap().0);
        assert!(is_localized(&r, &vec![0.5; 64], &centre, 0.0, 64.0, 0.9).is_err());
    }

    #[test]
    fn rate_bound_failure_is_reported() {
        let r = BoxSpec::centered(1, 8.0).unwrap().sites();
        let es = eigensystem(&Hamiltonian::from_potential(&r, &vec![0.0; r.len()]).unwrap()).unwrap();
        let i = EnergyInterval::new(0.0, 2.0).unwrap();
        let c = certify_box(&es, 8.0, &i, 0.3, &hand_built(), None).unwrap();
        assert!((c.rate_bounds.1 - 0.5 * 1.5f64.ln()).abs() < 1e-15);
        assert!((c.rate_bounds.1 - 0.2027).abs() < 1e-4);
        assert!(!c.certified && !c.rate_ok);
        assert_eq!(c.reason.as_deref(), Some("rate-bounds"));
        assert!(c.pairs.is_empty() && c.localized.is_none());
    }

    #[test]
    fn decoupled_site_is_localized() {
        let r = BoxSpec::centered(1, 16.0).unwrap().sites();
        let mut v = vec![0.0; r.len()];
        v[3] = 1e6;
        for (k, x) in v.iter_mut().enumerate() {
            if k != 3 {
                *x = 50.0 * ((k * 7919) % 13) as f64;
            }
        }
        let es = eigensystem(&Hamiltonian::from_potential(&r, &v).unwrap()).unwrap();
        let top = es.len() - 1;
        assert!(es.vector(top)[3].abs() > 1.0 - 1e-10);
        let i = EnergyInterval::new(1e6, 1.0).unwrap();
        let e = hand_built().with_field("kappa_prime", 0.9).unwrap();
        let c = certify_box(&es, 16.0, &i, 0.1, &e, None).unwrap();
        assert!(c.certified, "{:?}", c.reason);
        assert_eq!(c.pairs[top].center, vec![3 - 8]);
    }

    #[test]
    fn vacuous_outside_interval_and_sign_invariance() {
        let d = DisorderSpec::centered_uniform(2.0).unwrap();
        let r = BoxSpec::centered(1, 12.0).unwrap().sites();
        let es = eigensystem(&hamiltonian(&r, &sample_potential(&r, &d, 4, 0).unwrap()).unwrap()).unwrap();
        // an interval far from the spectrum leaves every requirement vacuous
        let far = EnergyInterval::new(100.0, 1.0).unwrap();
        let pairs = localized_pairs(&es, 12.0, &far, None, 0.2, 0.9).unwrap();
        assert!(pairs.iter().all(|p| p.pass && p.rate == 0.0));

        let i = EnergyInterval::new(0.0, 4.0).unwrap();
        let e = hand_built();
        let mut flipped = es.clone();
        flipped.vectors *= -1.0;
        let a = certify_box(&es, 12.0, &i, 0.3, &e, None).unwrap();
        let b = certify_box(&flipped, 12.0, &i, 0.3, &e, None).unwrap();
        assert_eq!(a.certified, b.certified);
        for (p, q) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!((p.pass, p.margin), (q.pass, q.margin));
        }
    }

    #[test]
    fn max_m_is_sharp() {
        let d = DisorderSpec::centered_uniform(20.0).unwrap();
        let r = BoxSpec::centered(1, 32.0).unwrap().sites();
        let es = eigensystem(&hamiltonian(&r, &sample_potential(&r, &d, 1, 0).unwrap()).unwrap()).unwrap();
        let i = EnergyInterval::new(0.0, 10.0).unwrap();
        let e = ExponentSet::new(0.1, 0.2, 0.25, 0.5, 1.2, 0.3, 0.2, 0.5);
        let m = max_localizing_m(&es, 32.0, &i, &e).unwrap();
        assert!(m > 0.0);
        assert!(certify_box(&es, 32.0, &i, m, &e, None).unwrap().certified);
        assert!(!certify_box(&es, 32.0, &i, m + 1e-3, &e, None).unwrap().certified);

        let flat = EnergyInterval::new(0.0, 10.0).unwrap();
        let free = eigensystem(&Hamiltonian::from_potential(&r, &vec![0.0; r.len()]).unwrap()).unwrap();
        assert_eq!(max_localizing_m(&free, 32.0, &flat, &e).unwrap(), 0.0);
    }

    #[test]
    fn separation_examples() {
        assert!(r_separated(&[0.0], &[1.0], 10.0, 0.25));
        assert!(!r_separated(&[0.3, 0.5], &[0.5], 10.0, 0.25));
        assert!(r_separated(&[], &[0.5], 10.0, 0.25));
        let a = Region::new(1, vec![vec![0]]).unwrap();
        let b = Region::new(1, vec![vec![0], vec![1]]).unwrap();
        let c = Region::new(1, vec![vec![5]]).unwrap();
        assert_eq!(
            family_r_separated(&[(a.clone(), vec![0.0]), (b, vec![0.0])], 10.0, 0.25),
            (true, None)
        );
        assert_eq!(
            family_r_separated(&[(a.clone(), vec![0.0]), (c, vec![1e-9])], 10.0, 0.25),
            (false, Some((0, 1)))
        );
        assert_eq!(family_r_separated(&[(a, vec![0.0])], 10.0, 0.25), (true, None));
    }

    #[test]
    fn buffered_on_reference_cover() {
        let parent = BoxSpec::centered(1, 10.0).unwrap();
        let cover = suitable_cover(&parent, 4.0, 0.5).unwrap();
        let e = hand_built();
        assert!(build_buffered(&[], &cover, &e).unwrap().is_empty());

        // the middle box swallows the whole cover: Υ = Λ_L, nothing to buffer
        let mid = build_buffered(&[2], &cover, &e).unwrap();
        assert_eq!(mid[0].tilde, vec![0, 1, 2, 3, 4]);
        assert!(mid[0].buffer.is_empty());
        assert_eq!(mid[0].upsilon, parent.sites());
        assert!(mid[0].is_valid(), "{:?}", mid[0].violations);

        let one = build_buffered(&[0], &cover, &e).unwrap();
        assert_eq!(one.len(), 1);
        let u = &one[0];
        // k_ℓ = 3: Φ̃ reaches three spacings, the buffer the two beyond
        assert_eq!(u.tilde, vec![0, 1, 2, 3]);
        assert_eq!(u.buffer, vec![4]);
        assert!(u.upsilon.is_connected());
        assert!(u.diameter as f64 <= 24.0);
        // a side-4 buffer box has no sites deeper than ⌊4^{0.95}⌋ = 3
        assert!(!u.violations.is_empty());
        assert!(u.violations.iter().all(|v| v.starts_with("boundary site")));

        let two = build_buffered(&[0, 4], &cover, &e).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].bad, vec![0, 4]);
        assert!(two[0].diameter as f64 <= 48.0);
        assert!(two[0].buffer.is_empty());
        assert!(matches!(build_buffered(&[0, 1], &cover, &e), Err(Error::Overlap(_))));
    }

    #[test]
    fn buffered_invariants_on_larger_cover() {
        let parent = BoxSpec::centered(2, 60.0).unwrap();
        let cover = suitable_cover(&parent, 16.0, 0.5).unwrap();
        let e = hand_built();
        let corner = 0;
        let subsets = build_buffered(&[corner], &cover, &e).unwrap();
        assert_eq!(subsets.len(), 1);
        assert!(subsets[0].upsilon.is_connected());
        assert!(subsets[0].diameter as f64 <= subsets[0].diameter_bound);
        let parent_sites = parent.sites();
        for a in &subsets[0].buffer {
            assert!(cover.child_box(*a).sites().is_subset_of(&parent_sites));
        }
    }

    #[test]
    fn outbad_holds_on_random_chain() {
        let d = DisorderSpec::uniform(0.0, 1.0).unwrap();
        let theta = BoxSpec::centered(1, 20.0).unwrap().sites();
        let phi = BoxSpec::centered(1, 6.0).unwrap().sites();
        let h = hamiltonian(&theta, &sample_potential(&theta, &d, 3, 0).unwrap()).unwrap();
        let es = eigensystem(&h).unwrap();
        let hphi = h.restrict(&phi).unwrap();
        let sub = eigenvalues(&hphi);
        let err = 2.0 * EIG_TOL * (1.0 + hphi.norm_bound());
        for k in 0..es.len() {
            let eta = spectral_dist(&sub, es.values[k]) - err;
            let rep = verify_outbad(&h, es.vector(k), es.values[k], &phi, eta).unwrap();
            assert!(rep.applicable);
            assert_eq!(rep.violations, 0, "pair {k}: {rep:?}");
        }
        // eigenvalues shared with the whole box make the hypothesis fail
        let lam = es.values[0];
        let rep = verify_outbad(&h, es.vector(0), lam, &theta, 1e-3).unwrap();
        assert!(!rep.applicable);
    }

    #[test]
    fn decay_monitor_zero_interior() {
        let theta = BoxSpec::centered(1, 40.0).unwrap().sites();
        let h = Hamiltonian::from_potential(&theta, &vec![0.0; theta.len()]).unwrap();
        let mut psi = vec![0.0; theta.len()];
        psi[0] = 1.0;
        let cube = BoxSpec::centered(1, 16.0).unwrap();
        let es = eigensystem(&h.restrict(&cube.sites()).unwrap()).unwrap();
        let i = EnergyInterval::new(0.0, 1.0).unwrap();
        let e = hand_built();
        let rep = verify_decay_lemma(&h, &psi, 0.0, 16.0, &es, &i, 0.1, &e, 1.0).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert!(rep.skipped);
        assert_eq!(rep.gate("lambda_in_inner"), Some(true));
    }
}
