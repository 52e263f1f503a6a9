//! Monte Carlo estimates of the probabilistic inputs (Wegner and
//! separation bounds, initial-scale localization), the induction-step
//! experiment on a single box, and the deterministic scale recursion.
//!
//! Every loop runs over sample indices in parallel; each sample draws its
//! potential from a stream keyed by `(seed, index, site)`, and results are
//! collected in index order, so reports do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    build_buffered, certify_box, family_r_separated, localized_pairs, rate_bounds, BufferedSubset, EnergyInterval,
};
use crate::disorder::{sample_potential, DisorderSpec, Hamiltonian, DENSE_CAP};
use crate::error::{Error, Result};
use crate::exponents::{scale_sequence, validate, ExponentSet};
use crate::lattice::{cover_disjoint, suitable_cover, BoxSpec, Cover, Region};
use crate::spectral::{eigensystem, eigenvalues, spectral_dist, spectral_separation, Eigensystem};

/// Frequency of an event over independent samples, with its theoretical
/// comparison value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    /// Samples evaluated (excluding skipped ones).
    pub n_samples: u64,
    pub n_hits: u64,
    pub empirical_p: f64,
    /// Upper bound (Wegner, separation) or lower bound (localization) on the
    /// probability.
    pub bound_p: f64,
    /// `3 sqrt(p̂(1 - p̂)/n)`.
    pub half_width_3sigma: f64,
    /// Samples dropped because the eigensolver missed its tolerance.
    pub skipped: u64,
}

impl McReport {
    pub fn new(n_samples: u64, n_hits: u64, bound_p: f64, skipped: u64) -> Self {
        let p = if n_samples == 0 {
            0.0
        } else {
            n_hits as f64 / n_samples as f64
        };
        let hw = if n_samples == 0 {
            0.0
        } else {
            3.0 * (p * (1.0 - p) / n_samples as f64).sqrt()
        };
        McReport {
            n_samples,
            n_hits,
            empirical_p: p,
            bound_p,
            half_width_3sigma: hw,
            skipped,
        }
    }

    /// `p̂ <= bound + 3σ̂`.
    pub fn within_upper_bound(&self) -> bool {
        self.empirical_p <= self.bound_p + self.half_width_3sigma
    }

    pub fn to_csv(&self) -> String {
        format!(
            "n_samples,n_hits,empirical_p,bound_p,half_width_3sigma,skipped\n{},{},{},{},{},{}\n",
            self.n_samples,
            self.n_hits,
            crate::fmt_f64(self.empirical_p),
            crate::fmt_f64(self.bound_p),
            crate::fmt_f64(self.half_width_3sigma),
            self.skipped
        )
    }
}

/// Evaluates `hit` on samples `0..n` in parallel; `None` marks a skipped
/// sample.
fn count_hits(n: u64, hit: impl Fn(u64) -> Result<Option<bool>> + Sync + Send) -> Result<(u64, u64, u64)> {
    let outcomes: Vec<Option<bool>> = (0..n).into_par_iter().map(hit).collect::<Result<_>>()?;
    let skipped = outcomes.iter().filter(|o| o.is_none()).count() as u64;
    let hits = outcomes.iter().filter(|o| **o == Some(true)).count() as u64;
    Ok((n - skipped, hits, skipped))
}

fn check_size(r: &Region) -> Result<()> {
    if r.len() > DENSE_CAP {
        return Err(Error::SizeCap {
            sites: r.len(),
            cap: DENSE_CAP,
        });
    }
    Ok(())
}

fn spectrum(r: &Region, d: &DisorderSpec, seed: u64, index: u64) -> Result<Vec<f64>> {
    let v = sample_potential(r, d, seed, index)?;
    Ok(eigenvalues(&Hamiltonian::from_potential(r, &v.values)?))
}

/// `P{dist(E, σ(H_Θ)) <= η}` against `K̃ η^α |Θ|`.
pub fn wegner_mc(region: &Region, e: f64, eta: f64, d: &DisorderSpec, n: u64, seed: u64) -> Result<McReport> {
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", format!("must be positive, got {eta}")));
    }
    check_size(region)?;
    let (n_eval, hits, skipped) = count_hits(n, |i| Ok(Some(spectral_dist(&spectrum(region, d, seed, i)?, e) <= eta)))?;
    let bound = d.wegner_constant() * eta.powf(d.alpha()) * region.len() as f64;
    Ok(McReport::new(n_eval, hits, bound, skipped))
}

fn check_pair(a: &Region, b: &Region) -> Result<()> {
    if !a.is_disjoint(b) {
        return Err(Error::Overlap("regions must be disjoint".into()));
    }
    check_size(a)?;
    check_size(b)
}

/// `P{dist(σ(H_A), σ(H_B)) <= η}` against `K̃ η^α |A||B|`.
pub fn separation_mc_eta(a: &Region, b: &Region, eta: f64, d: &DisorderSpec, n: u64, seed: u64) -> Result<McReport> {
    check_pair(a, b)?;
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", format!("must be positive, got {eta}")));
    }
    let (n_eval, hits, skipped) = count_hits(n, |i| {
        let sa = spectrum(a, d, seed, i)?;
        let sb = spectrum(b, d, seed, i)?;
        Ok(Some(spectral_separation(&sa, &sb) <= eta))
    })?;
    let bound = d.wegner_constant() * eta.powf(d.alpha()) * (a.len() * b.len()) as f64;
    Ok(McReport::new(n_eval, hits, bound, skipped))
}

/// Frequency with which `A` and `B` fail to be `R`-separated
/// (`dist(σ_A, σ_B) < e^{-R^β}`), against `K̃ e^{-α R^β} |A||B|`.
pub fn separation_mc(
    a: &Region,
    b: &Region,
    r: f64,
    beta: f64,
    d: &DisorderSpec,
    n: u64,
    seed: u64,
) -> Result<McReport> {
    check_pair(a, b)?;
    let eta = (-r.powf(beta)).exp();
    let (n_eval, hits, skipped) = count_hits(n, |i| {
        let sa = spectrum(a, d, seed, i)?;
        let sb = spectrum(b, d, seed, i)?;
        Ok(Some(spectral_separation(&sa, &sb) < eta))
    })?;
    let bound = d.wegner_constant() * (-d.alpha() * r.powf(beta)).exp() * (a.len() * b.len()) as f64;
    Ok(McReport::new(n_eval, hits, bound, skipped))
}

fn box_eigensystem(b: &Region, d: &DisorderSpec, seed: u64, index: u64) -> Result<Option<Eigensystem>> {
    let v = sample_potential(b, d, seed, index)?;
    match eigensystem(&Hamiltonian::from_potential(b, &v.values)?) {
        Ok(es) => Ok(Some(es)),
        Err(Error::Convergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Frequency with which `Λ_L(x)` is `(m, I)`-localizing (or
/// `(m, J, I)`-localizing), compared with `1 - e^{-L^ζ}`.
#[allow(clippy::too_many_arguments)]
pub fn p_localizing_mc(
    side: f64,
    center: &[f64],
    i: &EnergyInterval,
    m: f64,
    exps: &ExponentSet,
    j: Option<&EnergyInterval>,
    d: &DisorderSpec,
    n: u64,
    seed: u64,
) -> Result<McReport> {
    if !(m > 0.0) {
        return Err(Error::invalid("m", format!("must be positive, got {m}")));
    }
    let cube = BoxSpec::new(center.to_vec(), side)?.sites();
    check_size(&cube)?;
    let bound = 1.0 - (-side.powf(exps.zeta)).exp();
    let radius = j.map_or(i.radius, |j| j.radius);
    let (lo, hi) = rate_bounds(side, radius, cube.dim(), exps.kappa_prime);
    if !(lo <= m && m <= hi) {
        // no sample can certify; skip the eigensolves
        return Ok(McReport::new(n, 0, bound, 0));
    }
    let (n_eval, hits, skipped) = count_hits(n, |s| {
        Ok(match box_eigensystem(&cube, d, seed, s)? {
            Some(es) => Some(certify_box(&es, side, i, m, exps, j)?.certified),
            None => None,
        })
    })?;
    Ok(McReport::new(n_eval, hits, bound, skipped))
}

/// Largest family of pairwise-disjoint bad boxes in a cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisjointBad {
    pub size: usize,
    /// Cover indices of one maximum family.
    pub set: Vec<usize>,
    /// False when the greedy fallback (more than 64 bad boxes) was used.
    pub exact: bool,
}

/// Maximum number of pairwise-disjoint boxes among those flagged bad:
/// exact branch and bound up to 64 bad boxes, greedy (a lower bound that
/// is still maximal) beyond.
pub fn max_disjoint_bad(flags: &[bool], cover: &Cover) -> Result<DisjointBad> {
    if flags.len() != cover.len() {
        return Err(Error::invalid(
            "flags",
            format!("{} flags for {} boxes", flags.len(), cover.len()),
        ));
    }
    let bad: Vec<usize> = (0..flags.len()).filter(|&a| flags[a]).collect();
    let conflict = |p: usize, q: usize| p != q && !cover_disjoint(cover, bad[p], bad[q]);
    if bad.len() <= 64 {
        let adj: Vec<u64> = (0..bad.len())
            .map(|p| (0..bad.len()).filter(|&q| conflict(p, q)).fold(0u64, |m, q| m | 1 << q))
            .collect();
        let all = if bad.len() == 64 {
            u64::MAX
        } else {
            (1u64 << bad.len()) - 1
        };
        let mut best = 0u64;
        independent_set(all, 0, &adj, &mut best);
        let set: Vec<usize> = (0..bad.len()).filter(|&p| best >> p & 1 == 1).map(|p| bad[p]).collect();
        return Ok(DisjointBad {
            size: set.len(),
            set,
            exact: true,
        });
    }
    // greedy: repeatedly take the candidate with the fewest live conflicts
    let mut live: Vec<bool> = vec![true; bad.len()];
    let mut set = Vec::new();
    while let Some(p) = (0..bad.len())
        .filter(|&p| live[p])
        .min_by_key(|&p| (0..bad.len()).filter(|&q| live[q] && conflict(p, q)).count())
    {
        set.push(bad[p]);
        live[p] = false;
        for (q, l) in live.iter_mut().enumerate() {
            if conflict(p, q) {
                *l = false;
            }
        }
    }
    set.sort_unstable();
    Ok(DisjointBad {
        size: set.len(),
        set,
        exact: false,
    })
}

fn independent_set(cand: u64, current: u64, adj: &[u64], best: &mut u64) {
    if cand == 0 {
        if current.count_ones() > best.count_ones() {
            *best = current;
        }
        return;
    }
    if current.count_ones() + cand.count_ones() <= best.count_ones() {
        return;
    }
    // branch on the candidate with most conflicts; isolated ones are free
    let mut v = cand.trailing_zeros() as usize;
    let mut deg = (adj[v] & cand).count_ones();
    let mut rest = cand;
    while rest != 0 {
        let u = rest.trailing_zeros() as usize;
        rest &= rest - 1;
        let du = (adj[u] & cand).count_ones();
        if du > deg {
            v = u;
            deg = du;
        }
    }
    let bit = 1u64 << v;
    if deg == 0 {
        independent_set(0, current | cand, adj, best);
        return;
    }
    independent_set(cand & !bit & !adj[v], current | bit, adj, best);
    independent_set(cand & !bit, current, adj, best);
}

/// Knobs for [`induction_step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub dim: usize,
    /// The unspecified constant in `M = m(1 - C_d ℓ^{-ϱ})`.
    pub c_d: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { dim: 1, c_d: 1.0 }
    }
}

/// Outcome of one induction-step sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub sample: u64,
    pub n_bad: usize,
    pub max_disjoint_bad: usize,
    pub exact: bool,
    /// At most `N` disjoint bad boxes.
    pub event_bn: bool,
    pub n_clusters: usize,
    /// Every buffered subset satisfied its structural invariants.
    pub buffered_ok: bool,
    /// Every box outside the swallowed region is localizing.
    pub outside_good: bool,
    /// Every buffered subset is a proper subset of `Λ_L`.
    pub proper_buffers: bool,
    /// The realized family of good boxes and buffered subsets is `L`-separated.
    pub event_sn: bool,
    /// The full family over all `G₂`-clusters of size `<= N` is
    /// `L`-separated; only evaluated when `N <= 2`.
    pub event_sn_full: Option<bool>,
    /// Every eigenvector of `H_{Λ_L}` admits a center at rate `M χ_{I_ℓ} h_I`.
    pub localized: bool,
    /// `L^{-κ'} <= M <= ½ log(1 + B/4d)` with `B` the radius of `I_ℓ`.
    pub rate_ok: bool,
    pub conclusion: bool,
    pub worst_margin: f64,
}

impl StepRow {
    /// All hypotheses the conclusion rests on held for this sample.
    pub fn hypotheses(&self) -> bool {
        self.event_bn && self.event_sn && self.buffered_ok && self.outside_good && self.proper_buffers
    }
}

/// Event frequencies over the samples of an induction step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub n: u64,
    pub p_bn: f64,
    pub p_sn: f64,
    pub p_bn_and_sn: f64,
    pub p_hypotheses: f64,
    pub p_localized: f64,
    pub p_conclusion: f64,
    /// `P(localized | hypotheses)`, `None` when no sample met them.
    pub p_localized_given_hypotheses: Option<f64>,
    pub p_conclusion_given_hypotheses: Option<f64>,
    /// Number of buffered subsets built across all samples.
    pub buffered_built: u64,
    /// Invariant violations across all buffered subsets.
    pub buffered_violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub ell: f64,
    pub big_l: f64,
    pub budget_n: u64,
    pub m: f64,
    pub big_m: f64,
    pub interval: EnergyInterval,
    pub inner: EnergyInterval,
    pub cover_size: usize,
    pub k_ell: i64,
    pub rows: Vec<StepRow>,
    /// Violation messages by sample, for every buffered subset that had any.
    pub violations: Vec<(u64, Vec<String>)>,
    pub summary: StepSummary,
}

impl StepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "sample,n_bad,max_disjoint_bad,exact,event_bn,n_clusters,buffered_ok,outside_good,\
             proper_buffers,event_sn,event_sn_full,localized,rate_ok,conclusion,worst_margin\n",
        );
        for r in &self.rows {
            let full = r.event_sn_full.map_or(String::new(), |b| b.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.sample,
                r.n_bad,
                r.max_disjoint_bad,
                r.exact,
                r.event_bn,
                r.n_clusters,
                r.buffered_ok,
                r.outside_good,
                r.proper_buffers,
                r.event_sn,
                full,
                r.localized,
                r.rate_ok,
                r.conclusion,
                crate::fmt_f64(r.worst_margin)
            ));
        }
        out
    }
}

fn frac(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

fn summarize(rows: &[StepRow], built: u64, violations: u64) -> StepSummary {
    let n = rows.len();
    let count = |f: &dyn Fn(&StepRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let hyp = count(&|r| r.hypotheses());
    let given = |f: &dyn Fn(&StepRow) -> bool| (hyp > 0).then(|| frac(count(&|r| r.hypotheses() && f(r)), hyp));
    StepSummary {
        n: n as u64,
        p_bn: frac(count(&|r| r.event_bn), n),
        p_sn: frac(count(&|r| r.event_sn), n),
        p_bn_and_sn: frac(count(&|r| r.event_bn && r.event_sn), n),
        p_hypotheses: frac(hyp, n),
        p_localized: frac(count(&|r| r.localized), n),
        p_conclusion: frac(count(&|r| r.conclusion), n),
        p_localized_given_hypotheses: given(&|r| r.localized),
        p_conclusion_given_hypotheses: given(&|r| r.conclusion),
        buffered_built: built,
        buffered_violations: violations,
    }
}

/// `G₂`-connected subsets of the cover with at most `n` members (`n <= 2`).
fn small_clusters(cover: &Cover, n: u64) -> Vec<Vec<usize>> {
    let k = cover.k_ell;
    let mut out: Vec<Vec<usize>> = (0..cover.len()).map(|a| vec![a]).collect();
    if n >= 2 {
        for a in 0..cover.len() {
            for b in a + 1..cover.len() {
                let d = cover.index_dist(a, b);
                if d >= k && d < 3 * k {
                    out.push(vec![a, b]);
                }
            }
        }
    }
    out
}

struct SampleOutcome {
    row: StepRow,
    subsets: Vec<BufferedSubset>,
}

#[allow(clippy::too_many_arguments)]
fn step_sample(
    s: u64,
    cover: &Cover,
    parent: &Region,
    i: &EnergyInterval,
    inner: &EnergyInterval,
    m: f64,
    big_m: f64,
    exps: &ExponentSet,
    budget: u64,
    full_family: Option<&[Vec<usize>]>,
    d: &DisorderSpec,
    seed: u64,
) -> Result<SampleOutcome> {
    let ell = cover.child_side;
    let big_l = cover.parent.side;
    let v = sample_potential(parent, d, seed, s)?;
    let h = Hamiltonian::from_potential(parent, &v.values)?;

    let boxes: Vec<Region> = (0..cover.len()).map(|a| cover.child_box(a).sites()).collect();
    let systems: Vec<Eigensystem> = boxes
        .iter()
        .map(|b| eigensystem(&h.restrict(b)?))
        .collect::<Result<_>>()?;
    let good: Vec<bool> = systems
        .iter()
        .map(|es| Ok(certify_box(es, ell, i, m, exps, None)?.certified))
        .collect::<Result<_>>()?;
    let flags: Vec<bool> = good.iter().map(|g| !g).collect();
    let disjoint = max_disjoint_bad(&flags, cover)?;
    let subsets = build_buffered(&disjoint.set, cover, exps)?;

    let swallowed: Vec<bool> = (0..cover.len())
        .map(|a| subsets.iter().any(|u| u.tilde.contains(&a)))
        .collect();
    let outside_good = (0..cover.len()).all(|a| swallowed[a] || good[a]);
    let mut members: Vec<(Region, Vec<f64>)> = (0..cover.len())
        .filter(|&a| !swallowed[a])
        .map(|a| (boxes[a].clone(), systems[a].values.clone()))
        .collect();
    for u in &subsets {
        members.push((u.upsilon.clone(), eigenvalues(&h.restrict(&u.upsilon)?)));
    }
    let (event_sn, _) = family_r_separated(&members, big_l, exps.beta);

    let event_sn_full = match full_family {
        Some(clusters) => {
            let mut all: Vec<(Region, Vec<f64>)> = (0..cover.len())
                .map(|a| (boxes[a].clone(), systems[a].values.clone()))
                .collect();
            for phi in clusters {
                let mut ups = Region::empty(parent.dim());
                for (a, cube) in boxes.iter().enumerate() {
                    if phi.iter().any(|&b| cover.index_dist(a, b) <= cover.k_ell) {
                        ups = ups.union(cube);
                    }
                }
                let ups = ups.intersection(parent);
                let vals = eigenvalues(&h.restrict(&ups)?);
                all.push((ups, vals));
            }
            Some(family_r_separated(&all, big_l, exps.beta).0)
        }
        None => None,
    };

    let es_big = eigensystem(&h)?;
    let pairs = localized_pairs(&es_big, big_l, i, Some(inner), big_m, exps.tau)?;
    let localized = pairs.iter().all(|p| p.pass);
    let worst_margin = pairs.iter().map(|p| p.margin).fold(f64::INFINITY, f64::min);
    let (lo, hi) = rate_bounds(big_l, inner.radius, parent.dim(), exps.kappa_prime);
    let rate_ok = lo <= big_m && big_m <= hi;

    let row = StepRow {
        sample: s,
        n_bad: flags.iter().filter(|f| **f).count(),
        max_disjoint_bad: disjoint.size,
        exact: disjoint.exact,
        event_bn: disjoint.size as u64 <= budget,
        n_clusters: subsets.len(),
        buffered_ok: subsets.iter().all(|u| u.is_valid()),
        outside_good,
        proper_buffers: subsets.iter().all(|u| u.upsilon.len() < parent.len()),
        event_sn,
        event_sn_full,
        localized,
        rate_ok,
        conclusion: localized && rate_ok,
        worst_margin,
    };
    Ok(SampleOutcome { row, subsets })
}

/// Runs the single-step induction experiment: from `(m, I)` at scale `ℓ`
/// to `(M, I_ℓ, I)` at scale `L = ℓ^γ`, on `Λ_L` centered at the origin.
#[allow(clippy::too_many_arguments)]
pub fn induction_step(
    ell: f64,
    i: &EnergyInterval,
    m: f64,
    exps: &ExponentSet,
    d: &DisorderSpec,
    n: u64,
    seed: u64,
    opts: &StepOptions,
) -> Result<StepReport> {
    if let Some(row) = validate(exps).first_failure() {
        return Err(Error::InfeasibleExponents {
            constraint: row.id.clone(),
        });
    }
    if !(ell > 1.0) {
        return Err(Error::invalid("ell", format!("must exceed 1, got {ell}")));
    }
    if !(m > 0.0) {
        return Err(Error::invalid("m", format!("must be positive, got {m}")));
    }
    if !(opts.c_d >= 0.0) {
        return Err(Error::invalid("c_d", "must be non-negative"));
    }
    let big_l = ell.powf(exps.gamma);
    let parent_box = BoxSpec::centered(opts.dim, big_l)?;
    let parent = parent_box.sites();
    check_size(&parent)?;
    let cover = suitable_cover(&parent_box, ell, exps.varsigma)?;
    let budget = exps.bad_box_budget(ell);
    let big_m = m * (1.0 - opts.c_d * ell.powf(-exps.varrho));
    let inner = i.shrink(ell, exps.kappa);
    let clusters = (budget <= 2).then(|| small_clusters(&cover, budget));

    let outcomes: Vec<SampleOutcome> = (0..n)
        .into_par_iter()
        .map(|s| {
            step_sample(
                s,
                &cover,
                &parent,
                i,
                &inner,
                m,
                big_m,
                exps,
                budget,
                clusters.as_deref(),
                d,
                seed,
            )
        })
        .collect::<Result<_>>()?;

    let mut violations = Vec::new();
    let mut built = 0u64;
    let mut n_viol = 0u64;
    for o in &outcomes {
        for u in &o.subsets {
            built += 1;
            n_viol += u.violations.len() as u64;
            if !u.is_valid() {
                violations.push((o.row.sample, u.violations.clone()));
            }
        }
    }
    let rows: Vec<StepRow> = outcomes.into_iter().map(|o| o.row).collect();
    let summary = summarize(&rows, built, n_viol);
    Ok(StepReport {
        ell,
        big_l,
        budget_n: budget,
        m,
        big_m,
        interval: *i,
        inner,
        cover_size: cover.len(),
        k_ell: cover.k_ell,
        rows,
        violations,
        summary,
    })
}

/// One scale of the recursion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionState {
    pub k: usize,
    pub l: f64,
    /// Radius `A_k` of `I_k = I(E, A_k)`.
    pub a: f64,
    pub m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionReport {
    pub states: Vec<RecursionState>,
    /// True when `L_k` overflowed before `k_max`.
    pub overflowed: bool,
    pub a_inf: f64,
    pub m_inf: f64,
    /// Factors multiplied before truncating the infinite products.
    pub terms: usize,
    /// Bound on `|log(truncated) - log(limit)|` for either product.
    pub tail_bound: f64,
    /// `L_0^{-γκ'}`.
    pub m_lower: f64,
    /// `½ log(1 + A_∞/4d)`.
    pub m_upper: f64,
    /// `L_0^{-γκ'} <= m_∞ < ½ log(1 + A_∞/4d)`.
    pub sandwich: bool,
}

impl RecursionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,L,A,m\n");
        for s in &self.states {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.k,
                crate::fmt_f64(s.l),
                crate::fmt_f64(s.a),
                crate::fmt_f64(s.m)
            ));
        }
        out
    }
}

const MAX_TERMS: usize = 100_000;

/// `log ∏_{k>=0} (1 - c·L_0^{-p γ^k})` truncated once the geometric tail
/// bound drops below `tol`; returns (log product, terms, tail bound).
fn log_product(l0: f64, p: f64, c: f64, gamma: f64, tol: f64) -> Result<(f64, usize, f64)> {
    if c == 0.0 {
        return Ok((0.0, 0, 0.0));
    }
    let ln_l0 = l0.ln();
    let mut sum = 0.0;
    for k in 0..MAX_TERMS {
        let base = (-p * gamma.powi(k as i32) * ln_l0).exp();
        let x = c * base;
        if !(x < 1.0) {
            return Err(Error::DivergentProduct { k, factor: 1.0 - x });
        }
        // Σ_{j>=k} -log(1 - x_j) <= x_k / ((1 - x_k)(1 - x_{k+1}/x_k))
        let ratio = base.powf(gamma - 1.0);
        let tail = x / ((1.0 - x) * (1.0 - ratio));
        if tail < tol {
            return Ok((sum, k, tail));
        }
        sum += (-x).ln_1p();
    }
    Err(Error::DivergentProduct {
        k: MAX_TERMS,
        factor: f64::NAN,
    })
}

/// Scale recursion `L_{k+1} = L_k^γ`, `A_{k+1} = A_k(1 - L_k^{-κ})`,
/// `m_{k+1} = m_k(1 - C_d L_k^{-ϱ})`, with the limits `A_∞`, `m_∞`.
#[allow(clippy::too_many_arguments)]
pub fn recursion(
    l0: f64,
    a0: f64,
    m0: f64,
    exps: &ExponentSet,
    c_d: f64,
    k_max: usize,
    tol: f64,
    dim: usize,
) -> Result<RecursionReport> {
    if !(a0 > 0.0) {
        return Err(Error::invalid("A0", format!("must be positive, got {a0}")));
    }
    if !(m0 > 0.0) {
        return Err(Error::invalid("m0", format!("must be positive, got {m0}")));
    }
    if !(c_d >= 0.0) {
        return Err(Error::invalid("Cd", format!("must be non-negative, got {c_d}")));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::invalid("tol", format!("must lie in (0, 1), got {tol}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be positive"));
    }
    if !(exps.kappa > 0.0 && exps.varrho > 0.0) {
        return Err(Error::InfeasibleExponents {
            constraint: "kappa > 0 and varrho > 0".into(),
        });
    }
    let seq = scale_sequence(l0, exps.gamma, k_max)?;
    let mut states = Vec::with_capacity(seq.scales.len());
    let (mut a, mut m) = (a0, m0);
    for (k, &l) in seq.scales.iter().enumerate() {
        states.push(RecursionState { k, l, a, m });
        let fa = 1.0 - l.powf(-exps.kappa);
        let fm = 1.0 - c_d * l.powf(-exps.varrho);
        if !(fa > 0.0) {
            return Err(Error::DivergentProduct { k, factor: fa });
        }
        if !(fm > 0.0) {
            return Err(Error::DivergentProduct { k, factor: fm });
        }
        a *= fa;
        m *= fm;
    }
    let (la, ta, tail_a) = log_product(l0, exps.kappa, 1.0, exps.gamma, tol)?;
    let (lm, tm, tail_m) = log_product(l0, exps.varrho, c_d, exps.gamma, tol)?;
    let a_inf = a0 * la.exp();
    let m_inf = if c_d == 0.0 { m0 } else { m0 * lm.exp() };
    let m_lower = l0.powf(-exps.gamma * exps.kappa_prime);
    let m_upper = 0.5 * (1.0 + a_inf / (4.0 * dim as f64)).ln();
    Ok(RecursionReport {
        states,
        overflowed: seq.overflowed,
        a_inf,
        m_inf,
        terms: ta.max(tm),
        tail_bound: tail_a.max(tail_m),
        m_lower,
        m_upper,
        sandwich: m_lower <= m_inf && m_inf < m_upper,
    })
}

/// Localization frequency at a side `L ∈ [L_k, L_{k+1})` with the targets of
/// scale `k`: `(m_k, I_k, I_{k-1})`, or `(m_0, I_0)` when `k = 0`. The
/// comparison value is `1 - e^{-L^ξ}` for `k >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn between_scales(
    side: f64,
    k: usize,
    report: &RecursionReport,
    energy: f64,
    exps: &ExponentSet,
    d: &DisorderSpec,
    dim: usize,
    n: u64,
    seed: u64,
) -> Result<McReport> {
    let states = &report.states;
    if k + 1 >= states.len() {
        return Err(Error::invalid(
            "k",
            format!("need scales {k} and {} in the recursion", k + 1),
        ));
    }
    let (lk, lk1) = (states[k].l, states[k + 1].l);
    if !(lk <= side && side < lk1) {
        return Err(Error::invalid("L", format!("{side} is outside [{lk}, {lk1})")));
    }
    let center = vec![0.0; dim];
    let ik = EnergyInterval::new(energy, states[k].a)?;
    if k == 0 {
        return p_localizing_mc(side, &center, &ik, states[0].m, exps, None, d, n, seed);
    }
    let outer = EnergyInterval::new(energy, states[k - 1].a)?;
    let mut rep = p_localizing_mc(side, &center, &outer, states[k].m, exps, Some(&ik), d, n, seed)?;
    rep.bound_p = 1.0 - (-side.powf(exps.xi)).exp();
    Ok(rep)
}
