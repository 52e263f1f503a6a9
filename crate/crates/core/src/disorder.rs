//! Single-site distributions, reproducible potential sampling, and the
//! finite-volume Anderson Hamiltonian `H_Θ = -Δ + V` restricted to a region.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{boundary, Region, Site};

/// Largest region handled with dense matrices.
pub const DENSE_CAP: usize = 4096;

/// Largest lattice dimension supported by the site-keyed sampler.
pub const MAX_SAMPLER_DIM: usize = 4;

/// Single-site probability distributions as they appear in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// Uniform on `[a, b]`.
    Uniform { a: f64, b: f64 },
    /// CDF `(t/scale)^alpha` on `[0, scale]`.
    PowerAlpha { alpha: f64, scale: f64 },
    /// Piecewise-linear CDF through `(x, F(x))` points, `F` running from 0 to 1.
    TableCdf { points: Vec<(f64, f64)> },
    /// Two-point distribution; accepted by the parser, rejected on validation.
    Bernoulli { p: f64 },
    /// Finitely many atoms `(value, mass)`; rejected on validation.
    Discrete { atoms: Vec<(f64, f64)> },
}

/// A validated Hölder-continuous single-site distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Family", into = "Family")]
pub struct DisorderSpec {
    family: Family,
    alpha: f64,
    holder_k: f64,
    support: (f64, f64),
}

impl TryFrom<Family> for DisorderSpec {
    type Error = Error;
    fn try_from(f: Family) -> Result<Self> {
        DisorderSpec::new(f)
    }
}

impl From<DisorderSpec> for Family {
    fn from(d: DisorderSpec) -> Family {
        d.family
    }
}

impl DisorderSpec {
    pub fn new(family: Family) -> Result<Self> {
        let (alpha, holder_k, support) = match &family {
            Family::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(Error::invalid(
                        "disorder",
                        format!("uniform needs a < b, got [{a}, {b}]"),
                    ));
                }
                (1.0, 1.0 / (b - a), (*a, *b))
            }
            Family::PowerAlpha { alpha, scale } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::invalid(
                        "disorder.alpha",
                        format!("must lie in (0, 1], got {alpha}"),
                    ));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(Error::invalid(
                        "disorder.scale",
                        format!("must be positive, got {scale}"),
                    ));
                }
                (*alpha, scale.powf(-alpha), (0.0, *scale))
            }
            Family::TableCdf { points } => {
                let k = validate_table(points)?;
                (1.0, k, (points[0].0, points[points.len() - 1].0))
            }
            Family::Bernoulli { .. } | Family::Discrete { .. } => {
                return Err(Error::NotHolder("atoms give S(t) >= mass > 0 as t -> 0".into()))
            }
        };
        Ok(DisorderSpec {
            family,
            alpha,
            holder_k,
            support,
        })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        DisorderSpec::new(Family::Uniform { a, b })
    }

    /// Uniform on `[-w/2, w/2]`.
    pub fn centered_uniform(w: f64) -> Result<Self> {
        DisorderSpec::uniform(-w / 2.0, w / 2.0)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Hölder order `α`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Hölder constant `K` with `S_μ(t) <= K t^α` on `[0, 1]`.
    pub fn holder_k(&self) -> f64 {
        self.holder_k
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// `K̃`: `2K` when `α = 1`, otherwise `8·2^α·K`.
    pub fn wegner_constant(&self) -> f64 {
        if self.alpha == 1.0 {
            2.0 * self.holder_k
        } else {
            8.0 * 2f64.powf(self.alpha) * self.holder_k
        }
    }

    /// Exact concentration function `S_μ(t) = sup_a μ[a, a+t]`.
    pub fn concentration(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match &self.family {
            Family::Uniform { a, b } => (t / (b - a)).min(1.0),
            Family::PowerAlpha { alpha, scale } => (t / scale).min(1.0).powf(*alpha),
            Family::TableCdf { points } => {
                // the sup of a piecewise-linear CDF increment is attained with
                // one window end at a breakpoint
                let cdf = |x: f64| table_cdf(points, x);
                points
                    .iter()
                    .flat_map(|&(x, _)| [cdf(x + t) - cdf(x), cdf(x) - cdf(x - t)])
                    .fold(0.0, f64::max)
            }
            Family::Bernoulli { .. } | Family::Discrete { .. } => unreachable!(),
        }
    }

    /// Inverse CDF applied to `u ∈ [0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match &self.family {
            Family::Uniform { a, b } => a + (b - a) * u,
            Family::PowerAlpha { alpha, scale } => scale * u.powf(1.0 / alpha),
            Family::TableCdf { points } => {
                let i = points.windows(2).position(|w| u < w[1].1).unwrap_or(points.len() - 2);
                let (x0, f0) = points[i];
                let (x1, f1) = points[i + 1];
                if f1 > f0 {
                    x0 + (x1 - x0) * (u - f0) / (f1 - f0)
                } else {
                    x0
                }
            }
            Family::Bernoulli { .. } | Family::Discrete { .. } => unreachable!(),
        }
    }
}

/// Checks a piecewise-linear CDF table and returns its largest density.
fn validate_table(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("disorder.points", "need at least two points"));
    }
    if points[0].1 != 0.0 || points[points.len() - 1].1 != 1.0 {
        return Err(Error::invalid("disorder.points", "CDF must run from 0 to 1"));
    }
    let mut density: f64 = 0.0;
    for w in points.windows(2) {
        let ((x0, f0), (x1, f1)) = (w[0], w[1]);
        if !(x0.is_finite() && x1.is_finite()) {
            return Err(Error::invalid("disorder.points", "abscissae must be finite"));
        }
        if f1 < f0 {
            return Err(Error::invalid("disorder.points", "CDF must be non-decreasing"));
        }
        if x1 <= x0 {
            if f1 > f0 {
                return Err(Error::NotHolder(format!("CDF jumps by {} at {x0}", f1 - f0)));
            }
            return Err(Error::invalid("disorder.points", "abscissae must increase"));
        }
        density = density.max((f1 - f0) / (x1 - x0));
    }
    Ok(density)
}

fn table_cdf(points: &[(f64, f64)], x: f64) -> f64 {
    if x <= points[0].0 {
        return 0.0;
    }
    for w in points.windows(2) {
        let ((x0, f0), (x1, f1)) = (w[0], w[1]);
        if x <= x1 {
            return f0 + (f1 - f0) * (x - x0) / (x1 - x0);
        }
    }
    1.0
}

/// Largest fraction of `samples` in any window `[a, a+t]`.
pub fn empirical_concentration(samples: &[f64], t: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mut best = 0usize;
    let mut j = 0usize;
    for i in 0..s.len() {
        if j < i {
            j = i;
        }
        while j + 1 < s.len() && s[j + 1] <= s[i] + t {
            j += 1;
        }
        best = best.max(j + 1 - i);
    }
    best as f64 / s.len() as f64
}

/// A uniform variate in `[0, 1)` determined by `(seed, index, site)` alone.
///
/// The ChaCha8 key carries `seed` and `index`; the site's coordinates select
/// the stream and the block position, so no two sites of `Z^d` (`d <= 4`,
/// coordinates within `i32`) share a draw.
pub fn site_uniform(seed: u64, index: u64, site: &[i64]) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    let c = |i: usize| site.get(i).map_or(0u64, |&v| v as i32 as u32 as u64);
    rng.set_stream((c(0) << 32) | c(1));
    let block = (c(2) << 32) | c(3);
    rng.set_word_pos(block as u128 * 16);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A potential `V_ω` on a region; `values[i]` belongs to `region.sites()[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSample {
    pub region: Region,
    pub values: Vec<f64>,
    pub seed: u64,
    pub sample_index: u64,
}

impl PotentialSample {
    /// CSV with one row per site: coordinates `x1..xd`, then the value.
    pub fn to_csv(&self) -> String {
        let d = self.region.dim();
        let mut out = (1..=d).map(|i| format!("x{i},")).collect::<String>();
        out.push_str("value\n");
        for (s, v) in self.region.iter().zip(&self.values) {
            for c in s {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&crate::fmt_f64(*v));
            out.push('\n');
        }
        out
    }
}

fn check_sampler_dim(dim: usize) -> Result<()> {
    if dim > MAX_SAMPLER_DIM {
        return Err(Error::invalid(
            "dim",
            format!("sampler supports d <= {MAX_SAMPLER_DIM}, got {dim}"),
        ));
    }
    Ok(())
}

/// i.i.d. draws of `ω_x` for every site of `r`, by inverse CDF.
pub fn sample_potential(r: &Region, d: &DisorderSpec, seed: u64, index: u64) -> Result<PotentialSample> {
    check_sampler_dim(r.dim())?;
    let values = r.iter().map(|s| d.quantile(site_uniform(seed, index, s))).collect();
    Ok(PotentialSample {
        region: r.clone(),
        values,
        seed,
        sample_index: index,
    })
}

/// Dense `H_Θ` together with the region fixing its basis order.
#[derive(Clone, Debug, PartialEq)]
pub struct Hamiltonian {
    region: Region,
    matrix: DMatrix<f64>,
}

impl Hamiltonian {
    /// `-1` between nearest neighbours, `V(x)` on the diagonal.
    pub fn from_potential(region: &Region, values: &[f64]) -> Result<Self> {
        let n = region.len();
        if values.len() != n {
            return Err(Error::invalid(
                "potential",
                format!("{} values for {} sites", values.len(), n),
            ));
        }
        if n > DENSE_CAP {
            return Err(Error::SizeCap {
                sites: n,
                cap: DENSE_CAP,
            });
        }
        let mut m = DMatrix::zeros(n, n);
        for (i, s) in region.iter().enumerate() {
            m[(i, i)] = values[i];
            for nb in Region::neighbours(s) {
                if let Some(j) = region.index_of(&nb) {
                    m[(i, j)] = -1.0;
                }
            }
        }
        Ok(Hamiltonian {
            region: region.clone(),
            matrix: m,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.region.len()
    }

    /// `H_Φ` for `Φ ⊆ Θ`: the principal submatrix on `sub`.
    pub fn restrict(&self, sub: &Region) -> Result<Hamiltonian> {
        let idx = indices_in(sub, &self.region)?;
        let n = idx.len();
        let m = DMatrix::from_fn(n, n, |i, j| self.matrix[(idx[i], idx[j])]);
        Ok(Hamiltonian {
            region: sub.clone(),
            matrix: m,
        })
    }

    /// Gershgorin bound `max_i Σ_j |H_ij| <= 2d + max|V|`.
    pub fn norm_bound(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Positions of the sites of `sub` within `sup`.
pub(crate) fn indices_in(sub: &Region, sup: &Region) -> Result<Vec<usize>> {
    sub.iter()
        .map(|s| {
            sup.index_of(s)
                .ok_or_else(|| Error::NotSubset(format!("site {s:?} is outside")))
        })
        .collect()
}

pub fn hamiltonian(r: &Region, v: &PotentialSample) -> Result<Hamiltonian> {
    if &v.region != r {
        return Err(Error::invalid(
            "potential",
            "sample region differs from the requested region",
        ));
    }
    Hamiltonian::from_potential(r, &v.values)
}

/// Max-abs entrywise difference between `H_Θ` and
/// `H_Φ ⊕ H_{Θ∖Φ} + Γ_{∂Φ}`, each assembled independently from the potential.
pub fn decompose_check(theta: &Region, phi: &Region, v: &PotentialSample) -> Result<f64> {
    let full = hamiltonian(theta, v)?;
    let values_on =
        |sub: &Region| -> Result<Vec<f64>> { Ok(indices_in(sub, theta)?.into_iter().map(|i| v.values[i]).collect()) };
    let rest = theta.difference(phi);
    let h_phi = Hamiltonian::from_potential(phi, &values_on(phi)?)?;
    let h_rest = Hamiltonian::from_potential(&rest, &values_on(&rest)?)?;

    let n = theta.len();
    let mut assembled = DMatrix::<f64>::zeros(n, n);
    for (part, h) in [(phi, &h_phi), (&rest, &h_rest)] {
        let idx = indices_in(part, theta)?;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                assembled[(i, j)] += h.matrix[(a, b)];
            }
        }
    }
    for (u, w) in boundary(phi, theta)?.edge_pairs {
        let (i, j) = (pos(theta, &u), pos(theta, &w));
        assembled[(i, j)] += -1.0;
        assembled[(j, i)] += -1.0;
    }
    Ok((full.matrix - assembled).amax())
}

fn pos(r: &Region, s: &Site) -> usize {
    r.index_of(s).expect("boundary site lies in theta")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::BoxSpec;

    fn r1(v: &[i64]) -> Region {
        Region::new(1, v.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    #[test]
    fn holder_data() {
        let u = DisorderSpec::uniform(0.0, 1.0).unwrap();
        assert_eq!((u.alpha(), u.holder_k()), (1.0, 1.0));
        assert_eq!(u.wegner_constant(), 2.0);
        let p = DisorderSpec::new(Family::PowerAlpha { alpha: 0.5, scale: 1.0 }).unwrap();
        assert!((p.wegner_constant() - 8.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((p.concentration(0.25) - 0.5).abs() < 1e-15);
        let w = DisorderSpec::centered_uniform(20.0).unwrap();
        assert!((w.holder_k() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn discrete_families_rejected() {
        assert!(matches!(
            DisorderSpec::new(Family::Bernoulli { p: 0.5 }),
            Err(Error::NotHolder(_))
        ));
        assert!(matches!(
            DisorderSpec::new(Family::Discrete {
                atoms: vec![(0.0, 0.5), (1.0, 0.5)]
            }),
            Err(Error::NotHolder(_))
        ));
        let jump = Family::TableCdf {
            points: vec![(0.0, 0.0), (0.0, 0.5), (1.0, 1.0)],
        };
        assert!(matches!(DisorderSpec::new(jump), Err(Error::NotHolder(_))));
        let json = r#"{"family":"bernoulli","p":0.3}"#;
        assert!(serde_json::from_str::<DisorderSpec>(json).is_err());
    }

    #[test]
    fn json_config_shape() {
        let d: DisorderSpec = serde_json::from_str(r#"{"family":"uniform","a":0,"b":1}"#).unwrap();
        assert_eq!(d, DisorderSpec::uniform(0.0, 1.0).unwrap());
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"family":"uniform","a":0.0,"b":1.0}"#);
    }

    #[test]
    fn table_cdf_quantile_and_concentration() {
        let pts = vec![(0.0, 0.0), (1.0, 0.75), (3.0, 1.0)];
        let d = DisorderSpec::new(Family::TableCdf { points: pts }).unwrap();
        assert_eq!(d.holder_k(), 0.75);
        assert!((d.quantile(0.375) - 0.5).abs() < 1e-15);
        assert!((d.quantile(0.875) - 2.0).abs() < 1e-15);
        assert!((d.concentration(1.0) - 0.75).abs() < 1e-15);
        assert!(d.concentration(0.5) <= d.holder_k() * 0.5 + 1e-15);
    }

    #[test]
    fn sampling_is_keyed_by_site() {
        let d = DisorderSpec::uniform(0.0, 1.0).unwrap();
        let big = BoxSpec::centered(2, 8.0).unwrap().sites();
        let small = BoxSpec::new(vec![1.0, -1.0], 3.0).unwrap().sites();
        let a = sample_potential(&big, &d, 7, 3).unwrap();
        let b = sample_potential(&small, &d, 7, 3).unwrap();
        for (s, v) in small.iter().zip(&b.values) {
            assert_eq!(a.values[big.index_of(s).unwrap()], *v);
        }
        assert_eq!(a, sample_potential(&big, &d, 7, 3).unwrap());
        assert_ne!(a.values, sample_potential(&big, &d, 7, 4).unwrap().values);
        assert_ne!(a.values, sample_potential(&big, &d, 8, 3).unwrap().values);
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let five = Region::new(5, vec![vec![0; 5]]).unwrap();
        assert!(sample_potential(&five, &d, 0, 0).is_err());
    }

    #[test]
    fn hamiltonian_examples() {
        let one = r1(&[0]);
        let h = Hamiltonian::from_potential(&one, &[2.5]).unwrap();
        assert_eq!(h.matrix()[(0, 0)], 2.5);

        let two = BoxSpec::new(vec![0.5], 2.0).unwrap().sites();
        let h = Hamiltonian::from_potential(&two, &[0.0, 0.0]).unwrap();
        assert_eq!(h.matrix().as_slice(), &[0.0, -1.0, -1.0, 0.0]);
        let eig = h.matrix().clone().symmetric_eigenvalues();
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] + 1.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);

        let v = PotentialSample {
            region: r1(&[0, 1]),
            values: vec![0.0; 2],
            seed: 0,
            sample_index: 0,
        };
        assert!(hamiltonian(&r1(&[0, 2]), &v).is_err());
        assert!(Hamiltonian::from_potential(&one, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hamiltonian_is_exactly_symmetric_and_bounded() {
        let d = DisorderSpec::centered_uniform(6.0).unwrap();
        let r = BoxSpec::centered(2, 6.0).unwrap().sites();
        let v = sample_potential(&r, &d, 11, 0).unwrap();
        let h = hamiltonian(&r, &v).unwrap();
        let m = h.matrix();
        assert_eq!(m, &m.transpose());
        let vmax = v.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(h.norm_bound() <= 4.0 + vmax + 1e-15);
    }

    #[test]
    fn decomposition_is_exact() {
        let d = DisorderSpec::uniform(0.0, 1.0).unwrap();
        let theta = r1(&[-1, 0, 1]);
        let v = sample_potential(&theta, &d, 1, 0).unwrap();
        assert_eq!(decompose_check(&theta, &r1(&[0]), &v).unwrap(), 0.0);
        assert_eq!(decompose_check(&theta, &theta, &v).unwrap(), 0.0);
        let theta = BoxSpec::centered(2, 8.0).unwrap().sites();
        let v = sample_potential(&theta, &d, 2, 0).unwrap();
        let phi = BoxSpec::new(vec![1.5, -0.5], 4.0).unwrap().sites();
        assert_eq!(decompose_check(&theta, &phi, &v).unwrap(), 0.0);
    }

    #[test]
    fn restriction_matches_direct_assembly() {
        let d = DisorderSpec::uniform(-1.0, 1.0).unwrap();
        let theta = BoxSpec::centered(2, 6.0).unwrap().sites();
        let sub = BoxSpec::new(vec![1.0, 0.0], 3.0).unwrap().sites();
        let h = hamiltonian(&theta, &sample_potential(&theta, &d, 5, 1).unwrap()).unwrap();
        let direct = hamiltonian(&sub, &sample_potential(&sub, &d, 5, 1).unwrap()).unwrap();
        assert_eq!(h.restrict(&sub).unwrap(), direct);
    }

    #[test]
    fn empirical_concentration_uniform() {
        let d = DisorderSpec::uniform(0.0, 1.0).unwrap();
        let r = BoxSpec::centered(1, 100_000.0).unwrap().sites();
        let v = sample_potential(&r, &d, 3, 0).unwrap();
        let s = empirical_concentration(&v.values, 0.1);
        let n = v.values.len() as f64;
        // sup over windows adds a small positive bias; 3σ plus a scan allowance
        assert!((s - 0.1).abs() < 3.0 * (0.09 / n).sqrt() + 0.005, "{s}");
        assert!(s <= d.holder_k() * 0.1 + 0.005);
    }
}
