//! Geometry of finite subsets of the lattice `Z^d`.
//!
//! Boxes are closed sup-norm balls `{y : ||y - x||_inf <= L/2}` with real
//! center and real side. All distances are sup-norm distances; lattice
//! adjacency is Euclidean distance one (nearest neighbours).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lattice point.
pub type Site = Vec<i64>;

/// Relative tolerance used when comparing real box bounds to integers.
pub const GEOM_TOL: f64 = 1e-12;

pub fn sup_dist(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)
}

pub fn sup_dist_real(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tol(x: f64) -> f64 {
    GEOM_TOL * x.abs().max(1.0)
}

/// The box `Λ_L(x)`: all lattice points within sup-distance `L/2` of `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub side: f64,
}

impl BoxSpec {
    pub fn new(center: Vec<f64>, side: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::invalid("center", "dimension must be positive"));
        }
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::invalid("side", format!("must be positive, got {side}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("center", "coordinates must be finite"));
        }
        Ok(BoxSpec { center, side })
    }

    /// Box of side `side` centered at the origin of `Z^dim`.
    pub fn centered(dim: usize, side: f64) -> Result<Self> {
        BoxSpec::new(vec![0.0; dim], side)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Membership in the real box `Λ^R_L(x)`.
    pub fn contains_real(&self, y: &[f64]) -> bool {
        let h = self.side / 2.0;
        self.center.iter().zip(y).all(|(c, v)| (v - c).abs() <= h + tol(h))
    }

    /// Integer range `[lo, hi]` of the box along axis `i` (possibly empty).
    fn axis_range(&self, i: usize) -> (i64, i64) {
        let h = self.side / 2.0;
        let lo = self.center[i] - h;
        let hi = self.center[i] + h;
        ((lo - tol(lo)).ceil() as i64, (hi + tol(hi)).floor() as i64)
    }

    pub fn sites(&self) -> Region {
        box_sites(self)
    }
}

/// Enumerate `Λ_L(x)` in lexicographic order.
pub fn box_sites(b: &BoxSpec) -> Region {
    let ranges: Vec<(i64, i64)> = (0..b.dim()).map(|i| b.axis_range(i)).collect();
    Region::from_sorted_unchecked(b.dim(), product_ranges(&ranges))
}

/// Cartesian product of inclusive integer ranges, lexicographically ordered.
pub(crate) fn product_ranges(ranges: &[(i64, i64)]) -> Vec<Site> {
    if ranges.iter().any(|(lo, hi)| lo > hi) {
        return Vec::new();
    }
    let mut out: Vec<Site> = vec![Vec::with_capacity(ranges.len())];
    for &(lo, hi) in ranges {
        let mut next = Vec::with_capacity(out.len() * (hi - lo + 1) as usize);
        for prefix in &out {
            for v in lo..=hi {
                let mut s = prefix.clone();
                s.push(v);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

/// A finite subset of `Z^d` with distinct sites in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Region {
    dim: usize,
    sites: Vec<Site>,
}

#[derive(Deserialize)]
struct RegionRepr {
    dim: usize,
    sites: Vec<Site>,
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RegionRepr::deserialize(d)?;
        Region::new(raw.dim, raw.sites).map_err(serde::de::Error::custom)
    }
}

impl Region {
    pub fn new(dim: usize, mut sites: Vec<Site>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "dimension must be positive"));
        }
        if let Some(bad) = sites.iter().find(|s| s.len() != dim) {
            return Err(Error::invalid(
                "sites",
                format!("site {bad:?} does not have dimension {dim}"),
            ));
        }
        sites.sort();
        sites.dedup();
        Ok(Region { dim, sites })
    }

    pub(crate) fn from_sorted_unchecked(dim: usize, sites: Vec<Site>) -> Self {
        debug_assert!(sites.windows(2).all(|w| w[0] < w[1]));
        Region { dim, sites }
    }

    pub fn empty(dim: usize) -> Self {
        Region { dim, sites: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Site> {
        self.sites.iter()
    }

    pub fn index_of(&self, y: &[i64]) -> Option<usize> {
        self.sites.binary_search_by(|s| s.as_slice().cmp(y)).ok()
    }

    pub fn contains(&self, y: &[i64]) -> bool {
        self.index_of(y).is_some()
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.dim == other.dim && self.sites.iter().all(|s| other.contains(s))
    }

    pub fn is_disjoint(&self, other: &Region) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.sites.len() && j < other.sites.len() {
            match self.sites[i].cmp(&other.sites[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    pub fn difference(&self, other: &Region) -> Region {
        let sites = self.sites.iter().filter(|s| !other.contains(s)).cloned().collect();
        Region::from_sorted_unchecked(self.dim, sites)
    }

    pub fn union(&self, other: &Region) -> Region {
        let mut sites = self.sites.clone();
        sites.extend(other.sites.iter().cloned());
        sites.sort();
        sites.dedup();
        Region::from_sorted_unchecked(self.dim, sites)
    }

    pub fn intersection(&self, other: &Region) -> Region {
        let sites = self.sites.iter().filter(|s| other.contains(s)).cloned().collect();
        Region::from_sorted_unchecked(self.dim, sites)
    }

    /// Sup-norm distance from `y` to the region; `+inf` for the empty region.
    pub fn dist_to(&self, y: &[i64]) -> f64 {
        self.sites
            .iter()
            .map(|s| sup_dist(s, y))
            .min()
            .map_or(f64::INFINITY, |d| d as f64)
    }

    /// Sup-norm diameter; zero for regions with fewer than two sites.
    pub fn diameter(&self) -> i64 {
        (0..self.dim)
            .map(|i| {
                let lo = self.sites.iter().map(|s| s[i]).min().unwrap_or(0);
                let hi = self.sites.iter().map(|s| s[i]).max().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0)
    }

    /// Nearest neighbours of `y` in `Z^d`, ordered `-e_1, +e_1, -e_2, ...`.
    pub fn neighbours(y: &[i64]) -> impl Iterator<Item = Site> + '_ {
        (0..y.len()).flat_map(move |i| {
            [-1i64, 1].into_iter().map(move |s| {
                let mut v = y.to_vec();
                v[i] += s;
                v
            })
        })
    }

    /// Connectivity under nearest-neighbour adjacency. The empty region counts
    /// as connected.
    pub fn is_connected(&self) -> bool {
        if self.sites.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.sites.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for nb in Region::neighbours(&self.sites[i]) {
                if let Some(j) = self.index_of(&nb) {
                    if !seen[j] {
                        seen[j] = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
        }
        count == self.sites.len()
    }
}

fn check_subset(phi: &Region, theta: &Region) -> Result<()> {
    if phi.dim != theta.dim {
        return Err(Error::NotSubset(format!("dimension {} vs {}", phi.dim, theta.dim)));
    }
    if let Some(s) = phi.sites.iter().find(|s| !theta.contains(s)) {
        return Err(Error::NotSubset(format!("site {s:?} is outside")));
    }
    Ok(())
}

/// Edge boundary of `phi` relative to `theta` together with its two vertex
/// boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    /// Pairs `(u, v)` with `u` in `phi`, `v` in `theta \ phi`, `|u - v| = 1`.
    pub edge_pairs: Vec<(Site, Site)>,
    pub exterior: Region,
    pub interior: Region,
}

pub fn boundary(phi: &Region, theta: &Region) -> Result<BoundaryData> {
    check_subset(phi, theta)?;
    let mut edge_pairs = Vec::new();
    for u in phi.iter() {
        for v in Region::neighbours(u) {
            if theta.contains(&v) && !phi.contains(&v) {
                edge_pairs.push((u.clone(), v));
            }
        }
    }
    edge_pairs.sort();
    let exterior = Region::new(phi.dim, edge_pairs.iter().map(|(_, v)| v.clone()).collect())?;
    let interior = Region::new(phi.dim, edge_pairs.iter().map(|(u, _)| u.clone()).collect())?;
    Ok(BoundaryData {
        edge_pairs,
        exterior,
        interior,
    })
}

/// `Φ^{Θ,t}`: sites of `phi` at sup-distance greater than `⌊t⌋` from `theta \ phi`.
pub fn interior(phi: &Region, theta: &Region, t: f64) -> Result<Region> {
    check_subset(phi, theta)?;
    if !(t >= 1.0) {
        return Err(Error::invalid("t", format!("must be at least 1, got {t}")));
    }
    let outside = theta.difference(phi);
    if outside.is_empty() {
        return Ok(phi.clone());
    }
    // an infinite t leaves nothing, since the complement is at finite distance
    let ft = if t.is_finite() { t.floor() as i64 } else { i64::MAX };
    let dim = phi.dim;
    let cube_cost = (2.0 * ft as f64 + 1.0).powi(dim as i32);
    let sites = phi
        .iter()
        .filter(|y| {
            if cube_cost < outside.len() as f64 {
                !cube_hits(y, ft, &outside)
            } else {
                outside.iter().all(|z| sup_dist(y, z) > ft)
            }
        })
        .cloned()
        .collect();
    Ok(Region::from_sorted_unchecked(dim, sites))
}

/// Whether some site of `set` lies within sup-distance `r` of `y`.
fn cube_hits(y: &[i64], r: i64, set: &Region) -> bool {
    let ranges: Vec<(i64, i64)> = y.iter().map(|&c| (c - r, c + r)).collect();
    product_ranges(&ranges).iter().any(|z| set.contains(z))
}

/// `∂_in^{Θ,t} Φ = Φ \ Φ^{Θ,t}`.
pub fn interior_boundary(phi: &Region, theta: &Region, t: f64) -> Result<Region> {
    Ok(phi.difference(&interior(phi, theta, t)?))
}

/// `R_Θ(y)`: sup-distance from `y` to the interior boundary of `phi` in
/// `theta`; `+inf` when that boundary is empty.
pub fn depth(y: &[i64], phi: &Region, theta: &Region) -> Result<f64> {
    if !phi.contains(y) {
        return Err(Error::invalid("y", format!("site {y:?} is not in phi")));
    }
    let b = boundary(phi, theta)?;
    Ok(b.interior.dist_to(y))
}

/// A suitable `ℓ`-cover of a box: child boxes of side `ℓ` centered on the
/// lattice `x0 + ρ ℓ^ς Z^d` restricted to `Λ^R_{L-ℓ}(x0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cover {
    pub parent: BoxSpec,
    pub child_side: f64,
    pub varsigma: f64,
    pub rho: f64,
    /// The integer `k` with `ρ = (L - ℓ) / (2 ℓ^ς k)`.
    pub rho_k: u64,
    /// Lattice spacing `ρ ℓ^ς`.
    pub spacing: f64,
    pub centers: Vec<Vec<f64>>,
    /// Integer coordinates `j` of each center, `center = x0 + spacing * j`.
    pub lattice_index: Vec<Vec<i64>>,
    /// Disjointness threshold in units of the spacing.
    pub k_ell: i64,
}

pub fn suitable_cover(parent: &BoxSpec, ell: f64, varsigma: f64) -> Result<Cover> {
    let big = parent.side;
    if !(ell > 0.0 && ell < big) {
        return Err(Error::invalid(
            "ell",
            format!("child side must lie in (0, {big}), got {ell}"),
        ));
    }
    if !(varsigma > 0.0 && varsigma < 1.0) {
        return Err(Error::invalid(
            "varsigma",
            format!("must lie in (0, 1), got {varsigma}"),
        ));
    }
    let ell_s = ell.powf(varsigma);
    let q = (big - ell) / (2.0 * ell_s);
    let k = if q <= 1.0 + tol(q) {
        1
    } else {
        (q - tol(q)).ceil() as u64
    };
    let rho = q / k as f64;
    if rho < 0.5 - tol(0.5) {
        let examined = (1..=k + 1).map(|j| (j, q / j as f64)).collect();
        return Err(Error::CoverInfeasible { examined });
    }
    let rho = rho.min(1.0);
    let spacing = rho * ell_s;
    let span = k as i64;
    let dim = parent.dim();
    let lattice_index = product_ranges(&vec![(-span, span); dim]);
    let centers = lattice_index
        .iter()
        .map(|j| {
            parent
                .center
                .iter()
                .zip(j)
                .map(|(x, &ji)| x + spacing * ji as f64)
                .collect()
        })
        .collect();
    let ratio = ell / spacing;
    let k_ell = (ratio + tol(ratio)).floor() as i64 + 1;
    Ok(Cover {
        parent: parent.clone(),
        child_side: ell,
        varsigma,
        rho,
        rho_k: k,
        spacing,
        centers,
        lattice_index,
        k_ell,
    })
}

impl Cover {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn child_box(&self, i: usize) -> BoxSpec {
        BoxSpec {
            center: self.centers[i].clone(),
            side: self.child_side,
        }
    }

    /// Closed-form center count `((L - ℓ)/(ρ ℓ^ς) + 1)^d`.
    pub fn expected_count(&self) -> f64 {
        ((self.parent.side - self.child_side) / self.spacing + 1.0).powi(self.parent.dim() as i32)
    }

    /// Center distance in units of the spacing.
    pub fn index_dist(&self, a: usize, b: usize) -> i64 {
        sup_dist(&self.lattice_index[a], &self.lattice_index[b])
    }

    /// Disjointness threshold `k_ℓ ρ ℓ^ς` as a length.
    pub fn disjoint_threshold(&self) -> f64 {
        self.k_ell as f64 * self.spacing
    }

    /// Whether the child boxes were placed in the regime `ℓ <= L/2` where the
    /// cover lemma applies.
    pub fn in_lemma_regime(&self) -> bool {
        self.child_side <= self.parent.side / 2.0
    }
}

/// Whether the real child boxes at centers `a` and `b` are disjoint, i.e.
/// `||a - b|| >= k_ℓ ρ ℓ^ς`.
pub fn cover_disjoint(cover: &Cover, a: usize, b: usize) -> bool {
    cover.index_dist(a, b) >= cover.k_ell
}
