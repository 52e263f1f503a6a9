//! Dense eigensolves of finite-volume Hamiltonians and spectral distances.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::disorder::Hamiltonian;
use crate::error::{Error, Result};
use crate::lattice::Region;

/// Residual and orthonormality tolerance; residuals are measured relative
/// to `1 + ‖H‖`.
pub const EIG_TOL: f64 = 1e-10;

/// An energy interval `I = (E - A, E + A)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyInterval {
    pub center: f64,
    pub radius: f64,
}

impl EnergyInterval {
    pub fn new(center: f64, radius: f64) -> Result<Self> {
        if !center.is_finite() {
            return Err(Error::invalid("interval.center", "must be finite"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(
                "interval.radius",
                format!("must be positive, got {radius}"),
            ));
        }
        Ok(EnergyInterval { center, radius })
    }

    pub fn contains(&self, t: f64) -> bool {
        (t - self.center).abs() < self.radius
    }

    /// `h_I(t) = 1 - ((t - E)/A)^2` on `I`, zero outside.
    pub fn h(&self, t: f64) -> f64 {
        let s = (t - self.center) / self.radius;
        if s.abs() < 1.0 {
            1.0 - s * s
        } else {
            0.0
        }
    }

    /// `I_L`: same center, radius `A(1 - L^{-κ})`.
    pub fn shrink(&self, l: f64, kappa: f64) -> EnergyInterval {
        EnergyInterval {
            center: self.center,
            radius: self.radius * (1.0 - l.powf(-kappa)),
        }
    }

    /// `I^L`: same center, radius `A(1 - L^{-κ})^{-1}`.
    pub fn expand(&self, l: f64, kappa: f64) -> EnergyInterval {
        EnergyInterval {
            center: self.center,
            radius: self.radius / (1.0 - l.powf(-kappa)),
        }
    }
}

/// Orthonormal eigenpairs of `H_Θ`, eigenvalues ascending.
///
/// `vectors` has one row per site of `region` and one column per eigenpair.
/// Each column is signed so that its first entry of magnitude above `1e-10`
/// is positive.
#[derive(Clone, Debug)]
pub struct Eigensystem {
    pub region: Region,
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigensystem {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Column `k` as a slice of site amplitudes.
    pub fn vector(&self, k: usize) -> &[f64] {
        let n = self.region.len();
        &self.vectors.as_slice()[k * n..(k + 1) * n]
    }

    /// Indices of eigenvalues in the open interval `I`.
    pub fn indices_in(&self, i: &EnergyInterval) -> Vec<usize> {
        sigma_in(&self.values, i)
    }

    /// `index,value` CSV.
    pub fn values_csv(&self) -> String {
        let mut out = String::from("index,value\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{k},{}\n", crate::fmt_f64(*v)));
        }
        out
    }

    /// Little-endian `f64`, row-major: rows are sites, columns eigenpairs.
    pub fn vectors_le_bytes(&self) -> Vec<u8> {
        let (n, m) = self.vectors.shape();
        let mut out = Vec::with_capacity(8 * n * m);
        for r in 0..n {
            for c in 0..m {
                out.extend_from_slice(&self.vectors[(r, c)].to_le_bytes());
            }
        }
        out
    }
}

/// Full eigendecomposition, verified against `EIG_TOL`.
pub fn eigensystem(h: &Hamiltonian) -> Result<Eigensystem> {
    let n = h.dim();
    if n == 0 {
        return Ok(Eigensystem {
            region: h.region().clone(),
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::new(h.matrix().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        let sign = match col.iter().find(|x| x.abs() > 1e-10) {
            Some(x) if *x < 0.0 => -1.0,
            _ => 1.0,
        };
        vectors.set_column(c, &(col * sign));
    }

    let scale = 1.0 + h.norm_bound();
    let mut r = h.matrix() * &vectors;
    for (c, v) in values.iter().enumerate() {
        r.column_mut(c).axpy(-v, &vectors.column(c), 1.0);
    }
    let resid = r.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let ortho = (vectors.transpose() * &vectors - DMatrix::identity(n, n)).amax();
    let worst = (resid / scale).max(ortho);
    if worst > EIG_TOL {
        return Err(Error::Convergence { residual: worst });
    }
    Ok(Eigensystem {
        region: h.region().clone(),
        values,
        vectors,
    })
}

/// Eigenvalues only, ascending.
pub fn eigenvalues(h: &Hamiltonian) -> Vec<f64> {
    let mut v: Vec<f64> = h.matrix().clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// `dist(E, σ)`, `+∞` for an empty spectrum.
pub fn spectral_dist(values: &[f64], e: f64) -> f64 {
    values.iter().map(|v| (v - e).abs()).fold(f64::INFINITY, f64::min)
}

/// `dist(σ_A, σ_B)` for ascending spectra, `+∞` if either is empty.
pub fn spectral_separation(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut best = f64::INFINITY;
    while i < a.len() && j < b.len() {
        best = best.min((a[i] - b[j]).abs());
        if a[i] < b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    best
}

/// Indices of `values` lying in the open interval `I`.
pub fn sigma_in(values: &[f64], i: &EnergyInterval) -> Vec<usize> {
    (0..values.len()).filter(|&k| i.contains(values[k])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::{hamiltonian, sample_potential, DisorderSpec};
    use crate::lattice::BoxSpec;
    use std::f64::consts::PI;

    #[test]
    fn free_chain_spectrum() {
        // Dirichlet chain of n sites: -2 cos(kπ/(n+1))
        let n = 12;
        let r = BoxSpec::new(vec![(n as f64 - 1.0) / 2.0], n as f64).unwrap().sites();
        assert_eq!(r.len(), n);
        let h = Hamiltonian::from_potential(&r, &vec![0.0; n]).unwrap();
        let es = eigensystem(&h).unwrap();
        let mut want: Vec<f64> = (1..=n)
            .map(|k| -2.0 * (k as f64 * PI / (n as f64 + 1.0)).cos())
            .collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in es.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(eigenvalues(&h).len(), n);
    }

    #[test]
    fn sign_convention_and_orthonormality() {
        let d = DisorderSpec::centered_uniform(4.0).unwrap();
        let r = BoxSpec::centered(2, 6.0).unwrap().sites();
        let h = hamiltonian(&r, &sample_potential(&r, &d, 9, 0).unwrap()).unwrap();
        let es = eigensystem(&h).unwrap();
        assert!(es.values.windows(2).all(|w| w[0] <= w[1]));
        for k in 0..es.len() {
            let first = es.vector(k).iter().find(|x| x.abs() > 1e-10).unwrap();
            assert!(*first > 0.0);
            let norm: f64 = es.vector(k).iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let bytes = es.vectors_le_bytes();
        assert_eq!(bytes.len(), 8 * es.len() * es.len());
        let second = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(second, es.vectors[(0, 1)]);
    }

    #[test]
    fn one_site_and_empty() {
        let one = BoxSpec::centered(1, 1.0).unwrap().sites();
        let es = eigensystem(&Hamiltonian::from_potential(&one, &[0.3]).unwrap()).unwrap();
        assert_eq!(es.values, vec![0.3]);
        assert_eq!(es.vector(0), &[1.0]);
        let empty = Region::empty(1);
        let es = eigensystem(&Hamiltonian::from_potential(&empty, &[]).unwrap()).unwrap();
        assert!(es.is_empty());
        assert_eq!(spectral_dist(&es.values, 0.0), f64::INFINITY);
    }

    #[test]
    fn distances_and_windows() {
        assert_eq!(spectral_dist(&[-1.0, 2.0], 0.5), 1.5);
        assert_eq!(spectral_separation(&[-1.0, 2.0], &[0.0, 2.25]), 0.25);
        assert_eq!(spectral_separation(&[], &[1.0]), f64::INFINITY);
        let i = EnergyInterval::new(0.0, 1.0).unwrap();
        assert_eq!(sigma_in(&[-1.0, -0.5, 0.99, 1.0], &i), vec![1, 2]);
        assert_eq!(i.h(0.5), 0.75);
        assert!(i.h(1.0) == 0.0 && i.h(-2.0) == 0.0);
        let s = i.shrink(16.0, 0.5);
        assert_eq!(s.radius, 0.75);
        assert!((i.expand(16.0, 0.5).radius - 4.0 / 3.0).abs() < 1e-15);
        assert!(EnergyInterval::new(0.0, 0.0).is_err());
    }
}
