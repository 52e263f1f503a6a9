//! The exponent schedule that drives the multiscale induction, its
//! validation, and the scale sequence `L_{k+1} = L_k^γ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponents `(ξ, ζ, β, τ, γ, κ, κ′, ς)` plus the derived `ζ̃`, `τ̃`, `ϱ`.
///
/// Derived values are recomputed on construction and on deserialization, so
/// a JSON file only needs the eight primary fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ExponentInputs")]
pub struct ExponentSet {
    pub xi: f64,
    pub zeta: f64,
    pub beta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub kappa_prime: f64,
    pub varsigma: f64,
    pub zeta_tilde: f64,
    pub tau_tilde: f64,
    pub varrho: f64,
}

#[derive(Deserialize)]
struct ExponentInputs {
    xi: f64,
    zeta: f64,
    beta: f64,
    tau: f64,
    gamma: f64,
    kappa: f64,
    kappa_prime: f64,
    varsigma: f64,
}

impl From<ExponentInputs> for ExponentSet {
    fn from(e: ExponentInputs) -> Self {
        ExponentSet::new(e.xi, e.zeta, e.beta, e.tau, e.gamma, e.kappa, e.kappa_prime, e.varsigma)
    }
}

#[allow(clippy::too_many_arguments)]
impl ExponentSet {
    pub fn new(
        xi: f64,
        zeta: f64,
        beta: f64,
        tau: f64,
        gamma: f64,
        kappa: f64,
        kappa_prime: f64,
        varsigma: f64,
    ) -> Self {
        let zeta_tilde = (zeta + beta) / 2.0;
        let tau_tilde = (1.0 + tau) / 2.0;
        let varrho = varrho_of(kappa, tau, gamma, zeta_tilde);
        ExponentSet {
            xi,
            zeta,
            beta,
            tau,
            gamma,
            kappa,
            kappa_prime,
            varsigma,
            zeta_tilde,
            tau_tilde,
            varrho,
        }
    }

    /// Copy with one primary field replaced; derived values are refreshed.
    pub fn with_field(&self, field: &str, value: f64) -> Result<Self> {
        let mut e = *self;
        match field {
            "xi" => e.xi = value,
            "zeta" => e.zeta = value,
            "beta" => e.beta = value,
            "tau" => e.tau = value,
            "gamma" => e.gamma = value,
            "kappa" => e.kappa = value,
            "kappa_prime" => e.kappa_prime = value,
            "varsigma" => e.varsigma = value,
            other => return Err(Error::invalid(other, "not a primary exponent")),
        }
        Ok(ExponentSet::new(
            e.xi,
            e.zeta,
            e.beta,
            e.tau,
            e.gamma,
            e.kappa,
            e.kappa_prime,
            e.varsigma,
        ))
    }

    /// `N_ℓ = ⌊ℓ^{(γ-1)ζ̃}⌋`, the tolerated number of disjoint bad boxes.
    pub fn bad_box_budget(&self, ell: f64) -> u64 {
        floor_pow(ell, (self.gamma - 1.0) * self.zeta_tilde)
    }
}

fn varrho_of(kappa: f64, tau: f64, gamma: f64, zeta_tilde: f64) -> f64 {
    kappa
        .min((1.0 - tau) / 2.0)
        .min(gamma * tau - (gamma - 1.0) * zeta_tilde - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    /// A selection condition; the schedule is valid only if all of these hold.
    Required,
    /// A stated consequence of the required conditions.
    Implied,
    /// Reported but not enforced.
    Advisory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub id: String,
    pub kind: RowKind,
    pub lhs: f64,
    /// Either `"<"` or `"<="`.
    pub relation: String,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn row(&self, id: &str) -> Option<&ValidationRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn first_failure(&self) -> Option<&ValidationRow> {
        self.rows.iter().find(|r| r.kind == RowKind::Required && !r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,kind,lhs,relation,rhs,margin,pass\n");
        for r in &self.rows {
            let kind = match r.kind {
                RowKind::Required => "required",
                RowKind::Implied => "implied",
                RowKind::Advisory => "advisory",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id,
                kind,
                crate::fmt_f64(r.lhs),
                r.relation,
                crate::fmt_f64(r.rhs),
                crate::fmt_f64(r.margin),
                r.pass
            ));
        }
        out
    }
}

struct Rows(Vec<ValidationRow>);

impl Rows {
    fn push(&mut self, id: &str, kind: RowKind, lhs: f64, strict: bool, rhs: f64) {
        // NaN operands compare false and so fail
        let pass = if strict { lhs < rhs } else { lhs <= rhs };
        self.0.push(ValidationRow {
            id: id.to_string(),
            kind,
            lhs,
            relation: if strict { "<" } else { "<=" }.to_string(),
            rhs,
            margin: rhs - lhs,
            pass,
        });
    }
}

/// Check every selection condition of the schedule, its stated consequences,
/// and the advisory `κ <= ϱ`.
pub fn validate(e: &ExponentSet) -> ValidationReport {
    use RowKind::*;
    let ExponentSet {
        xi,
        zeta,
        beta,
        tau,
        gamma,
        kappa,
        kappa_prime,
        varsigma,
        zeta_tilde,
        tau_tilde,
        varrho,
    } = *e;
    let mixed = ((gamma - 1.0) * beta + 1.0) / gamma;
    let mut r = Rows(Vec::new());

    r.push("xi_positive", Required, 0.0, true, xi);
    r.push("xi_lt_zeta", Required, xi, true, zeta);
    r.push("zeta_lt_beta", Required, zeta, true, beta);
    r.push("beta_lt_inv_gamma", Required, beta, true, 1.0 / gamma);
    r.push("gamma_gt_one", Required, 1.0, true, gamma);
    r.push("gamma_lt_sqrt_ratio", Required, gamma, true, (zeta / xi).sqrt());
    r.push("tau_gt_gamma_beta", Required, gamma * beta, true, tau);
    r.push("tau_gt_mixed", Required, mixed, true, tau);
    r.push("tau_lt_one", Required, tau, true, 1.0);
    r.push("kappa_positive", Required, 0.0, true, kappa);
    r.push("kappa_lt_one", Required, kappa, true, 1.0);
    r.push("kappa_prime_nonneg", Required, 0.0, false, kappa_prime);
    r.push("kappa_prime_lt_one", Required, kappa_prime, true, 1.0);
    r.push("kappa_sum", Required, kappa + kappa_prime, true, tau - gamma * beta);
    r.push("varrho_positive", Required, 0.0, true, varrho);
    r.push("varsigma_positive", Required, 0.0, true, varsigma);
    r.push("varsigma_le_one_minus_varrho", Required, varsigma, false, 1.0 - varrho);

    r.push("xi_gamma_sq_lt_zeta", Implied, xi * gamma * gamma, true, zeta);
    r.push("beta_lt_tau_over_gamma", Implied, beta, true, tau / gamma);
    r.push("tau_over_gamma_lt_inv_gamma", Implied, tau / gamma, true, 1.0 / gamma);
    r.push("inv_gamma_lt_tau", Implied, 1.0 / gamma, true, tau);
    let ratio = (1.0 - beta) / (tau - beta);
    r.push("one_lt_ratio", Implied, 1.0, true, ratio);
    r.push("ratio_lt_gamma", Implied, ratio, true, gamma);
    r.push("gamma_lt_tau_over_beta", Implied, gamma, true, tau / beta);
    r.push("zeta_lt_zeta_tilde", Implied, zeta, true, zeta_tilde);
    r.push("zeta_tilde_lt_beta", Implied, zeta_tilde, true, beta);
    r.push("tau_lt_tau_tilde", Implied, tau, true, tau_tilde);
    r.push("tau_tilde_lt_one", Implied, tau_tilde, true, 1.0);
    r.push(
        "growth_zeta_tilde_lt_beta",
        Implied,
        (gamma - 1.0) * zeta_tilde + 1.0,
        true,
        (gamma - 1.0) * beta + 1.0,
    );
    r.push(
        "growth_beta_lt_gamma_tau",
        Implied,
        (gamma - 1.0) * beta + 1.0,
        true,
        gamma * tau,
    );
    r.push("varrho_lt_one", Implied, varrho, true, 1.0);

    r.push("kappa_le_varrho", Advisory, kappa, false, varrho);

    let rows = r.0;
    let pass = rows.iter().filter(|row| row.kind == Required).all(|row| row.pass);
    ValidationReport { rows, pass }
}

/// Optional replacements for the default choices made by [`derive`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExponentOverrides {
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub kappa: Option<f64>,
    pub kappa_prime: Option<f64>,
    pub varsigma: Option<f64>,
}

/// Build a valid schedule from `(ξ, ζ)` by taking midpoints of the admissible
/// ranges, one exponent at a time.
///
/// Defaults: `γ` is the midpoint of `(1, min{√(ζ/ξ), 1/ζ})`; `β` the midpoint
/// of `(ζ, 1/γ)`; `τ` the midpoint of `(max{γβ, ((γ-1)β+1)/γ}, 1)`;
/// `κ = κ′ = (τ - γβ)/4`; `ς` the midpoint of `(0, 1 - ϱ]`.
pub fn derive(xi: f64, zeta: f64, overrides: &ExponentOverrides) -> Result<ExponentSet> {
    if !(xi > 0.0) {
        return Err(Error::InfeasibleExponents {
            constraint: "0 < xi".into(),
        });
    }
    if !(xi < zeta) {
        return Err(Error::InfeasibleExponents {
            constraint: "xi < zeta".into(),
        });
    }
    if !(zeta < 1.0) {
        return Err(Error::InfeasibleExponents {
            constraint: "zeta < 1".into(),
        });
    }
    let gamma_cap = (zeta / xi).sqrt().min(1.0 / zeta);
    let gamma = overrides.gamma.unwrap_or((1.0 + gamma_cap) / 2.0);
    let beta = overrides.beta.unwrap_or((zeta + 1.0 / gamma) / 2.0);
    let tau_floor = (gamma * beta).max(((gamma - 1.0) * beta + 1.0) / gamma);
    let tau = overrides.tau.unwrap_or((tau_floor + 1.0) / 2.0);
    let quarter = (tau - gamma * beta) / 4.0;
    let kappa = overrides.kappa.unwrap_or(quarter);
    let kappa_prime = overrides.kappa_prime.unwrap_or(quarter);
    let zeta_tilde = (zeta + beta) / 2.0;
    let varrho = varrho_of(kappa, tau, gamma, zeta_tilde);
    let varsigma = overrides.varsigma.unwrap_or((1.0 - varrho) / 2.0);
    let e = ExponentSet::new(xi, zeta, beta, tau, gamma, kappa, kappa_prime, varsigma);
    let report = validate(&e);
    match report.first_failure() {
        None => Ok(e),
        Some(row) => Err(Error::InfeasibleExponents {
            constraint: row.id.clone(),
        }),
    }
}

/// Largest scale represented before the sequence is cut off.
pub const SCALE_LIMIT: f64 = 1e300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSequence {
    pub scales: Vec<f64>,
    /// True when the sequence stopped early because `L_k` exceeded
    /// [`SCALE_LIMIT`].
    pub overflowed: bool,
}

/// `L_k = L_0^{γ^k}` for `k = 0..=kmax`.
pub fn scale_sequence(l0: f64, gamma: f64, kmax: usize) -> Result<ScaleSequence> {
    if !(l0 > 1.0) || !l0.is_finite() {
        return Err(Error::invalid("L0", format!("must exceed 1, got {l0}")));
    }
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma", format!("must exceed 1, got {gamma}")));
    }
    let mut scales = Vec::with_capacity(kmax + 1);
    let mut overflowed = false;
    for k in 0..=kmax {
        let lk = l0.powf(gamma.powi(k as i32));
        if !(lk <= SCALE_LIMIT) {
            overflowed = true;
            break;
        }
        scales.push(lk);
    }
    Ok(ScaleSequence { scales, overflowed })
}

/// `⌊L^p⌋`, with a relative nudge so exact powers are not rounded down.
pub fn floor_pow(l: f64, p: f64) -> u64 {
    let v = l.powf(p);
    (v * (1.0 + 1e-12)).floor() as u64
}
