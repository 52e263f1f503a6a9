//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE` with a JSON document of the form
//! `{"seed": .., "samples": .., "threads": .., "out": .., "params": {..}}`;
//! command-line flags take precedence over the file. With `--out DIR` the
//! resolved configuration, a JSON report, and CSV tables are written there.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::certificates::EnergyInterval;
use crate::disorder::{hamiltonian, sample_potential, DisorderSpec};
use crate::error::{Error, Result};
use crate::exponents::{derive, validate, ExponentOverrides, ExponentSet};
use crate::lattice::BoxSpec;
use crate::msa::{induction_step, p_localizing_mc, recursion, wegner_mc, StepOptions};
use crate::spectral::eigensystem;

/// Environment variable supplying the default worker-thread count.
pub const THREADS_ENV: &str = "EMSA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "emsa", version, about = "Eigensystem multiscale analysis experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Derive or check an exponent schedule; prints the validation table.
    Exponents(ExponentsArgs),
    /// Eigenvalues and eigenvectors of one sampled box.
    Spectrum(SpectrumArgs),
    /// Monte Carlo check of the Wegner estimate.
    Wegner(WegnerArgs),
    /// Monte Carlo frequency of (m, I)-localizing boxes.
    Localize(LocalizeArgs),
    /// One induction step from scale ℓ to ℓ^γ.
    MsaStep(StepArgs),
    /// The scale recursion and its limits.
    Recursion(RecursionArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory for the report and tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exponent choice shared by several subcommands. Without `exponents`, the
/// schedule is derived from `xi`, `zeta` (default 0.1, 0.2) and any
/// overrides.
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExponentParams {
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long = "kappa-prime")]
    pub kappa_prime: Option<f64>,
    #[arg(long)]
    pub varsigma: Option<f64>,
}

impl ExponentParams {
    fn merge(&mut self, o: &ExponentParams) {
        merge(&mut self.xi, o.xi);
        merge(&mut self.zeta, o.zeta);
        merge(&mut self.gamma, o.gamma);
        merge(&mut self.beta, o.beta);
        merge(&mut self.tau, o.tau);
        merge(&mut self.kappa, o.kappa);
        merge(&mut self.kappa_prime, o.kappa_prime);
        merge(&mut self.varsigma, o.varsigma);
    }

    fn fill_defaults(&mut self) {
        self.xi.get_or_insert(0.1);
        self.zeta.get_or_insert(0.2);
    }

    /// A fully specified set is taken as given; otherwise the missing fields
    /// are derived.
    fn resolve(&self) -> Result<ExponentSet> {
        let (xi, zeta) = (self.xi.unwrap_or(0.1), self.zeta.unwrap_or(0.2));
        if let (Some(g), Some(b), Some(t), Some(k), Some(kp), Some(s)) = (
            self.gamma,
            self.beta,
            self.tau,
            self.kappa,
            self.kappa_prime,
            self.varsigma,
        ) {
            return Ok(ExponentSet::new(xi, zeta, b, t, g, k, kp, s));
        }
        derive(
            xi,
            zeta,
            &ExponentOverrides {
                gamma: self.gamma,
                beta: self.beta,
                tau: self.tau,
                kappa: self.kappa,
                kappa_prime: self.kappa_prime,
                varsigma: self.varsigma,
            },
        )
    }
}

fn merge<T: Clone>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

#[derive(Args, Debug)]
pub struct ExponentsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub exps: ExponentParams,
}

/// Box geometry and disorder shared by the sampling subcommands.
#[derive(Args, Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoxParams {
    #[arg(long)]
    pub dim: Option<usize>,
    /// Box side L.
    #[arg(long)]
    pub side: Option<f64>,
    /// Box center, comma separated (default: origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Option<Vec<f64>>,
    /// Width W of the uniform disorder on [-W/2, W/2].
    #[arg(long)]
    #[serde(skip)]
    pub width: Option<f64>,
    #[arg(skip)]
    pub disorder: Option<DisorderSpec>,
}

impl BoxParams {
    fn merge(&mut self, o: &BoxParams) -> Result<()> {
        merge(&mut self.dim, o.dim);
        merge(&mut self.side, o.side);
        merge(&mut self.center, o.center.clone());
        if let Some(w) = o.width {
            self.disorder = Some(DisorderSpec::centered_uniform(w)?);
        }
        Ok(())
    }

    fn boxspec(&self) -> Result<BoxSpec> {
        let dim = self.dim.unwrap_or(1);
        let side = need(self.side, "side")?;
        let center = self.center.clone().unwrap_or_else(|| vec![0.0; dim]);
        if center.len() != dim {
            return Err(Error::invalid("center", format!("expected {dim} coordinates")));
        }
        BoxSpec::new(center, side)
    }

    fn disorder(&self) -> Result<DisorderSpec> {
        self.disorder
            .clone()
            .ok_or_else(|| Error::invalid("disorder", "missing"))
    }
}

fn need<T: Copy>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(field, "missing"))
}

#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpectrumParams {
    #[serde(flatten)]
    pub geometry: BoxParams,
    pub sample_index: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub geometry: BoxParams,
    #[arg(long = "sample-index")]
    pub sample_index: Option<u64>,
}

#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WegnerParams {
    #[serde(flatten)]
    pub geometry: BoxParams,
    pub energy: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct WegnerArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub geometry: BoxParams,
    #[arg(long, allow_hyphen_values = true)]
    pub energy: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta: Option<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LocalizeParams {
    #[serde(flatten)]
    pub geometry: BoxParams,
    pub energy: Option<f64>,
    pub radius: Option<f64>,
    /// Radius of an inner interval `J` with the same center.
    pub inner_radius: Option<f64>,
    pub m: Option<f64>,
    pub exponents: ExponentParams,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub geometry: BoxParams,
    #[arg(long, allow_hyphen_values = true)]
    pub energy: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long = "inner-radius")]
    pub inner_radius: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    #[command(flatten)]
    pub exps: ExponentParams,
}

#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StepParams {
    pub dim: Option<usize>,
    pub ell: Option<f64>,
    pub energy: Option<f64>,
    pub radius: Option<f64>,
    pub m: Option<f64>,
    pub c_d: Option<f64>,
    pub disorder: Option<DisorderSpec>,
    pub exponents: ExponentParams,
}

#[derive(Args, Debug)]
pub struct StepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub ell: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub energy: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub m: Option<f64>,
    #[arg(long = "Cd", allow_hyphen_values = true)]
    pub c_d: Option<f64>,
    /// Width W of the uniform disorder on [-W/2, W/2].
    #[arg(long)]
    pub width: Option<f64>,
    #[command(flatten)]
    pub exps: ExponentParams,
}

#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RecursionParams {
    pub l0: Option<f64>,
    pub a0: Option<f64>,
    pub m0: Option<f64>,
    pub c_d: Option<f64>,
    pub k_max: Option<usize>,
    pub tol: Option<f64>,
    pub dim: Option<usize>,
    pub exponents: ExponentParams,
}

#[derive(Args, Debug)]
pub struct RecursionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long = "L0")]
    pub l0: Option<f64>,
    #[arg(long = "A0")]
    pub a0: Option<f64>,
    #[arg(long = "m0", allow_hyphen_values = true)]
    pub m0: Option<f64>,
    #[arg(long = "Cd", allow_hyphen_values = true)]
    pub c_d: Option<f64>,
    #[arg(long = "kmax")]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[command(flatten)]
    pub exps: ExponentParams,
}

/// On-disk configuration: run controls plus subcommand parameters.
#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig<P> {
    pub seed: Option<u64>,
    pub samples: Option<u64>,
    /// Thread-count hint; never affects results and is not recorded.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub params: P,
}

impl<P: DeserializeOwned + Default> ExperimentConfig<P> {
    fn load(common: &CommonArgs) -> Result<Self> {
        let mut cfg: Self = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| Error::invalid("config", e.to_string()))?
            }
            None => Self::default(),
        };
        merge(&mut cfg.seed, common.seed);
        merge(&mut cfg.samples, common.samples);
        merge(&mut cfg.threads, common.threads);
        merge(&mut cfg.out, common.out.clone());
        cfg.seed.get_or_insert(0);
        cfg.samples.get_or_insert(100);
        Ok(cfg)
    }
}

/// Files produced by a subcommand: the text for stdout and named outputs.
struct Outputs {
    stdout: String,
    files: Vec<(&'static str, Vec<u8>)>,
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn report_outputs<T: Serialize>(report: &T, csv_name: &'static str, csv: String) -> Result<Outputs> {
    let body = json(report)?;
    Ok(Outputs {
        stdout: String::from_utf8(body.clone()).expect("json is utf-8"),
        files: vec![("report.json", body), (csv_name, csv.into_bytes())],
    })
}

fn interval(energy: Option<f64>, radius: Option<f64>) -> Result<EnergyInterval> {
    EnergyInterval::new(energy.unwrap_or(0.0), need(radius, "radius")?)
}

fn cmd_exponents(a: &ExponentsArgs) -> Result<(Outputs, serde_json::Value, Option<usize>, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::<ExponentParams>::load(&a.common)?;
    cfg.params.merge(&a.exps);
    cfg.params.fill_defaults();
    let set = cfg.params.resolve()?;
    let table = validate(&set);
    #[derive(Serialize)]
    struct Report<'a> {
        exponents: &'a ExponentSet,
        validation: &'a crate::exponents::ValidationReport,
    }
    let csv = table.to_csv();
    let out = Outputs {
        stdout: csv.clone(),
        files: vec![
            (
                "report.json",
                json(&Report {
                    exponents: &set,
                    validation: &table,
                })?,
            ),
            ("validation.csv", csv.into_bytes()),
        ],
    };
    if let Some(row) = table.first_failure() {
        // still emit the table, then report the failure
        finish(&out, &serde_json::to_value(&cfg)?, cfg.out.as_deref())?;
        return Err(Error::InfeasibleExponents {
            constraint: row.id.clone(),
        });
    }
    Ok((out, serde_json::to_value(&cfg)?, cfg.threads, cfg.out))
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<(Outputs, serde_json::Value, Option<usize>, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::<SpectrumParams>::load(&a.common)?;
    cfg.params.geometry.merge(&a.geometry)?;
    merge(&mut cfg.params.sample_index, a.sample_index);
    let p = &cfg.params;
    let cube = p.geometry.boxspec()?.sites();
    let v = sample_potential(
        &cube,
        &p.geometry.disorder()?,
        cfg.seed.unwrap(),
        p.sample_index.unwrap_or(0),
    )?;
    let es = eigensystem(&hamiltonian(&cube, &v)?)?;
    #[derive(Serialize)]
    struct Report<'a> {
        sites: usize,
        values: &'a [f64],
    }
    let body = json(&Report {
        sites: cube.len(),
        values: &es.values,
    })?;
    let out = Outputs {
        stdout: String::from_utf8(body.clone()).expect("json is utf-8"),
        files: vec![
            ("report.json", body),
            ("eigenvalues.csv", es.values_csv().into_bytes()),
            ("eigenvectors.bin", es.vectors_le_bytes()),
            ("potential.csv", v.to_csv().into_bytes()),
        ],
    };
    Ok((out, serde_json::to_value(&cfg)?, cfg.threads, cfg.out))
}

fn cmd_wegner(a: &WegnerArgs) -> Result<(Outputs, serde_json::Value, Option<usize>, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::<WegnerParams>::load(&a.common)?;
    cfg.params.geometry.merge(&a.geometry)?;
    merge(&mut cfg.params.energy, a.energy);
    merge(&mut cfg.params.eta, a.eta);
    let p = &cfg.params;
    let eta = need(p.eta, "eta")?;
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", format!("must be positive, got {eta}")));
    }
    let cube = p.geometry.boxspec()?.sites();
    let rep = wegner_mc(
        &cube,
        need(p.energy, "energy")?,
        eta,
        &p.geometry.disorder()?,
        cfg.samples.unwrap(),
        cfg.seed.unwrap(),
    )?;
    let out = report_outputs(&rep, "wegner.csv", rep.to_csv())?;
    Ok((out, serde_json::to_value(&cfg)?, cfg.threads, cfg.out))
}

fn cmd_localize(a: &LocalizeArgs) -> Result<(Outputs, serde_json::Value, Option<usize>, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::<LocalizeParams>::load(&a.common)?;
    cfg.params.geometry.merge(&a.geometry)?;
    merge(&mut cfg.params.energy, a.energy);
    merge(&mut cfg.params.radius, a.radius);
    merge(&mut cfg.params.inner_radius, a.inner_radius);
    merge(&mut cfg.params.m, a.m);
    cfg.params.exponents.merge(&a.exps);
    cfg.params.exponents.fill_defaults();
    let p = &cfg.params;
    let b = p.geometry.boxspec()?;
    let i = interval(p.energy, p.radius)?;
    let j = p.inner_radius.map(|r| EnergyInterval::new(i.center, r)).transpose()?;
    let rep = p_localizing_mc(
        b.side,
        &b.center,
        &i,
        need(p.m, "m")?,
        &p.exponents.resolve()?,
        j.as_ref(),
        &p.geometry.disorder()?,
        cfg.samples.unwrap(),
        cfg.seed.unwrap(),
    )?;
    let out = report_outputs(&rep, "localize.csv", rep.to_csv())?;
    Ok((out, serde_json::to_value(&cfg)?, cfg.threads, cfg.out))
}

fn cmd_step(a: &StepArgs) -> Result<(Outputs, serde_json::Value, Option<usize>, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::<StepParams>::load(&a.common)?;
    let p = &mut cfg.params;
    merge(&mut p.dim, a.dim);
    merge(&mut p.ell, a.ell);
    merge(&mut p.energy, a.energy);
    merge(&mut p.radius, a.radius);
    merge(&mut p.m, a.m);
    merge(&mut p.c_d, a.c_d);
    if let Some(w) = a.width {
        p.disorder = Some(DisorderSpec::centered_uniform(w)?);
    }
    p.exponents.merge(&a.exps);
    p.exponents.fill_defaults();
    let opts = StepOptions {
        dim: p.dim.unwrap_or(1),
        c_d: p.c_d.unwrap_or(1.0),
    };
    let rep = induction_step(
        need(p.ell, "ell")?,
        &interval(p.energy, p.radius)?,
        need(p.m, "m")?,
        &p.exponents.resolve()?,
        &p.disorder
            .clone()
            .ok_or_else(|| Error::invalid("disorder", "missing"))?,
        cfg.samples.unwrap(),
        cfg.seed.unwrap(),
        &opts,
    )?;
    let out = report_outputs(&rep, "steps.csv", rep.to_csv())?;
    Ok((out, serde_json::to_value(&cfg)?, cfg.threads, cfg.out))
}

fn cmd_recursion(a: &RecursionArgs) -> Result<(Outputs, serde_json::Value, Option<usize>, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::<RecursionParams>::load(&a.common)?;
    let p = &mut cfg.params;
    merge(&mut p.l0, a.l0);
    merge(&mut p.a0, a.a0);
    merge(&mut p.m0, a.m0);
    merge(&mut p.c_d, a.c_d);
    merge(&mut p.k_max, a.k_max);
    merge(&mut p.tol, a.tol);
    merge(&mut p.dim, a.dim);
    p.exponents.merge(&a.exps);
    p.exponents.fill_defaults();
    let rep = recursion(
        need(p.l0, "L0")?,
        need(p.a0, "A0")?,
        need(p.m0, "m0")?,
        &p.exponents.resolve()?,
        p.c_d.unwrap_or(1.0),
        p.k_max.unwrap_or(5),
        p.tol.unwrap_or(1e-12),
        p.dim.unwrap_or(1),
    )?;
    let out = report_outputs(&rep, "recursion.csv", rep.to_csv())?;
    Ok((out, serde_json::to_value(&cfg)?, cfg.threads, cfg.out))
}

fn finish(out: &Outputs, config: &serde_json::Value, dir: Option<&Path>) -> Result<()> {
    print!("{}", out.stdout);
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), json(config)?)?;
        for (name, bytes) in &out.files {
            fs::write(dir.join(name), bytes)?;
        }
    }
    Ok(())
}

fn threads_hint(cli: &Command) -> Option<usize> {
    let common = match cli {
        Command::Exponents(a) => &a.common,
        Command::Spectrum(a) => &a.common,
        Command::Wegner(a) => &a.common,
        Command::Localize(a) => &a.common,
        Command::MsaStep(a) => &a.common,
        Command::Recursion(a) => &a.common,
    };
    common.threads
}

fn execute(cmd: &Command) -> Result<()> {
    let (out, config, _threads, dir) = match cmd {
        Command::Exponents(a) => cmd_exponents(a)?,
        Command::Spectrum(a) => cmd_spectrum(a)?,
        Command::Wegner(a) => cmd_wegner(a)?,
        Command::Localize(a) => cmd_localize(a)?,
        Command::MsaStep(a) => cmd_step(a)?,
        Command::Recursion(a) => cmd_recursion(a)?,
    };
    finish(&out, &config, dir.as_deref())
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code: 0 on success, 2 for invalid input, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = threads_hint(&cli.command)
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}
