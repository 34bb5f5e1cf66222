//! Experiment configuration: TOML schema, parsing with line-anchored
//! errors, canonical printing and conversion into solver inputs.

use std::sync::Arc;

use ersatz_core::data::{DataTerm, TerminalData};
use ersatz_core::exec::Backend;
use ersatz_core::grid::{build_grid, Domain};
use ersatz_core::hamiltonian::{
    from_diffusion, make_bellman, make_isaacs, make_linear, CoefficientRow, ErsatzOperator, SampleSpec,
    StencilHamiltonian,
};
use ersatz_core::pucci::{feasible_hat_delta, EllipticityParams, SymMatrix};
use ersatz_core::solver::{Mode, SolveConfig, StorePolicy, TimeStep};
use ersatz_core::stencil::{build_standard_stencil, build_stencil_with_radius, StencilSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Test matrices used when `hat_delta = "auto"`.
const AUTO_HAT_DELTA_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainSection,
    pub grid: GridSection,
    pub params: ParamsSection,
    pub hamiltonian: HamiltonianSection,
    pub data: DataSection,
    pub time: TimeSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainSection {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Torus { period: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_list: Option<Vec<f64>>,
    /// 1 selects the standard stencil.
    #[serde(default = "one")]
    pub stencil_radius: i64,
}

fn one() -> i64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HatDelta {
    Value(f64),
    Keyword(AutoKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub delta: f64,
    pub hat_delta: HatDelta,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub big_k: Option<f64>,
    #[serde(rename = "K_list", default, skip_serializing_if = "Option::is_none")]
    pub k_list: Option<Vec<f64>>,
    #[serde(rename = "K0", default)]
    pub k0: f64,
    #[serde(default)]
    pub h_bar: f64,
    #[serde(default = "half")]
    pub check_delta: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub weights: Vec<f64>,
    pub drift: Vec<f64>,
    #[serde(default)]
    pub zeroth: f64,
    #[serde(default)]
    pub source: f64,
}

impl RowSpec {
    pub fn to_row(&self) -> CoefficientRow {
        CoefficientRow::new(self.weights.clone(), self.drift.clone(), self.zeroth, self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub rows: Vec<RowSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HamiltonianSection {
    /// `Σ ν_k z_k + ⟨b, grad⟩ + c·u0 + f`.
    Linear {
        nu: Vec<f64>,
        drift: Vec<f64>,
        #[serde(default)]
        zeroth: f64,
        #[serde(default)]
        source: f64,
    },
    /// `max` over rows.
    Bellman { rows: Vec<RowSpec> },
    /// `max` over groups of `min` over rows.
    Isaacs { groups: Vec<GroupSpec> },
    /// Constant diffusion matrix, decomposed along the stencil.
    Diffusion {
        matrix: Vec<Vec<f64>>,
        drift: Vec<f64>,
        #[serde(default)]
        zeroth: f64,
        #[serde(default)]
        source: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub time_rate: f64,
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TermSpec {
    Quadratic {
        matrix: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<Vec<f64>>,
        #[serde(default = "unit")]
        scale: f64,
    },
    Trig {
        frequency: Vec<f64>,
        #[serde(default = "unit")]
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    Constant { value: f64 },
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    #[default]
    Auto,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default)]
    pub step: StepKind,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

fn default_safety() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    Cylinder,
    WholeSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StoreSpec {
    Full,
    #[default]
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendSpec {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeSpec>,
    #[serde(default)]
    pub store: StoreSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

/// A configuration together with its source text, for error locations.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    source: String,
    path: String,
}

/// Everything a run needs, resolved from the configuration.
pub struct Resolved {
    pub stencil: StencilSet,
    pub params: EllipticityParams,
    pub ham: Arc<dyn StencilHamiltonian>,
    pub data: TerminalData,
}

pub fn parse(source: &str, path: &str) -> Result<LoadedConfig, CliError> {
    let config: ExperimentConfig = toml::from_str(source).map_err(|e| {
        let line = e.span().map(|s| line_of(source, s.start));
        CliError::config(path, line, e.message().trim())
    })?;
    Ok(LoadedConfig { config, source: source.to_string(), path: path.to_string() })
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Canonical TOML rendering; parsing it gives back the same value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical rendering, ignoring the output path.
    pub fn semantic_hash(&self) -> String {
        let mut c = self.clone();
        c.run.out = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dim(&self) -> usize {
        match &self.domain {
            DomainSection::Box { lower, .. } => lower.len(),
            DomainSection::Ball { center, .. } => center.len(),
            DomainSection::Torus { period } => period.len(),
        }
    }
}

fn sym_matrix(rows: &[Vec<f64>]) -> ersatz_core::Result<SymMatrix> {
    SymMatrix::from_rows(rows)
}

impl LoadedConfig {
    /// Line of the `[section]` header, for anchoring semantic errors.
    fn section_line(&self, section: &str) -> Option<usize> {
        let header = format!("[{section}]");
        self.source.lines().position(|l| l.trim() == header).map(|i| i + 1)
    }

    /// Line of `key = …` inside `[section]`, falling back to the header.
    fn key_line(&self, section: &str, key: &str) -> Option<usize> {
        let start = self.section_line(section)?;
        for (i, l) in self.source.lines().enumerate().skip(start) {
            let t = l.trim();
            if t.starts_with('[') && !t.starts_with("[[") {
                break;
            }
            if t.split('=').next().map(str::trim) == Some(key) {
                return Some(i + 1);
            }
        }
        Some(start)
    }

    fn at(&self, section: &str, key: &str, e: ersatz_core::Error) -> CliError {
        CliError::core_at(&self.path, self.key_line(section, key), e)
    }

    fn invalid(&self, section: &str, key: &str, msg: String) -> CliError {
        CliError::config(&self.path, self.key_line(section, key), &msg)
    }

    pub fn stencil(&self) -> Result<StencilSet, CliError> {
        let d = self.config.dim() as i64;
        let r = self.config.grid.stencil_radius;
        let s = if r == 1 { build_standard_stencil(d) } else { build_stencil_with_radius(d, r) };
        s.map_err(|e| self.at("grid", "stencil_radius", e))
    }

    pub fn domain(&self) -> Domain {
        match &self.config.domain {
            DomainSection::Box { lower, upper } => Domain::Box { lower: lower.clone(), upper: upper.clone() },
            DomainSection::Ball { center, radius } => Domain::Ball { center: center.clone(), radius: *radius },
            DomainSection::Torus { period } => Domain::Torus { period: period.clone() },
        }
    }

    /// The `h` values of the run: `[h]` or the refinement list.
    pub fn h_values(&self, want_list: bool) -> Result<Vec<f64>, CliError> {
        let g = &self.config.grid;
        match (want_list, g.h, &g.h_list) {
            (true, _, Some(list)) => Ok(list.clone()),
            (true, _, None) => Err(self.invalid("grid", "h_list", "refine-h needs grid.h_list".into())),
            (false, Some(h), _) => Ok(vec![h]),
            (false, None, _) => Err(self.invalid("grid", "h", "this command needs grid.h".into())),
        }
    }

    pub fn k_values(&self, want_list: bool) -> Result<Vec<f64>, CliError> {
        let p = &self.config.params;
        match (want_list, p.big_k, &p.k_list) {
            (true, _, Some(list)) => Ok(list.clone()),
            (true, _, None) => Err(self.invalid("params", "K_list", "sweep-k needs params.K_list".into())),
            (false, Some(k), _) => Ok(vec![k]),
            (false, None, Some(list)) if !list.is_empty() => Ok(vec![list[list.len() - 1]]),
            (false, None, _) => Err(self.invalid("params", "K", "this command needs params.K".into())),
        }
    }

    /// Builds stencil, parameters, Hamiltonian and data, with `big_k` as `K`.
    pub fn resolve(&self, big_k: f64, seed: u64) -> Result<Resolved, CliError> {
        let c = &self.config;
        let d = c.dim();
        self.domain().validate().map_err(|e| self.at("domain", "kind", e))?;
        let stencil = self.stencil()?;
        let p = &c.params;
        let hat_delta = match p.hat_delta {
            HatDelta::Value(v) => v,
            HatDelta::Keyword(AutoKeyword::Auto) => feasible_hat_delta(&stencil, p.delta, AUTO_HAT_DELTA_SAMPLES)
                .map_err(|e| self.at("params", "hat_delta", e))?,
        };
        let params = EllipticityParams {
            delta: p.delta,
            hat_delta,
            check_delta: p.check_delta,
            k0: p.k0,
            h_bar: p.h_bar,
            big_k,
        };
        params.validate().map_err(|e| self.at("params", "hat_delta", e))?;
        let ham = self.hamiltonian(&stencil, &params, seed)?;
        if ham.dim() != d || ham.stencil_len() != stencil.len() {
            return Err(self.invalid(
                "hamiltonian",
                "kind",
                format!(
                    "operator has {} second-order components for dimension {}; the stencil has {} for dimension {d}",
                    ham.stencil_len(),
                    ham.dim(),
                    stencil.len()
                ),
            ));
        }
        let data = self.data()?;
        Ok(Resolved { stencil, params, ham, data })
    }

    fn hamiltonian(
        &self,
        stencil: &StencilSet,
        params: &EllipticityParams,
        seed: u64,
    ) -> Result<Arc<dyn StencilHamiltonian>, CliError> {
        let at = |e| self.at("hamiltonian", "kind", e);
        Ok(match &self.config.hamiltonian {
            HamiltonianSection::Linear { nu, drift, zeroth, source } => {
                let f = *source;
                let src = (f != 0.0).then(|| Arc::new(move |_: f64, _: &[f64]| f) as _);
                Arc::new(make_linear(nu.clone(), drift.clone(), *zeroth, src).map_err(at)?)
            }
            HamiltonianSection::Bellman { rows } => {
                Arc::new(make_bellman(rows.iter().map(RowSpec::to_row).collect()).map_err(at)?)
            }
            HamiltonianSection::Isaacs { groups } => Arc::new(
                make_isaacs(groups.iter().map(|g| g.rows.iter().map(RowSpec::to_row).collect()).collect()).map_err(at)?,
            ),
            HamiltonianSection::Diffusion { matrix, drift, zeroth, source } => {
                let a = sym_matrix(matrix).map_err(|e| self.at("hamiltonian", "matrix", e))?;
                if drift.len() != stencil.dim() {
                    return Err(self.at(
                        "hamiltonian",
                        "drift",
                        ersatz_core::Error::DimensionMismatch { expected: stencil.dim(), found: drift.len() },
                    ));
                }
                let (b, c0, f) = (drift.clone(), *zeroth, *source);
                let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let lower = Arc::new(move |u0: f64, grad: &[f64], _: f64, _: &[f64]| {
                    b.iter().zip(grad).map(|(bk, g)| bk * g).sum::<f64>() + c0 * u0 + f
                });
                let spec = SampleSpec { seed, count: 16, ..SampleSpec::default() };
                Arc::new(
                    from_diffusion(
                        Arc::new(move |_, _, _, _| a.clone()),
                        lower,
                        (b_norm, c0.abs()),
                        stencil,
                        params.hat_delta,
                        params.delta,
                        &spec,
                    )
                    .map_err(at)?,
                )
            }
        })
    }

    fn data(&self) -> Result<TerminalData, CliError> {
        let d = self.config.dim();
        let mut terms = Vec::new();
        for t in &self.config.data.terms {
            terms.push(match t {
                TermSpec::Quadratic { matrix, shift, scale } => DataTerm::Quadratic {
                    matrix: sym_matrix(matrix).map_err(|e| self.at("data", "terms", e))?,
                    shift: shift.clone().unwrap_or_else(|| vec![0.0; d]),
                    scale: *scale,
                },
                TermSpec::Trig { frequency, amplitude, phase } => {
                    DataTerm::Trig { frequency: frequency.clone(), amplitude: *amplitude, phase: *phase }
                }
                TermSpec::Constant { value } => DataTerm::Constant(*value),
            });
        }
        let data = TerminalData::new(terms, self.config.data.time_rate);
        data.validate(d).map_err(|e| self.at("data", "terms", e))?;
        Ok(data)
    }

    /// Solver configuration at mesh size `h` and penalty `big_k`.
    pub fn solve_config(&self, h: f64, big_k: f64, seed: u64) -> Result<SolveConfig, CliError> {
        let r = self.resolve(big_k, seed)?;
        self.solve_config_from(&r, h)
    }

    pub fn solve_config_from(&self, r: &Resolved, h: f64) -> Result<SolveConfig, CliError> {
        let c = &self.config;
        let key = if c.grid.h.is_some() { "h" } else { "h_list" };
        let grid = build_grid(self.domain(), &r.stencil, h).map_err(|e| self.at("grid", key, e))?;
        let op = ErsatzOperator::new(Arc::clone(&r.ham), r.params, r.stencil.clone())
            .map_err(|e| self.at("params", "K", e))?;
        let horizon = c.time.horizon;
        let mut cfg = SolveConfig::new(Arc::new(grid), op, r.data.to_fn(horizon), horizon);
        cfg.time_step = match c.time.step {
            StepKind::Auto => TimeStep::Auto { safety: c.time.safety },
            StepKind::Fixed => TimeStep::Fixed(
                c.time.tau.ok_or_else(|| self.invalid("time", "tau", "fixed steps need time.tau".into()))?,
            ),
        };
        if let Some(m) = c.run.mode {
            cfg.mode = match m {
                ModeSpec::Cylinder => Mode::Cylinder,
                ModeSpec::WholeSpace => Mode::WholeSpace,
            };
        }
        cfg.store = match c.run.store {
            StoreSpec::Full => StorePolicy::Full,
            StoreSpec::Final => StorePolicy::FinalWithProbes(Vec::new()),
        };
        cfg.backend = match c.run.backend {
            BackendSpec::Sequential => Backend::Sequential,
            BackendSpec::Parallel => Backend::Parallel,
        };
        Ok(cfg)
    }
}
