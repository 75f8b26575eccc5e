//! Oracle checks of the risk approximations, with pinned tolerances.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rcrl_core::belief::{DirichletBelief, PriorTemplate};
use rcrl_core::mdp::{ActionId, Observation, StateId, TabularMdp};
use rcrl_core::oracle::{self, ExplicitKernel, McMomentEstimate, MIN_MC_SAMPLES};
use rcrl_core::risk;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Gradient,
    Matrix,
    Exact,
    Moments,
    Coverage,
    Theorem1,
}

impl CheckKind {
    pub const ALL: [CheckKind; 6] = [
        CheckKind::Gradient,
        CheckKind::Matrix,
        CheckKind::Exact,
        CheckKind::Moments,
        CheckKind::Coverage,
        CheckKind::Theorem1,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientSuite {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// value is zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradientSuite {
    fn default() -> Self {
        Self {
            instances: 200,
            max_states: 6,
            max_actions: 3,
            max_horizon: 3,
            step: 1e-6,
            tolerance: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSuite {
    pub instances: usize,
    pub tolerance: f64,
}

impl Default for MatrixSuite {
    fn default() -> Self {
        Self {
            instances: 500,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExactSuite {
    pub rows: usize,
    /// Relative tolerance.
    pub tolerance: f64,
}

impl Default for ExactSuite {
    fn default() -> Self {
        Self {
            rows: 100,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentSuite {
    pub instances: usize,
    pub num_samples: usize,
    pub min_alpha0: f64,
    pub width: usize,
    pub pits: usize,
    pub actions: usize,
    /// Horizons are used in turn.
    pub horizons: Vec<usize>,
    pub mean_se: f64,
    pub variance_se: f64,
    pub variance_relative: f64,
}

impl Default for MomentSuite {
    fn default() -> Self {
        Self {
            instances: 20,
            num_samples: 100_000,
            min_alpha0: 100.0,
            width: 2,
            pits: 2,
            actions: 2,
            horizons: vec![2, 3],
            mean_se: 4.0,
            variance_se: 4.0,
            variance_relative: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSuite {
    /// Leading draws of each instance's moment sample.
    pub draws: usize,
    pub levels: Vec<f64>,
    pub se: f64,
}

impl Default for CoverageSuite {
    fn default() -> Self {
        Self {
            draws: 10_000,
            levels: vec![0.5, 0.9, 0.99],
            se: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Suite {
    pub n_transitions: u64,
    pub replications: usize,
    pub seed: u64,
    pub mean_window: [f64; 2],
    pub variance_window: [f64; 2],
}

impl Default for Theorem1Suite {
    fn default() -> Self {
        Self {
            n_transitions: 1000,
            replications: 2000,
            seed: 7,
            mean_window: [-0.1, 0.1],
            variance_window: [0.7, 1.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSuite {
    pub checks: Vec<CheckKind>,
    pub seed: u64,
    pub gradient: GradientSuite,
    pub matrix: MatrixSuite,
    pub exact: ExactSuite,
    pub moments: MomentSuite,
    pub coverage: CoverageSuite,
    pub theorem1: Theorem1Suite,
}

impl Default for ValidationSuite {
    fn default() -> Self {
        Self {
            checks: CheckKind::ALL.to_vec(),
            seed: 2024,
            gradient: GradientSuite::default(),
            matrix: MatrixSuite::default(),
            exact: ExactSuite::default(),
            moments: MomentSuite::default(),
            coverage: CoverageSuite::default(),
            theorem1: Theorem1Suite::default(),
        }
    }
}

impl ValidationSuite {
    pub fn parse(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let suite: Self = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| HarnessError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.runs(CheckKind::Moments) || self.runs(CheckKind::Coverage) {
            if self.moments.num_samples < MIN_MC_SAMPLES {
                return bad(format!(
                    "moments.num_samples = {} is below the minimum {MIN_MC_SAMPLES}",
                    self.moments.num_samples
                ));
            }
            if self.moments.horizons.is_empty() {
                return bad("moments.horizons is empty".into());
            }
        }
        if self.runs(CheckKind::Coverage) {
            if self.coverage.draws < 2 || self.coverage.draws > self.moments.num_samples {
                return bad(format!(
                    "coverage.draws = {} must lie in [2, moments.num_samples]",
                    self.coverage.draws
                ));
            }
            if let Some(c) = self.coverage.levels.iter().find(|c| !(0.0..1.0).contains(*c)) {
                return bad(format!("coverage level {c} outside [0, 1)"));
            }
        }
        if self.runs(CheckKind::Gradient) && !(self.gradient.step > 0.0) {
            return bad("gradient.step must be positive".into());
        }
        if self.runs(CheckKind::Theorem1) && self.theorem1.replications < 2 {
            return bad("theorem1.replications must be at least 2".into());
        }
        Ok(())
    }

    pub fn runs(&self, kind: CheckKind) -> bool {
        self.checks.contains(&kind)
    }

    /// Copy that runs only `kinds`.
    pub fn only(&self, kinds: &[CheckKind]) -> Self {
        Self {
            checks: kinds.to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub passed: bool,
    /// The pass condition with its tolerance.
    pub criterion: String,
    pub measured: BTreeMap<String, f64>,
    pub seconds: f64,
}

impl CheckResult {
    /// Check name, criterion, measurements and runtime.
    pub fn describe(&self) -> String {
        let measured: Vec<String> = self.measured.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        format!("{:?}: {} | {} ({:.1}s)", self.check, self.criterion, measured.join(" "), self.seconds)
    }

    /// [`describe`](Self::describe) prefixed with `PASS` or `FAIL`.
    pub fn line(&self) -> String {
        format!("{} {}", if self.passed { "PASS" } else { "FAIL" }, self.describe())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn measured<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn timed(check: CheckKind, f: impl FnOnce() -> Result<(bool, String, BTreeMap<String, f64>)>) -> Result<CheckResult> {
    let start = Instant::now();
    let (passed, criterion, measured) = f()?;
    Ok(CheckResult {
        check,
        passed,
        criterion,
        measured,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Reverse-mode gradient against central differences of the matrix form.
pub fn check_gradient(suite: &GradientSuite, seed: u64) -> Result<CheckResult> {
    timed(CheckKind::Gradient, || {
        let worst = (0..suite.instances)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let inst = oracle::random_instance(&mut rng, suite.max_states, suite.max_actions, suite.max_horizon);
                let moments = inst.belief.moments();
                let (m, s) = (inst.horizon, inst.state);
                let bp = risk::risk_backprop(&moments, &inst.obs, m, s)?;
                let kernel = ExplicitKernel::from_model(&moments);
                let mut worst = 0.0f64;
                for a in 0..inst.belief.num_actions() {
                    let a = ActionId(a);
                    let grad = risk::risk_gradient(&moments, &inst.obs, m, s, a, &bp.policy)?;
                    let fd = oracle::finite_difference_gradient(&kernel, &inst.obs, m, s, a, &bp.policy, suite.step)?;
                    for ((i, b, j), numeric) in fd {
                        let err = (grad.get(i, b, j) - numeric).abs() / numeric.abs().max(suite.floor);
                        worst = worst.max(err);
                    }
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok((
            worst <= suite.tolerance,
            format!(
                "{} instances, |analytic - fd| / max(|fd|, {:e}) <= {:e}",
                suite.instances, suite.floor, suite.tolerance
            ),
            measured([("worst_relative_error", worst)]),
        ))
    })
}

/// Back-propagation against the product of explicit transition matrices.
pub fn check_matrix(suite: &MatrixSuite, seed: u64) -> Result<CheckResult> {
    timed(CheckKind::Matrix, || {
        let worst = (0..suite.instances)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let inst = oracle::random_instance(&mut rng, 6, 3, 3);
                let moments = inst.belief.moments();
                let bp = risk::risk_backprop(&moments, &inst.obs, inst.horizon, inst.state)?;
                let kernel = ExplicitKernel::from_model(&moments);
                let matrix = oracle::matrix_risk(&kernel, &inst.obs, inst.horizon, inst.state, &bp.policy)?;
                Ok(bp.rho_bar.iter().zip(&matrix).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok((
            worst <= suite.tolerance,
            format!("{} instances, max |backprop - matrix| <= {:e}", suite.instances, suite.tolerance),
            measured([("worst_absolute_error", worst)]),
        ))
    })
}

/// One-step variance against the Beta variance of the unsafe mass.
pub fn check_exact(suite: &ExactSuite, seed: u64) -> Result<CheckResult> {
    timed(CheckKind::Exact, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..suite.rows {
            let n = rng.random_range(2..=8);
            let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..50.0)).collect();
            let mut pits: Vec<usize> = (1..n).filter(|_| rng.random_bool(0.5)).collect();
            if pits.is_empty() {
                pits.push(n - 1);
            }
            let mut rows = vec![alpha.iter().enumerate().map(|(j, &a)| (StateId(j), a)).collect::<Vec<_>>()];
            rows.extend((1..n).map(|s| vec![(StateId(s), 1.0)]));
            let belief = DirichletBelief::from_rows(n, 1, rows)?;
            let obs = Observation::from_sets(StateId(0), 1, (0..n).map(StateId), pits.iter().map(|&p| StateId(p)));
            let assessment = risk::assess(&belief.moments(), &obs, 1, StateId(0), 0.0)?;
            let a0: f64 = alpha.iter().sum();
            let u: f64 = pits.iter().map(|&p| alpha[p]).sum();
            let exact = u * (a0 - u) / (a0 * a0 * (a0 + 1.0));
            worst = worst.max((assessment.actions[0].v_bar - exact).abs() / exact);
        }
        Ok((
            worst <= suite.tolerance,
            format!("{} rows, relative error of the one-step variance <= {:e}", suite.rows, suite.tolerance),
            measured([("worst_relative_error", worst)]),
        ))
    })
}

/// Per-query Monte-Carlo comparison, shared by the moment and coverage
/// checks.
#[derive(Debug, Clone)]
struct McQuery {
    rho_bar: f64,
    v_bar: f64,
    estimate: McMomentEstimate,
    /// Coverage frequency per level.
    coverage: Vec<f64>,
}

fn mc_queries(suite: &ValidationSuite) -> Result<Vec<McQuery>> {
    let ms = &suite.moments;
    let per_instance = (0..ms.instances)
        .into_par_iter()
        .map(|i| -> Result<Vec<McQuery>> {
            let mut rng = ChaCha8Rng::seed_from_u64(suite.seed.wrapping_add(i as u64));
            let horizon = ms.horizons[i % ms.horizons.len()];
            let inst = oracle::layered_instance(&mut rng, horizon, ms.width, ms.pits, ms.actions, ms.min_alpha0);
            let moments = inst.belief.moments();
            let (m, s) = (inst.horizon, inst.state);
            let bp = risk::risk_backprop(&moments, &inst.obs, m, s)?;
            let mut out = Vec::new();
            for a in 0..ms.actions {
                let a = ActionId(a);
                let grad = risk::risk_gradient(&moments, &inst.obs, m, s, a, &bp.policy)?;
                let v_bar = risk::variance_approx(&grad, &moments);
                let rho_bar = bp.rho_bar[a.0];
                let samples =
                    oracle::sample_risks(&inst.belief, &inst.obs, m, s, a, &bp.policy, ms.num_samples, &mut rng)?;
                let head = &samples[..suite.coverage.draws.min(samples.len())];
                let coverage = suite
                    .coverage
                    .levels
                    .iter()
                    .map(|&c| Ok(oracle::coverage(head, risk::cantelli_phi(rho_bar, v_bar, c)?)))
                    .collect::<Result<Vec<f64>>>()?;
                out.push(McQuery {
                    rho_bar,
                    v_bar,
                    estimate: McMomentEstimate::from_samples(&samples)?,
                    coverage,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

fn check_moments(suite: &ValidationSuite, queries: &[McQuery], seconds: f64) -> CheckResult {
    let ms = &suite.moments;
    let mut worst_mean_z = 0.0f64;
    let mut worst_var_excess = 0.0f64;
    let mut worst_var_rel = 0.0f64;
    let mut passed = true;
    for q in queries {
        let e = &q.estimate;
        let z = (q.rho_bar - e.mean).abs() / e.mean_se;
        worst_mean_z = worst_mean_z.max(z);
        let diff = (q.v_bar - e.variance).abs();
        let allowed = (ms.variance_se * e.variance_se).max(ms.variance_relative * e.variance);
        worst_var_excess = worst_var_excess.max(diff / allowed);
        worst_var_rel = worst_var_rel.max(diff / e.variance);
        passed &= z <= ms.mean_se && diff <= allowed;
    }
    CheckResult {
        check: CheckKind::Moments,
        passed,
        criterion: format!(
            "{} queries, {} draws: |rho_bar - mc| <= {} se and |v_bar - mc| <= max({} se, {}% relative)",
            queries.len(),
            ms.num_samples,
            ms.mean_se,
            ms.variance_se,
            ms.variance_relative * 100.0
        ),
        measured: measured([
            ("worst_mean_z", worst_mean_z),
            ("worst_variance_ratio_to_allowance", worst_var_excess),
            ("worst_variance_relative_error", worst_var_rel),
        ]),
        seconds,
    }
}

fn check_coverage(suite: &ValidationSuite, queries: &[McQuery], seconds: f64) -> CheckResult {
    let cs = &suite.coverage;
    let n = cs.draws as f64;
    let mut passed = true;
    let mut stats = BTreeMap::new();
    for (k, &c) in cs.levels.iter().enumerate() {
        let se = (c * (1.0 - c) / n).sqrt();
        let lowest = queries.iter().map(|q| q.coverage[k]).fold(f64::INFINITY, f64::min);
        passed &= lowest >= c - cs.se * se;
        stats.insert(format!("min_coverage_at_{c}"), lowest);
    }
    CheckResult {
        check: CheckKind::Coverage,
        passed,
        criterion: format!(
            "{} queries, {} draws: frequency of risk <= phi(C) >= C - {} se for C in {:?}",
            queries.len(),
            cs.draws,
            cs.se,
            cs.levels
        ),
        measured: stats,
        seconds,
    }
}

/// The fixed five-state instance for the asymptotic-normality check: two
/// actions, state 4 unsafe, state 3 a safe sink, full-support uniform prior,
/// everything observed from state 0.
pub fn theorem1_instance() -> Result<(TabularMdp, Arc<PriorTemplate>, Observation)> {
    let s = StateId;
    let sink = |k: usize| vec![vec![(s(k), 1.0)]; 2];
    let kernel = vec![
        vec![vec![(s(1), 0.6), (s(2), 0.3), (s(4), 0.1)], vec![(s(2), 0.5), (s(3), 0.3), (s(4), 0.2)]],
        vec![vec![(s(1), 0.5), (s(3), 0.3), (s(4), 0.2)], vec![(s(3), 0.9), (s(4), 0.1)]],
        vec![vec![(s(2), 0.6), (s(3), 0.1), (s(4), 0.3)], vec![(s(0), 0.2), (s(3), 0.4), (s(4), 0.4)]],
        sink(3),
        sink(4),
    ];
    let mdp = TabularMdp::new(5, 2, kernel, s(0))?.with_unsafe([s(4)])?;
    let prior = Arc::new(PriorTemplate::full_support(5, 2, 1.0)?);
    let obs = mdp.observe(s(0), 2)?;
    Ok((mdp, prior, obs))
}

pub fn check_theorem1(suite: &Theorem1Suite) -> Result<CheckResult> {
    timed(CheckKind::Theorem1, || {
        let (mdp, prior, obs) = theorem1_instance()?;
        let sample = oracle::theorem1_residuals::<ChaCha8Rng>(
            &mdp,
            &prior,
            &obs,
            2,
            StateId(0),
            ActionId(0),
            suite.n_transitions,
            suite.replications,
            suite.seed,
        )?;
        let (mean, var) = (sample.mean(), sample.variance());
        let [lo, hi] = suite.mean_window;
        let [vlo, vhi] = suite.variance_window;
        Ok((
            (lo..=hi).contains(&mean) && (vlo..=vhi).contains(&var),
            format!(
                "n = {}, {} replications: residual mean in [{lo}, {hi}], variance in [{vlo}, {vhi}]",
                suite.n_transitions, suite.replications
            ),
            measured([("mean", mean), ("variance", var), ("excluded", sample.excluded as f64)]),
        ))
    })
}

/// Runs the selected checks in a fixed order.
pub fn run_validation(suite: &ValidationSuite) -> Result<ValidationReport> {
    suite.validate()?;
    let mut checks = Vec::new();
    let mut kinds = suite.checks.clone();
    kinds.sort();
    kinds.dedup();
    let mut mc: Option<(Vec<McQuery>, f64)> = None;
    for kind in kinds {
        let result = match kind {
            CheckKind::Gradient => check_gradient(&suite.gradient, suite.seed)?,
            CheckKind::Matrix => check_matrix(&suite.matrix, suite.seed)?,
            CheckKind::Exact => check_exact(&suite.exact, suite.seed)?,
            CheckKind::Moments | CheckKind::Coverage => {
                if mc.is_none() {
                    let start = Instant::now();
                    let queries = mc_queries(suite)?;
                    mc = Some((queries, start.elapsed().as_secs_f64()));
                }
                let (queries, seconds) = mc.as_ref().expect("computed above");
                if kind == CheckKind::Moments {
                    check_moments(suite, queries, *seconds)
                } else {
                    check_coverage(suite, queries, *seconds)
                }
            }
            CheckKind::Theorem1 => check_theorem1(&suite.theorem1)?,
        };
        checks.push(result);
    }
    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_defaults_and_field_errors() {
        let suite = ValidationSuite::parse("{}").unwrap();
        assert_eq!(suite, ValidationSuite::default());
        let err = ValidationSuite::parse(r#"{"moments": {"num_samples": 10}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ValidationSuite::parse(r#"{"matrix": {"instancs": 10}}"#).unwrap_err();
        assert!(err.to_string().contains("matrix"), "{err}");
        // sample minimum only matters when the Monte-Carlo checks run
        ValidationSuite::parse(r#"{"checks": ["matrix"], "moments": {"num_samples": 10}}"#).unwrap();
    }

    #[test]
    fn small_suite_passes() {
        let suite = ValidationSuite {
            gradient: GradientSuite {
                instances: 10,
                ..Default::default()
            },
            matrix: MatrixSuite {
                instances: 10,
                ..Default::default()
            },
            exact: ExactSuite {
                rows: 10,
                ..Default::default()
            },
            moments: MomentSuite {
                instances: 2,
                num_samples: 20_000,
                ..Default::default()
            },
            theorem1: Theorem1Suite {
                replications: 200,
                mean_window: [-0.3, 0.3],
                variance_window: [0.6, 1.4],
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run_validation(&suite).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}", c.line());
        }
        assert_eq!(report.checks.len(), 6);
    }

    #[test]
    fn restricted_suite_reports_only_those_checks() {
        let suite = ValidationSuite::default().only(&[CheckKind::Matrix]);
        let suite = ValidationSuite {
            matrix: MatrixSuite {
                instances: 5,
                ..Default::default()
            },
            ..suite
        };
        let report = run_validation(&suite).unwrap();
        assert_eq!(report.checks.len(), 1);
        assert_eq!(report.checks[0].check, CheckKind::Matrix);
    }
}
