//! Experiment configuration, Monte Carlo drivers, exact bound arithmetic and
//! the on-disk formats used by the command-line tool.
//!
//! Failure-rate CSV columns: `epsilon, trials, deviations, points, p_hat,
//! ci_lo, ci_hi, bound_4r_eps`. `points` counts observed sites (trials times
//! sites per trial), `deviations` those where the noisy and ideal
//! trajectories disagree, and the interval is the 95% Wilson score interval
//! for `p_hat = deviations / points`.
//!
//! Trajectory dumps are text:
//!
//! ```text
//! toom-trajectory 1
//! m <m> n <N> periodic <0|1> t_max <T> alphabet <S> seed <seed> epsilon <eps>
//! rule <S^3 table entries>
//! t 0
//! <m lines of m states: rows a = 0..m, columns b = 0..m, for u = 0>
//! <... the same for u = 1..N>
//! t 1
//! ...
//! ```
//!
//! Only the noisy trajectory is stored; the ideal trajectory and the noise
//! set are recomputed from its first frame and the rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deviation::{check_propagation, compute_xi, lift, CoveringWindow};
use crate::error::{Error, Result};
use crate::explanation::{build_explanation, spanning, verify_explanation, Explanation};
use crate::geometry::{create_spanned, prism_check, size, SpannedSet};
use crate::lattice::{Configuration, LatticeShape, SpaceTimeConfiguration, SpaceTimePoint};
use crate::noise_sim::{evolve, sample_with_ideal, FaultMode, NoiseParams, TrajectoryPair};
use crate::rules::{Rule1D, Rule3D};
use crate::sitegraph::window_graph;
use crate::wtrees::{count_weighted_subtrees, counting_bound, one_cut, random_tree, separate};

/// The graph degree of the covering space-time graph.
pub const DEGREE: u64 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSource {
    /// `toom-projection`: the line rule keeps the middle cell.
    Builtin(String),
    /// A rule table file.
    File(PathBuf),
}

impl Default for RuleSource {
    fn default() -> Self {
        RuleSource::Builtin("toom-projection".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    /// Deviations at the last time step.
    #[default]
    FinalTime,
    /// Deviations at every time step.
    AllTimes,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Outputs {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    /// Where counterexamples are written when a check fails.
    pub dump_dir: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

fn default_alphabet() -> u8 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n_line: usize,
    #[serde(default = "default_true")]
    pub line_periodic: bool,
    pub t_max: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: u8,
    /// States along the line; all zeros when absent.
    #[serde(default)]
    pub initial_line: Option<Vec<u8>>,
    #[serde(default)]
    pub rule: RuleSource,
    #[serde(default)]
    pub fault_mode: FaultMode,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub observe: Observation,
    /// Upper limit on explained deviations per trial; all when absent.
    #[serde(default)]
    pub max_trees_per_trial: Option<usize>,
    #[serde(default)]
    pub output: Outputs,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        if self.trials == 0 {
            return Err(Error::Precondition("trials must be at least 1".into()));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Precondition("no epsilon values".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidNoise(format!("epsilon {e} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<LatticeShape> {
        LatticeShape::new(self.m, self.n_line, self.line_periodic, self.t_max)
    }

    pub fn rule(&self) -> Result<Rule3D> {
        let line = match &self.rule {
            RuleSource::Builtin(name) if name == "toom-projection" => {
                Rule1D::middle_projection(self.alphabet)?
            }
            RuleSource::Builtin(name) => {
                return Err(Error::InvalidRule(format!("unknown builtin {name:?}")))
            }
            RuleSource::File(path) => std::fs::read_to_string(path)?.parse()?,
        };
        if line.alphabet() != self.alphabet {
            return Err(Error::InvalidRule(format!(
                "rule alphabet {} differs from the configured {}",
                line.alphabet(),
                self.alphabet
            )));
        }
        Ok(Rule3D::new(line))
    }

    pub fn initial(&self) -> Result<Configuration> {
        let shape = self.shape()?;
        match &self.initial_line {
            Some(line) => Configuration::from_line(shape, self.alphabet, line),
            None => Configuration::uniform(shape, self.alphabet, 0),
        }
    }

    pub fn noise(&self, epsilon: f64, trial: usize) -> Result<NoiseParams> {
        NoiseParams::new(
            epsilon,
            self.seed.wrapping_add(trial as u64),
            self.fault_mode,
        )
    }
}

/// 95% Wilson score interval for `successes` out of `n`.
pub fn wilson(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub epsilon: f64,
    pub trials: usize,
    pub deviations: u64,
    pub points: u64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bound_4r_eps: f64,
}

fn observed_sites(shape: &LatticeShape, observe: Observation) -> impl Iterator<Item = usize> {
    let first = match observe {
        Observation::FinalTime => shape.t_max(),
        Observation::AllTimes => 0,
    };
    first..=shape.t_max()
}

/// Monte Carlo estimate of the probability that a site deviates, one row
/// per epsilon. Trial `i` uses seed `seed + i` at every epsilon.
pub fn estimate_failure(config: &ExperimentConfig) -> Result<Vec<EstimateRow>> {
    config.validate()?;
    let shape = config.shape()?;
    let rule = config.rule()?;
    let ideal = evolve(&config.initial()?, &rule);
    let times: Vec<usize> = observed_sites(&shape, config.observe).collect();
    let mut rows = Vec::with_capacity(config.epsilons.len());
    for &epsilon in &config.epsilons {
        let deviations = (0..config.trials)
            .into_par_iter()
            .map(|trial| -> Result<u64> {
                let pair = sample_with_ideal(&ideal, &rule, &config.noise(epsilon, trial)?)?;
                Ok(times
                    .iter()
                    .map(|&t| {
                        let a = pair.ideal.frame(t).expect("t in range").cells();
                        let b = pair.perturbed.frame(t).expect("t in range").cells();
                        a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
                    })
                    .sum())
            })
            .try_reduce(|| 0, |x, y| Ok(x + y))?;
        let points = (config.trials * times.len() * shape.cells()) as u64;
        let (ci_lo, ci_hi) = wilson(deviations, points);
        rows.push(EstimateRow {
            epsilon,
            trials: config.trials,
            deviations,
            points,
            p_hat: deviations as f64 / points as f64,
            ci_lo,
            ci_hi,
            bound_4r_eps: 4.0 * DEGREE as f64 * epsilon,
        });
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub n: usize,
    pub edges: usize,
    pub arrows: usize,
    pub forks: usize,
    pub count: usize,
}

/// Aggregate of explanation-tree builds; merging is associative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplainStats {
    pub trials: usize,
    pub trees: usize,
    pub verifier_failures: usize,
    pub propagation_violations: usize,
    pub histogram: Vec<HistogramRow>,
    /// Largest `edges / (n - 1)` seen, as `p/q`.
    pub max_edge_ratio: Option<String>,
    pub max_arrow_ratio: Option<String>,
    pub refinements: usize,
    /// Index `i` counts refinements that added `i` arrows.
    pub arrows_per_refinement: [usize; 4],
    pub excuse_size_identity_holds: usize,
    pub spanning_identity_holds: usize,
    pub degenerate_nodes: usize,
    pub head_only_cause_edges: usize,
    /// Forks whose spanned-set span is below the full 3 (scaled).
    pub forks_below_full_span: usize,
    pub fork_span_total: i64,
    pub fork_count_total: usize,
}

impl ExplainStats {
    fn ratio_max(a: &Option<String>, b: &Option<String>) -> Option<String> {
        let parse = |s: &String| s.parse::<Ratio<u64>>().expect("stored ratios parse");
        match (a, b) {
            (Some(x), Some(y)) => Some(if parse(x) >= parse(y) {
                x.clone()
            } else {
                y.clone()
            }),
            (x, None) => x.clone(),
            (None, y) => y.clone(),
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        let mut hist: BTreeMap<(usize, usize, usize, usize), usize> = BTreeMap::new();
        for row in self.histogram.iter().chain(&other.histogram) {
            *hist
                .entry((row.n, row.edges, row.arrows, row.forks))
                .or_default() += row.count;
        }
        self.histogram = hist
            .into_iter()
            .map(|((n, edges, arrows, forks), count)| HistogramRow {
                n,
                edges,
                arrows,
                forks,
                count,
            })
            .collect();
        self.max_edge_ratio = Self::ratio_max(&self.max_edge_ratio, &other.max_edge_ratio);
        self.max_arrow_ratio = Self::ratio_max(&self.max_arrow_ratio, &other.max_arrow_ratio);
        self.trials += other.trials;
        self.trees += other.trees;
        self.verifier_failures += other.verifier_failures;
        self.propagation_violations += other.propagation_violations;
        self.refinements += other.refinements;
        for i in 0..4 {
            self.arrows_per_refinement[i] += other.arrows_per_refinement[i];
        }
        self.excuse_size_identity_holds += other.excuse_size_identity_holds;
        self.spanning_identity_holds += other.spanning_identity_holds;
        self.degenerate_nodes += other.degenerate_nodes;
        self.head_only_cause_edges += other.head_only_cause_edges;
        self.forks_below_full_span += other.forks_below_full_span;
        self.fork_span_total += other.fork_span_total;
        self.fork_count_total += other.fork_count_total;
        self
    }

    fn record(&mut self, ex: &Explanation) {
        let tree = &ex.tree;
        let n = tree.weight();
        let (arrows, forks) = (tree.arrow_count(), tree.fork_count());
        self.trees += 1;
        self.histogram.push(HistogramRow {
            n,
            edges: arrows + forks,
            arrows,
            forks,
            count: 1,
        });
        if n > 1 {
            let edge = Some(Ratio::new((arrows + forks) as u64, (n - 1) as u64).to_string());
            let arrow = Some(Ratio::new(arrows as u64, (n - 1) as u64).to_string());
            self.max_edge_ratio = Self::ratio_max(&self.max_edge_ratio, &edge);
            self.max_arrow_ratio = Self::ratio_max(&self.max_arrow_ratio, &arrow);
        }
        for r in &ex.stats.refinements {
            self.refinements += 1;
            self.arrows_per_refinement[r.arrows_added.min(3)] += 1;
            self.excuse_size_identity_holds += usize::from(r.excuse_span - r.node_span == 3);
            self.spanning_identity_holds += usize::from(r.spanning_total == r.excuse_span);
            self.degenerate_nodes += r.degenerate_nodes;
            self.head_only_cause_edges += r.head_only_edges;
            self.fork_span_total += r.fork_span_total;
            self.fork_count_total += r.forks_added;
            self.forks_below_full_span += r.forks_below_full_span;
        }
    }
}

/// Builds and verifies an explanation tree for every observed deviation
/// outside the noise set in one trajectory pair. A failing build or
/// verification is written to `dump_dir` (when given) and returned as an
/// error.
pub fn explain_pair(
    pair: &TrajectoryPair,
    rule: &Rule3D,
    observe: Observation,
    max_trees: Option<usize>,
    dump_dir: Option<&Path>,
    tag: &str,
) -> Result<ExplainStats> {
    let shape = *pair.shape();
    let xi = compute_xi(pair);
    let mut stats = ExplainStats {
        trials: 1,
        ..Default::default()
    };
    let violations = check_propagation(&xi, &pair.noise);
    stats.propagation_violations = violations.len();
    if let Some(v) = violations.first() {
        return Err(Error::NoExcuse(*v));
    }
    let view = lift(&xi, &pair.noise, CoveringWindow::default_for(&shape))?;
    let mut roots: Vec<SpaceTimePoint> = Vec::new();
    for t in observed_sites(&shape, observe) {
        roots.extend(xi.deviations_at(t).filter(|p| !pair.noise.contains(*p)));
    }
    if let Some(limit) = max_trees {
        roots.truncate(limit);
    }
    for root in roots {
        let ex = match build_explanation(&view, root) {
            Ok(ex) => ex,
            Err(e) => {
                if let Some(dir) = dump_dir {
                    let path = dir.join(format!(
                        "counterexample-{tag}-{}-{}-{}-{}.trajectory",
                        root.a, root.b, root.u, root.t
                    ));
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(&path, write_trajectory(pair, rule, None))?;
                }
                return Err(e);
            }
        };
        let cert = verify_explanation(&ex.tree, |p| pair.noise.contains(*p));
        if !cert.passed() {
            stats.verifier_failures += 1;
            if let Some(dir) = dump_dir {
                std::fs::create_dir_all(dir)?;
                let mut text = ex.tree.to_text();
                for (clause, msg) in &cert.failures {
                    let _ = writeln!(text, "# failed {clause:?}: {msg}");
                }
                std::fs::write(dir.join(format!("counterexample-{tag}.tree")), text)?;
                std::fs::write(
                    dir.join(format!("counterexample-{tag}.trajectory")),
                    write_trajectory(pair, rule, None),
                )?;
            }
            return Err(Error::Invariant(format!(
                "tree for {root} failed: {:?}",
                cert.failures
            )));
        }
        stats.record(&ex);
    }
    stats = ExplainStats::default().merge(stats);
    Ok(stats)
}

/// Runs [`explain_pair`] on every trial at every epsilon.
pub fn explain_run(config: &ExperimentConfig) -> Result<ExplainStats> {
    config.validate()?;
    let rule = config.rule()?;
    let ideal = evolve(&config.initial()?, &rule);
    let dump = config.output.dump_dir.as_deref();
    let mut total = ExplainStats::default();
    for &epsilon in &config.epsilons {
        let part = (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let params = config.noise(epsilon, trial)?;
                let pair = sample_with_ideal(&ideal, &rule, &params)?;
                let tag = format!("eps{epsilon}-seed{}", params.seed());
                explain_pair(
                    &pair,
                    &rule,
                    config.observe,
                    config.max_trees_per_trial,
                    dump,
                    &tag,
                )
            })
            .try_reduce(ExplainStats::default, |a, b| Ok(a.merge(b)))?;
        total = total.merge(part);
    }
    Ok(total)
}

/// Parses `p/q`, a decimal such as `0.002`, or scientific notation such as
/// `1e-13` into an exact rational.
pub fn parse_rational(text: &str) -> Result<BigRational> {
    let s = text.trim();
    let bad = || Error::Parse(format!("not a number: {text:?}"));
    if let Some((p, q)) = s.split_once('/') {
        let p: BigInt = p.trim().parse().map_err(|_| bad())?;
        let q: BigInt = q.trim().parse().map_err(|_| bad())?;
        if q.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(p, q));
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty()
        || !int_part
            .chars()
            .chain(frac_part.chars())
            .all(|c| c.is_ascii_digit())
    {
        return Err(bad());
    }
    let all: BigInt = format!("0{int_part}{frac_part}")
        .parse()
        .map_err(|_| bad())?;
    let shift = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10u8);
    let mut value = BigRational::from_integer(all);
    if shift >= 0 {
        value *= BigRational::from_integer(num_traits::pow(ten, shift as usize));
    } else {
        value /= BigRational::from_integer(num_traits::pow(ten, (-shift) as usize));
    }
    Ok(if negative { -value } else { value })
}

/// Rationals `lo <= x^(1/k) <= hi` with `hi - lo <= 2^-bits`, for `x >= 0`.
pub fn root_bracket(x: &BigRational, k: u32, bits: u32) -> (BigRational, BigRational) {
    let mut lo = BigRational::zero();
    let mut hi = if x > &BigRational::one() {
        x.clone()
    } else {
        BigRational::one()
    };
    let eps = BigRational::new(BigInt::one(), BigInt::one() << bits);
    let two = BigRational::from_integer(BigInt::from(2u8));
    while &hi - &lo > eps {
        let mid = (&lo + &hi) / &two;
        if num_traits::pow(mid.clone(), k as usize) <= *x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

/// The quantities of the small-noise theorem at one epsilon, exact where
/// the expressions are rational.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub r: u64,
    pub epsilon: BigRational,
    /// `1 / (32 r^8)`.
    pub threshold: BigRational,
    pub threshold_ok: bool,
    /// `4 r epsilon`.
    pub infinite_bound: BigRational,
    /// Bracket of `(t N) 2r m^2 (2 r^2 epsilon^(1/12))^m`.
    pub finite_extra: (BigRational, BigRational),
    /// `2 r^2 epsilon^(1/12)`, bracketed.
    pub tail_base: (BigRational, BigRational),
    /// `16 r^8 epsilon < 1/2`.
    pub geometric_premise: bool,
    /// `2 r epsilon / (1 - 16 r^8 epsilon)` when the denominator is positive.
    pub geometric_series: Option<BigRational>,
    /// The premise implies the series is below `4 r epsilon`.
    pub geometric_check: bool,
}

pub fn bound_report(
    r: u64,
    epsilon: &BigRational,
    m: u64,
    n_line: u64,
    t: u64,
) -> Result<BoundReport> {
    if r == 0 {
        return Err(Error::Precondition("r must be at least 1".into()));
    }
    if epsilon.is_negative() || epsilon.is_zero() || *epsilon >= BigRational::one() {
        return Err(Error::Precondition(format!(
            "epsilon {epsilon} outside (0, 1)"
        )));
    }
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    let r_q = int(r);
    let r8 = num_traits::pow(r_q.clone(), 8);
    let threshold = (int(32) * &r8).recip();
    let infinite_bound = int(4) * &r_q * epsilon;
    let (root_lo, root_hi) = root_bracket(epsilon, 12, 96);
    let coefficient = int(t) * int(n_line) * int(2) * &r_q * int(m) * int(m);
    let base_factor = int(2) * &r_q * &r_q;
    let tail_base = (&base_factor * &root_lo, &base_factor * &root_hi);
    let finite_extra = (
        &coefficient * num_traits::pow(tail_base.0.clone(), m as usize),
        &coefficient * num_traits::pow(tail_base.1.clone(), m as usize),
    );
    let q = int(16) * &r8 * epsilon;
    let geometric_premise = q < BigRational::new(BigInt::one(), BigInt::from(2u8));
    let geometric_series =
        (q < BigRational::one()).then(|| int(2) * &r_q * epsilon / (BigRational::one() - &q));
    let geometric_check = !geometric_premise
        || geometric_series
            .as_ref()
            .is_some_and(|s| *s < infinite_bound);
    Ok(BoundReport {
        r,
        epsilon: epsilon.clone(),
        threshold_ok: *epsilon < threshold,
        threshold,
        infinite_bound,
        finite_extra,
        tail_base,
        geometric_premise,
        geometric_series,
        geometric_check,
    })
}

/// JSON-friendly view of a [`BoundReport`]: exact values as `p/q` strings
/// next to floating-point approximations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSummary {
    pub r: u64,
    pub epsilon: String,
    pub threshold: String,
    pub threshold_approx: f64,
    pub threshold_ok: bool,
    pub infinite_bound: String,
    pub infinite_bound_approx: f64,
    pub finite_extra_lo_approx: f64,
    pub finite_extra_hi_approx: f64,
    pub tail_base_approx: f64,
    pub geometric_premise: bool,
    pub geometric_check: bool,
}

impl BoundReport {
    pub fn summary(&self) -> BoundSummary {
        let f = |x: &BigRational| x.to_f64().unwrap_or(f64::NAN);
        BoundSummary {
            r: self.r,
            epsilon: self.epsilon.to_string(),
            threshold: self.threshold.to_string(),
            threshold_approx: f(&self.threshold),
            threshold_ok: self.threshold_ok,
            infinite_bound: self.infinite_bound.to_string(),
            infinite_bound_approx: f(&self.infinite_bound),
            finite_extra_lo_approx: f(&self.finite_extra.0),
            finite_extra_hi_approx: f(&self.finite_extra.1),
            tail_base_approx: f(&self.tail_base.0),
            geometric_premise: self.geometric_premise,
            geometric_check: self.geometric_check,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub estimate: EstimateRow,
    pub threshold_ok: bool,
    pub finite_extra_hi: f64,
}

/// Failure estimates over the configured epsilon grid, with the finite-size
/// bound term next to each.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let rows = estimate_failure(config)?;
    rows.into_iter()
        .map(|estimate| {
            let (threshold_ok, finite_extra_hi) =
                if estimate.epsilon > 0.0 && estimate.epsilon < 1.0 {
                    let eps = parse_rational(&format!("{:e}", estimate.epsilon))?;
                    let report = bound_report(
                        DEGREE,
                        &eps,
                        config.m as u64,
                        config.n_line as u64,
                        config.t_max as u64,
                    )?;
                    (
                        report.threshold_ok,
                        report.finite_extra.1.to_f64().unwrap_or(f64::INFINITY),
                    )
                } else {
                    (false, f64::NAN)
                };
            Ok(SweepRow {
                estimate,
                threshold_ok,
                finite_extra_hi,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub graph: String,
    pub root: usize,
    pub k: usize,
    pub max_degree: usize,
    pub r: u64,
    pub oracle: String,
    pub bound: String,
    pub holds: bool,
}

/// A random simple graph on `n` nodes with every degree at most `max_degree`.
pub fn random_bounded_graph<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    max_degree: usize,
    tries: usize,
) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for _ in 0..tries {
        let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if x != y && !adj[x].contains(&y) && adj[x].len() < max_degree && adj[y].len() < max_degree
        {
            adj[x].push(y);
            adj[y].push(x);
        }
    }
    adj
}

fn count_row(graph: &str, adj: &[Vec<usize>], root: usize, k: usize, r: u64) -> Result<CountRow> {
    let oracle = count_weighted_subtrees(adj, root, k)?;
    let bound = counting_bound(r, k as u32);
    Ok(CountRow {
        graph: graph.into(),
        root,
        k,
        max_degree: adj.iter().map(Vec::len).max().unwrap_or(0),
        r,
        holds: oracle <= bound,
        oracle: oracle.to_string(),
        bound: bound.to_string(),
    })
}

/// Oracle counts next to the bound: the covering graph on a 5x5x3x2 window
/// (degree bound 24) up to `window_k` edges, and `graphs` random graphs of
/// degree at most 6 up to `random_k` edges (bound taken at their actual
/// maximum degree).
pub fn count_trees_table(
    seed: u64,
    window_k: usize,
    graphs: usize,
    random_k: usize,
) -> Result<Vec<CountRow>> {
    let mut rows = Vec::new();
    let (points, adj) = window_graph(SpaceTimePoint::new(0, 0, 0, 0), (5, 5, 3, 2));
    let root = points
        .iter()
        .position(|p| *p == SpaceTimePoint::new(2, 2, 1, 1))
        .expect("centre lies in the window");
    for k in 0..=window_k {
        rows.push(count_row("window-5x5x3x2", &adj, root, k, DEGREE)?);
    }
    let mut rng = StdRng::seed_from_u64(seed);
    for g in 0..graphs {
        let n = rng.gen_range(6..14);
        let adj = random_bounded_graph(&mut rng, n, 6, 4 * n);
        let r = adj.iter().map(Vec::len).max().unwrap_or(0).max(1) as u64;
        for k in 0..=random_k {
            rows.push(count_row(&format!("random-{g}"), &adj, 0, k, r)?);
        }
    }
    Ok(rows)
}

/// A random connected family of subsets of at most 12 points, with three
/// poles drawn from its union.
pub fn random_spanning_instance<R: Rng + ?Sized>(
    rng: &mut R,
) -> (SpannedSet, Vec<BTreeSet<SpaceTimePoint>>) {
    let pool: Vec<SpaceTimePoint> = (0..rng.gen_range(2..=12))
        .map(|_| {
            SpaceTimePoint::new(
                rng.gen_range(-3..4),
                rng.gen_range(-3..4),
                rng.gen_range(-1..2),
                rng.gen_range(0..4),
            )
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut family: Vec<BTreeSet<SpaceTimePoint>> = Vec::new();
    let mut covered: Vec<SpaceTimePoint> = Vec::new();
    for _ in 0..rng.gen_range(1..=6) {
        let mut set = BTreeSet::new();
        if !covered.is_empty() {
            set.insert(covered[rng.gen_range(0..covered.len())]);
        }
        for _ in 0..rng.gen_range(1..=3) {
            set.insert(pool[rng.gen_range(0..pool.len())]);
        }
        covered.extend(set.iter().copied());
        covered.sort();
        covered.dedup();
        family.push(set);
    }
    let poles = [0; 3].map(|_| covered[rng.gen_range(0..covered.len())]);
    let target =
        SpannedSet::new(covered.into_iter().collect(), poles).expect("poles drawn from the union");
    (target, family)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub prism_size: i64,
    pub trees: usize,
    pub one_cut_checked: usize,
    pub one_cut_failures: usize,
    pub separate_checked: usize,
    pub separate_failures: usize,
    pub spanning_checked: usize,
    pub spanning_failures: usize,
    pub span_size_checked: usize,
    pub span_size_failures: usize,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.prism_size == 3
            && self.one_cut_failures == 0
            && self.separate_failures == 0
            && self.spanning_failures == 0
            && self.span_size_failures == 0
    }
}

/// Random-instance checks of the cutting, separator and spanning
/// constructions and of `span = size` for created spanned sets.
pub fn verify_lemmas(seed: u64, trees: usize, spanning_instances: usize) -> LemmaReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = LemmaReport {
        prism_size: prism_check(),
        trees,
        ..Default::default()
    };
    for _ in 0..trees {
        let n = rng.gen_range(2..=40);
        let p = rng.gen_range(0.1..1.0);
        let tree = random_tree(&mut rng, n, p);
        let w = tree.weight();
        let lambda = |t: &crate::wtrees::WeightedTree| {
            Ratio::new(t.edges() as u64, t.weight().max(1) as u64)
        };
        if w > 3 {
            report.one_cut_checked += 1;
            let ok = one_cut(&tree).is_ok_and(|c| {
                3 * c.weight() > w && 3 * c.weight() <= 2 * w && lambda(&c) <= lambda(&tree)
            });
            report.one_cut_failures += usize::from(!ok);
        }
        if w > 4 {
            let k = rng.gen_range(4..w);
            report.separate_checked += 1;
            let ok = separate(&tree, k).is_ok_and(|s| {
                3 * s.weight() > k && s.weight() <= k && lambda(&s) <= lambda(&tree)
            });
            report.separate_failures += usize::from(!ok);
        }
    }
    for _ in 0..spanning_instances {
        let (target, family) = random_spanning_instance(&mut rng);
        report.spanning_checked += 1;
        let ok = spanning(&target, &family).is_ok_and(|pieces| {
            pieces.iter().map(|p| p.spanned.span()).sum::<i64>() == target.span()
        });
        report.spanning_failures += usize::from(!ok);

        report.span_size_checked += 1;
        let created = create_spanned(target.base().iter().copied()).expect("non-empty");
        report.span_size_failures += usize::from(size(target.base()).ok() != Some(created.span()));
    }
    report
}

/// Serialises the noisy trajectory and the rule, enough to rebuild the pair.
pub fn write_trajectory(
    pair: &TrajectoryPair,
    rule: &Rule3D,
    params: Option<&NoiseParams>,
) -> String {
    let shape = pair.shape();
    let (seed, eps) = params.map_or((0, 0.0), |p| (p.seed(), p.epsilon()));
    let mut out = String::from("toom-trajectory 1\n");
    let _ = writeln!(
        out,
        "m {} n {} periodic {} t_max {} alphabet {} seed {seed} epsilon {eps}",
        shape.m(),
        shape.n_line(),
        u8::from(shape.line_periodic()),
        shape.t_max(),
        pair.perturbed.alphabet()
    );
    let table: Vec<String> = rule.line_rule().table().iter().map(u8::to_string).collect();
    let _ = writeln!(out, "rule {}", table.join(" "));
    for (t, frame) in pair.perturbed.frames().iter().enumerate() {
        let _ = writeln!(out, "t {t}");
        for u in 0..shape.n_line() {
            for a in 0..shape.m() {
                let row: Vec<String> = (0..shape.m())
                    .map(|b| frame.get(a, b, u).to_string())
                    .collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
    }
    out
}

/// A trajectory read back from a dump.
#[derive(Debug, Clone)]
pub struct TrajectoryDump {
    pub pair: TrajectoryPair,
    pub rule: Rule3D,
    pub seed: u64,
    pub epsilon: f64,
}

pub fn read_trajectory(text: &str) -> Result<TrajectoryDump> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let bad = |what: &str| Error::Parse(format!("trajectory dump: {what}"));
    if lines.next() != Some("toom-trajectory 1") {
        return Err(bad("missing magic line"));
    }
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("missing header"))?
        .split_whitespace()
        .collect();
    let field = |name: &str| -> Result<&str> {
        header
            .chunks(2)
            .find(|kv| kv[0] == name && kv.len() == 2)
            .map(|kv| kv[1])
            .ok_or_else(|| bad(&format!("header lacks {name}")))
    };
    let num = |name: &str| -> Result<usize> {
        field(name)?
            .parse()
            .map_err(|_| bad(&format!("bad {name}")))
    };
    let shape = LatticeShape::new(num("m")?, num("n")?, num("periodic")? == 1, num("t_max")?)?;
    let alphabet = u8::try_from(num("alphabet")?).map_err(|_| bad("alphabet too large"))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed"))?;
    let epsilon: f64 = field("epsilon")?.parse().map_err(|_| bad("bad epsilon"))?;

    let rule_line = lines.next().ok_or_else(|| bad("missing rule"))?;
    let table = rule_line
        .strip_prefix("rule")
        .ok_or_else(|| bad("missing rule line"))?
        .split_whitespace()
        .map(|x| x.parse::<u8>().map_err(|_| bad("bad rule entry")))
        .collect::<Result<Vec<u8>>>()?;
    let rule = Rule3D::new(Rule1D::from_table(alphabet, table)?);

    let mut frames = Vec::with_capacity(shape.t_max() + 1);
    for t in 0..=shape.t_max() {
        if lines.next() != Some(format!("t {t}").as_str()) {
            return Err(bad(&format!("missing frame marker for t = {t}")));
        }
        let mut cells = vec![0u8; shape.cells()];
        for u in 0..shape.n_line() {
            for a in 0..shape.m() {
                let row: Vec<u8> = lines
                    .next()
                    .ok_or_else(|| bad("truncated frame"))?
                    .split_whitespace()
                    .map(|x| x.parse::<u8>().map_err(|_| bad("bad state")))
                    .collect::<Result<_>>()?;
                if row.len() != shape.m() {
                    return Err(bad("row length differs from m"));
                }
                for (b, s) in row.into_iter().enumerate() {
                    cells[shape.index(a, b, u)] = s;
                }
            }
        }
        frames.push(Configuration::from_cells(shape, alphabet, cells)?);
    }
    if lines.next().is_some() {
        return Err(bad("trailing data"));
    }
    let perturbed = SpaceTimeConfiguration::new(frames)?;
    let ideal = evolve(perturbed.frame(0).expect("frame 0"), &rule);
    let noise = TrajectoryPair::recompute_noise(&perturbed, &rule);
    Ok(TrajectoryDump {
        pair: TrajectoryPair {
            ideal,
            perturbed,
            noise,
        },
        rule,
        seed,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"m": 6, "n_line": 3, "t_max": 5, "epsilons": [0.0, 0.05], "trials": 4, "seed": 9,
                "fault_mode": "forced-flip"}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = small_config();
        assert!(cfg.line_periodic);
        assert_eq!(cfg.alphabet, 2);
        assert_eq!(cfg.rule, RuleSource::Builtin("toom-projection".into()));
        assert_eq!(cfg.observe, Observation::FinalTime);
        assert!(ExperimentConfig::from_json(
            r#"{"m": 6, "n_line": 3, "t_max": 5, "epsilons": [1.5], "trials": 1}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"m": 6, "n_line": 3, "t_max": 5, "epsilons": [0.1], "trials": 0}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"m": 2, "n_line": 3, "t_max": 5, "epsilons": [0.1], "trials": 1}"#
        )
        .is_err());
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson(0, 100);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.036_995).abs() < 1e-5);
        let (lo, hi) = wilson(50, 100);
        assert!((lo - 0.403_832).abs() < 1e-5 && (hi - 0.596_168).abs() < 1e-5);
    }

    #[test]
    fn zero_noise_estimates_zero() {
        let rows = estimate_failure(&small_config()).unwrap();
        assert_eq!(rows[0].deviations, 0);
        assert_eq!(rows[0].p_hat, 0.0);
        assert_eq!(rows[1].points, 4 * 108);
        assert!((rows[1].bound_4r_eps - 4.8).abs() < 1e-12);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("epsilon,trials,deviations,points,p_hat,ci_lo,ci_hi,bound_4r_eps\n")
        );
        assert_eq!(rows, estimate_failure(&small_config()).unwrap());
    }

    #[test]
    fn explain_small_run() {
        let stats = explain_run(&small_config()).unwrap();
        assert_eq!(stats.trials, 8);
        assert_eq!(stats.verifier_failures, 0);
        assert_eq!(stats.excuse_size_identity_holds, stats.refinements);
    }

    #[test]
    fn rationals_parse_exactly() {
        let q = |s: &str| parse_rational(s).unwrap();
        assert_eq!(
            q("0.002"),
            BigRational::new(BigInt::from(1), BigInt::from(500))
        );
        assert_eq!(
            q("1e-13"),
            BigRational::new(BigInt::from(1), num_traits::pow(BigInt::from(10), 13))
        );
        assert_eq!(q("2.5E2"), BigRational::from_integer(BigInt::from(250)));
        assert_eq!(q("3/6"), BigRational::new(BigInt::from(1), BigInt::from(2)));
        assert_eq!(
            q("-.5"),
            BigRational::new(BigInt::from(-1), BigInt::from(2))
        );
        for s in ["", "abc", "1/0", "1e", ".", "1.2.3"] {
            assert!(parse_rational(s).is_err(), "{s}");
        }
    }

    #[test]
    fn roots_are_bracketed() {
        let x = parse_rational("0.5").unwrap();
        let (lo, hi) = root_bracket(&x, 12, 60);
        assert!(num_traits::pow(lo.clone(), 12) <= x && num_traits::pow(hi.clone(), 12) >= x);
        assert!((lo.to_f64().unwrap() - 0.5f64.powf(1.0 / 12.0)).abs() < 1e-15);
    }

    #[test]
    fn trajectory_round_trip() {
        let cfg = small_config();
        let rule = cfg.rule().unwrap();
        let ideal = evolve(&cfg.initial().unwrap(), &rule);
        let params = cfg.noise(0.05, 1).unwrap();
        let pair = sample_with_ideal(&ideal, &rule, &params).unwrap();
        let text = write_trajectory(&pair, &rule, Some(&params));
        let back = read_trajectory(&text).unwrap();
        assert_eq!(back.pair.perturbed, pair.perturbed);
        assert_eq!(back.pair.ideal, pair.ideal);
        assert_eq!(
            back.pair.noise.points().collect::<Vec<_>>(),
            pair.noise.points().collect::<Vec<_>>()
        );
        assert_eq!(back.seed, params.seed());
        assert!(read_trajectory(&text.replace("t 3\n", "t 4\n")).is_err());
        assert!(read_trajectory("nonsense").is_err());
    }

    #[test]
    fn lemma_report_small() {
        let report = verify_lemmas(1, 300, 300);
        assert!(report.passed(), "{report:?}");
        assert!(report.one_cut_checked > 0 && report.separate_checked > 0);
    }

    #[test]
    fn count_table_small() {
        let rows = count_trees_table(2, 1, 2, 3).unwrap();
        assert!(rows.iter().all(|r| r.holds));
        assert_eq!(rows[0].oracle, "2");
    }
}
