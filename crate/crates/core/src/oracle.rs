//! Brute-force ground truth on small distributions.
//!
//! [`DiscreteJoint`] enumerates every state of a few categorical columns and
//! answers any conditional query exactly. The density helpers integrate a
//! known density on `[0, 1]` to give exact bin masses, and measure how far
//! the resulting histogram density is from the truth in total variation,
//! next to the `K / (2L)` bound for a `K`-Lipschitz density.

use serde::Serialize;

use crate::discretize::BinGrid;
use crate::error::{Error, Result};

/// Dense joint probability table over columns with `levels[j]` states each.
/// States are 0-based; the last column varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    levels: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(levels: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let size: usize = levels.iter().product();
        if levels.is_empty() || levels.contains(&0) || probs.len() != size {
            return Err(Error::LengthMismatch(probs.len(), size));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument("negative or NaN probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(Self { levels, probs })
    }

    /// Normalizes non-negative weights into a joint.
    pub fn from_weights(levels: Vec<usize>, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("weights must have positive total".into()));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let fix = 1.0 - probs.iter().sum::<f64>();
        let mut probs = probs;
        probs[0] += fix;
        Self::new(levels, probs)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn n_cols(&self) -> usize {
        self.levels.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn index(&self, state: &[usize]) -> usize {
        state.iter().zip(&self.levels).fold(0, |acc, (&s, &l)| acc * l + s)
    }

    pub fn state(&self, mut index: usize) -> Vec<usize> {
        let mut s = vec![0; self.levels.len()];
        for j in (0..self.levels.len()).rev() {
            s[j] = index % self.levels[j];
            index /= self.levels[j];
        }
        s
    }

    pub fn prob(&self, state: &[usize]) -> f64 {
        self.probs[self.index(state)]
    }

    /// Inverse-CDF draw of one state from a uniform `u` in `[0, 1)`.
    pub fn sample_state(&self, u: f64) -> Vec<usize> {
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.state(i);
            }
        }
        self.state(self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
    }

    /// Every full assignment of the columns other than `target`, as conditions.
    pub fn full_conditions(&self, target: usize) -> Vec<Vec<Option<usize>>> {
        (0..self.probs.len())
            .map(|i| self.state(i))
            .filter(|s| s[target] == 0)
            .map(|s| {
                s.into_iter()
                    .enumerate()
                    .map(|(j, v)| (j != target).then_some(v))
                    .collect()
            })
            .collect()
    }
}

/// `P(x_target | condition)`, where `condition[j]` fixes column `j` when
/// `Some` and marginalizes it when `None`.
pub fn exact_conditional(joint: &DiscreteJoint, target: usize, condition: &[Option<usize>]) -> Result<Vec<f64>> {
    let p = joint.n_cols();
    if condition.len() != p {
        return Err(Error::LengthMismatch(condition.len(), p));
    }
    if target >= p {
        return Err(Error::IndexOutOfRange { index: target, max: p - 1 });
    }
    if condition[target].is_some() {
        return Err(Error::InvalidArgument("the target cannot be conditioned on".into()));
    }
    let mut out = vec![0.0; joint.levels[target]];
    for (i, &pr) in joint.probs.iter().enumerate() {
        let s = joint.state(i);
        if condition.iter().zip(&s).all(|(c, &v)| c.is_none_or(|c| c == v)) {
            out[s[target]] += pr;
        }
    }
    let mass: f64 = out.iter().sum();
    if mass <= 0.0 {
        return Err(Error::ZeroMassCondition);
    }
    Ok(out.into_iter().map(|v| v / mass).collect())
}

/// Total variation distance `0.5 * sum |p - q|`.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Cross-entropy of `q` under `p` minus the entropy of `p` (i.e. `KL(p || q)`).
pub fn cross_entropy_gap(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum())
}

/// Histogram density at `u`: `pi_l / (b_l - b_{l-1})` for the bin holding `u`.
pub fn histogram_estimate(pi: &[f64], grid: &BinGrid, u: f64) -> Result<f64> {
    if pi.len() != grid.num_bins() {
        return Err(Error::LengthMismatch(pi.len(), grid.num_bins()));
    }
    let l = grid.bin_of(u.clamp(0.0, 1.0));
    let (lo, hi) = grid.interval(l)?;
    Ok(pi[l - 1] / (hi - lo))
}

const QUAD_MAX_DEPTH: u32 = 48;

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::QuadratureFailure { a, b });
    }
    Ok(adaptive(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)?
        + adaptive(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)?)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a < b) {
        return if a == b { Ok(0.0) } else { Err(Error::QuadratureFailure { a, b }) };
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    let v = adaptive(f, a, fa, b, fb, m, fm, whole, tol, QUAD_MAX_DEPTH)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::QuadratureFailure { a, b })
    }
}

/// Exact mass of `density` in every bin of `grid`.
pub fn bin_masses(density: &dyn Fn(f64) -> f64, grid: &BinGrid) -> Result<Vec<f64>> {
    (1..=grid.num_bins())
        .map(|l| {
            let (lo, hi) = grid.interval(l)?;
            integrate(density, lo, hi, 1e-13)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub measured_tv: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Slack allowed for quadrature error when comparing against the bound.
pub const QUAD_SLACK: f64 = 1e-9;

/// TV between `density` and the histogram density built from `pi`, against
/// the bound `lipschitz / (2L)`. `pi = None` uses the exact bin masses.
pub fn prop1_bound_check(
    density: &dyn Fn(f64) -> f64,
    lipschitz: f64,
    grid: &BinGrid,
    pi: Option<&[f64]>,
) -> Result<BoundCheck> {
    let exact;
    let pi = match pi {
        Some(p) => p,
        None => {
            exact = bin_masses(density, grid)?;
            &exact
        }
    };
    let mut total = 0.0;
    for l in 1..=grid.num_bins() {
        let (lo, hi) = grid.interval(l)?;
        let h = pi[l - 1] / (hi - lo);
        total += integrate(&|u| (density(u) - h).abs(), lo, hi, 1e-13)?;
    }
    let measured_tv = 0.5 * total;
    let bound = lipschitz / (2.0 * grid.num_bins() as f64);
    Ok(BoundCheck {
        measured_tv,
        bound,
        holds: measured_tv <= bound + QUAD_SLACK,
    })
}

/// `1 + 0.5 sin(2 pi u)`, Lipschitz constant `pi`.
pub fn sine_density(u: f64) -> f64 {
    1.0 + 0.5 * (2.0 * std::f64::consts::PI * u).sin()
}

/// Joint of three binary columns: uniform over even-parity states.
pub fn xor_joint() -> DiscreteJoint {
    let w: Vec<f64> = (0..8usize).map(|i| if i.count_ones() % 2 == 0 { 1.0 } else { 0.0 }).collect();
    DiscreteJoint::from_weights(vec![2, 2, 2], &w).expect("valid weights")
}

/// Three binary columns with every state possible and no product structure.
pub fn dependent_binary_joint() -> DiscreteJoint {
    DiscreteJoint::from_weights(vec![2, 2, 2], &[0.30, 0.05, 0.04, 0.11, 0.06, 0.14, 0.10, 0.20]).expect("valid weights")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: impl Into<String>, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

/// Largest deviation between a joint and its chain-rule reconstruction over
/// every column ordering.
pub fn chain_rule_error(joint: &DiscreteJoint) -> Result<f64> {
    let p = joint.n_cols();
    let mut worst = 0.0f64;
    for order in permutations(p) {
        for i in 0..joint.probs.len() {
            let s = joint.state(i);
            let mut cond = vec![None; p];
            let mut prod = 1.0;
            for &j in &order {
                match exact_conditional(joint, j, &cond) {
                    Ok(c) => prod *= c[s[j]],
                    Err(Error::ZeroMassCondition) => {
                        prod = 0.0;
                        break;
                    }
                    Err(e) => return Err(e),
                }
                cond[j] = Some(s[j]);
            }
            worst = worst.max((prod - joint.probs[i]).abs());
        }
    }
    Ok(worst)
}

/// All orderings of `0..n` (n small).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut v = rest.clone();
            v.insert(pos, n - 1);
            out.push(v);
        }
    }
    out
}

/// The full verification battery: exact conditionals, TV, histogram
/// normalization and the histogram TV bound.
pub fn run_battery() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    for (name, joint) in [("xor", xor_joint()), ("dependent", dependent_binary_joint())] {
        let err = chain_rule_error(&joint)?;
        out.push(outcome(format!("chain rule ({name})"), err <= 1e-12, format!("max error {err:.2e}")));
    }

    let xor = exact_conditional(&xor_joint(), 2, &[Some(1), Some(1), None])?;
    out.push(outcome("xor conditional", xor == vec![1.0, 0.0], format!("{xor:?}")));

    let d = tv(&[0.5, 0.5], &[0.75, 0.25])?;
    out.push(outcome("tv hand case", (d - 0.25).abs() < 1e-15, format!("{d}")));

    let grid = BinGrid::uniform(7)?;
    let pi = [0.05, 0.3, 0.1, 0.2, 0.05, 0.15, 0.15];
    // the estimate jumps at bin edges, so integrate bin by bin
    let mut mass = 0.0;
    for l in 1..=grid.num_bins() {
        let (lo, hi) = grid.interval(l)?;
        let inside = hi.next_down();
        mass += integrate(&|u| histogram_estimate(&pi, &grid, u.min(inside)).unwrap_or(f64::NAN), lo, hi, 1e-13)?;
    }
    let ok = (mass - 1.0).abs() < 1e-9;
    out.push(outcome("histogram integrates to 1", ok, format!("{mass:.12}")));

    let mut tvs = Vec::new();
    for l in [5, 10, 25, 50] {
        let c = prop1_bound_check(&sine_density, std::f64::consts::PI, &BinGrid::uniform(l)?, None)?;
        out.push(outcome(
            format!("sine bound L={l}"),
            c.holds,
            format!("tv {:.6} <= {:.6}", c.measured_tv, c.bound),
        ));
        tvs.push(c.measured_tv);
    }
    let ratio = tvs[3] / tvs[1];
    out.push(outcome("sine rate L=50 vs L=10", ratio <= 0.25 * 1.1, format!("ratio {ratio:.4}")));
    let halving = tvs[1] / tvs[0];
    out.push(outcome("sine rate L=10 vs L=5", halving <= 0.5 * 1.1, format!("ratio {halving:.4}")));

    let tri = prop1_bound_check(&|u| 2.0 * u, 2.0, &BinGrid::uniform(50)?, None)?;
    out.push(outcome(
        "triangular L=50",
        tri.holds && tri.measured_tv <= 0.02,
        format!("tv {:.6}", tri.measured_tv),
    ));
    let flat = prop1_bound_check(&|_| 1.0, 0.0, &BinGrid::uniform(10)?, None)?;
    out.push(outcome("constant density", flat.measured_tv <= QUAD_SLACK, format!("tv {:.2e}", flat.measured_tv)));
    Ok(out)
}
