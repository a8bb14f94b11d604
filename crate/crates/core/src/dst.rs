//! Dempster–Shafer opinions over singleton classes plus the whole frame, the
//! combination rule, and Monte-Carlo certification of the two fusion
//! guarantees (no-loss under a dominating second opinion, and the bounded
//! degradation that shrinks with the second opinion's uncertainty).

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tolerance on `Σ b + u = 1` when constructing an opinion.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// `combine` refuses inputs whose conflict is at least `1 - TOTAL_CONFLICT_MARGIN`.
pub const TOTAL_CONFLICT_MARGIN: f64 = 1e-9;
/// Draw budget for rejection sampling.
pub const MAX_DRAWS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    belief: Vec<f64>,
    uncertainty: f64,
}

impl Opinion {
    pub fn new(belief: Vec<f64>, uncertainty: f64) -> Result<Self> {
        if belief.is_empty() {
            return Err(Error::invalid("opinion needs at least one class"));
        }
        if belief.iter().chain([&uncertainty]).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("belief masses and uncertainty must be finite and ≥ 0"));
        }
        let total: f64 = belief.iter().sum::<f64>() + uncertainty;
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::invalid(format!("masses sum to {total}, expected 1")));
        }
        Ok(Opinion {
            belief,
            uncertainty,
        })
    }

    /// Total ignorance over `n` classes.
    pub fn vacuous(n: usize) -> Self {
        Opinion {
            belief: vec![0.0; n],
            uncertainty: 1.0,
        }
    }

    pub fn belief(&self) -> &[f64] {
        &self.belief
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn classes(&self) -> usize {
        self.belief.len()
    }

    pub fn max_belief(&self) -> f64 {
        self.belief.iter().copied().fold(0.0, f64::max)
    }

    /// `|Σ b + u − 1|`.
    pub fn normalization_error(&self) -> f64 {
        (self.belief.iter().sum::<f64>() + self.uncertainty - 1.0).abs()
    }

    /// Largest componentwise difference, uncertainty included.
    pub fn max_abs_diff(&self, other: &Opinion) -> f64 {
        self.belief
            .iter()
            .zip(&other.belief)
            .map(|(a, b)| (a - b).abs())
            .fold((self.uncertainty - other.uncertainty).abs(), f64::max)
    }
}

fn same_frame(l: &Opinion, m: &Opinion) -> Result<()> {
    if l.classes() != m.classes() {
        return Err(Error::invalid(format!(
            "opinions over {} and {} classes",
            l.classes(),
            m.classes()
        )));
    }
    Ok(())
}

fn check_class(l: &Opinion, g: usize) -> Result<()> {
    if g >= l.classes() {
        return Err(Error::invalid(format!("class {g} out of range for {} classes", l.classes())));
    }
    Ok(())
}

/// Conflict mass `z = Σ_{i≠j} b_l^i b_m^j`.
pub fn conflict(l: &Opinion, m: &Opinion) -> Result<f64> {
    same_frame(l, m)?;
    let mut z = 0.0;
    for (i, bl) in l.belief.iter().enumerate() {
        for (j, bm) in m.belief.iter().enumerate() {
            if i != j {
                z += bl * bm;
            }
        }
    }
    Ok(z)
}

/// Dempster combination of two opinions.
pub fn combine(l: &Opinion, m: &Opinion) -> Result<Opinion> {
    let z = conflict(l, m)?;
    if z >= 1.0 - TOTAL_CONFLICT_MARGIN {
        return Err(Error::TotalConflict(z));
    }
    let norm = 1.0 - z;
    let (ul, um) = (l.uncertainty, m.uncertainty);
    let belief = l
        .belief
        .iter()
        .zip(&m.belief)
        .map(|(bl, bm)| (bl * bm + bl * um + bm * ul) / norm)
        .collect();
    Ok(Opinion {
        belief,
        uncertainty: ul * um / norm,
    })
}

/// Whether fusing `m` into `l` kept the ground-truth belief from dropping.
/// Requires `b_m^g ≥ max_n b_l^n`.
pub fn check_prop1(l: &Opinion, m: &Opinion, g: usize) -> Result<bool> {
    same_frame(l, m)?;
    check_class(l, g)?;
    if m.belief[g] < l.max_belief() {
        return Err(Error::Precondition(format!(
            "b_m[{g}] = {} is below max b_l = {}",
            m.belief[g],
            l.max_belief()
        )));
    }
    let f = combine(l, m)?;
    Ok(f.belief[g] >= l.belief[g] - 1e-12)
}

/// Upper bound on `b_l^g − b_f^g`: `b_l^g (1 + u_l) / (1/(1 − u_m) + u_l)`.
/// Returns the limit value 0 for a vacuous `m`.
pub fn degradation_bound(l: &Opinion, m: &Opinion, g: usize) -> Result<f64> {
    same_frame(l, m)?;
    check_class(l, g)?;
    Ok(bound_value(l.belief[g], l.uncertainty, m.uncertainty))
}

pub(crate) fn bound_value(bl_g: f64, ul: f64, um: f64) -> f64 {
    if um >= 1.0 {
        return 0.0;
    }
    bl_g * (1.0 + ul) / (1.0 / (1.0 - um) + ul)
}

/// Uniform draw from the simplex over `(b^1..b^n, u)`.
fn draw_uniform(rng: &mut impl Rng, n: usize) -> Opinion {
    // Normalized unit exponentials are Dirichlet(1, …, 1).
    let mut e: Vec<f64> = (0..=n)
        .map(|_| {
            let u: f64 = rng.random();
            -(1.0 - u).ln()
        })
        .collect();
    let total: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= total);
    let uncertainty = e.pop().expect("n + 1 components");
    Opinion {
        belief: e,
        uncertainty,
    }
}

/// Uniform opinion over `n ≥ 2` classes, rejection-filtered by `accept`.
pub fn sample_opinion(
    rng: &mut impl Rng,
    n: usize,
    accept: impl Fn(&Opinion) -> bool,
) -> Result<Opinion> {
    if n < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    for _ in 0..MAX_DRAWS {
        let o = draw_uniform(rng, n);
        if accept(&o) {
            return Ok(o);
        }
    }
    Err(Error::Sampling(format!("no acceptable opinion in {MAX_DRAWS} draws")))
}

/// Independent uniform pair, rejection-filtered jointly.
pub fn sample_pair(
    rng: &mut impl Rng,
    n: usize,
    accept: impl Fn(&Opinion, &Opinion) -> bool,
) -> Result<(Opinion, Opinion)> {
    if n < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    for _ in 0..MAX_DRAWS {
        let l = draw_uniform(rng, n);
        let m = draw_uniform(rng, n);
        if accept(&l, &m) {
            return Ok((l, m));
        }
    }
    Err(Error::Sampling(format!("no acceptable pair in {MAX_DRAWS} draws")))
}

/// Output of [`verify`]; the `dst-verify` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstReport {
    pub trials: usize,
    pub prop1_violations: usize,
    pub bound_violations: usize,
    pub max_assoc_error: f64,
    pub max_closure_error: f64,
}

/// Class counts cycled through by the certification runs.
pub const CLASS_COUNTS: [usize; 3] = [2, 3, 5];

/// Monte-Carlo certification: `trials` dominated pairs for the no-loss
/// guarantee, `trials` pairs with `z < 0.999` for the degradation bound and
/// `trials` triples with pairwise `z < 0.99` for associativity.
pub fn verify(rng: &mut impl Rng, trials: usize) -> Result<DstReport> {
    let mut report = DstReport {
        trials,
        prop1_violations: 0,
        bound_violations: 0,
        max_assoc_error: 0.0,
        max_closure_error: 0.0,
    };
    let closure = |o: &Opinion, report: &mut DstReport| {
        let mut err = o.normalization_error();
        if o.belief.iter().any(|&b| b < 0.0) || o.uncertainty < 0.0 {
            err = f64::INFINITY;
        }
        report.max_closure_error = report.max_closure_error.max(err);
    };
    for t in 0..trials {
        let n = CLASS_COUNTS[t % CLASS_COUNTS.len()];
        let g = rng.random_range(0..n);

        let (l, m) = sample_pair(rng, n, |l, m| m.belief[g] >= l.max_belief())?;
        if !check_prop1(&l, &m, g)? {
            report.prop1_violations += 1;
        }
        closure(&combine(&l, &m)?, &mut report);

        let (l, m) = sample_pair(rng, n, |l, m| conflict(l, m).is_ok_and(|z| z < 0.999))?;
        let f = combine(&l, &m)?;
        closure(&f, &mut report);
        if l.belief[g] - f.belief[g] > degradation_bound(&l, &m, g)? + 1e-12 {
            report.bound_violations += 1;
        }

        let (a, b, c) = sample_triple(rng, n, 0.99)?;
        let ab = combine(&a, &b)?;
        let bc = combine(&b, &c)?;
        let left = combine(&ab, &c)?;
        let right = combine(&a, &bc)?;
        for o in [&ab, &bc, &left, &right] {
            closure(o, &mut report);
        }
        report.max_assoc_error = report.max_assoc_error.max(left.max_abs_diff(&right));
    }
    Ok(report)
}

/// Uniform triple whose pairwise conflicts are all below `max_z`.
pub fn sample_triple(
    rng: &mut impl Rng,
    n: usize,
    max_z: f64,
) -> Result<(Opinion, Opinion, Opinion)> {
    let ok = |x: &Opinion, y: &Opinion| conflict(x, y).is_ok_and(|z| z < max_z);
    for _ in 0..MAX_DRAWS {
        let a = draw_uniform(rng, n);
        let b = draw_uniform(rng, n);
        let c = draw_uniform(rng, n);
        if ok(&a, &b) && ok(&b, &c) && ok(&a, &c) {
            return Ok((a, b, c));
        }
    }
    Err(Error::Sampling(format!("no acceptable triple in {MAX_DRAWS} draws")))
}
