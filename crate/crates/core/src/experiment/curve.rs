use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub density: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean test accuracy against density, one row per pruning round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityCurve {
    pub rows: Vec<CurveRow>,
    pub config_hash: String,
    /// Set when a single replicate makes every standard error zero by convention.
    pub stderr_undefined: bool,
}

impl SparsityCurve {
    /// Aggregates replicate accuracies given per replicate as `(density, acc)`
    /// lists. All replicates must share the same density grid.
    pub fn from_replicates(replicates: &[Vec<(f64, f64)>], config_hash: &str) -> Result<Self> {
        let first = replicates.first().ok_or_else(|| Error::Invalid("no replicates".into()))?;
        let grid: Vec<f64> = first.iter().map(|p| p.0).collect();
        if grid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Invalid("densities must be strictly decreasing".into()));
        }
        let mut rows = Vec::with_capacity(grid.len());
        for (i, &density) in grid.iter().enumerate() {
            let mut accs = Vec::with_capacity(replicates.len());
            for r in replicates {
                match r.get(i) {
                    Some(&(d, a)) if d == density => accs.push(a),
                    _ => return Err(Error::Invalid("replicates disagree on the density grid".into())),
                }
            }
            rows.push(CurveRow { density, mean: stats::mean(&accs), stderr: stats::std_err(&accs), n: accs.len() });
        }
        Ok(SparsityCurve { rows, config_hash: config_hash.to_string(), stderr_undefined: replicates.len() == 1 })
    }

    pub fn densities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.density).collect()
    }

    /// Rows at or below a density.
    pub fn at_most(&self, density: f64) -> impl Iterator<Item = &CurveRow> {
        self.rows.iter().filter(move |r| r.density <= density)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("density,mean_test_acc,stderr,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.density, r.mean, r.stderr, r.n));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    Dominates,
    WeaklyDominates,
    Dominated,
    Incomparable,
}

fn aligned(a: &SparsityCurve, b: &SparsityCurve) -> Result<()> {
    if a.densities() != b.densities() {
        return Err(Error::Invalid("curves do not share a density grid".into()));
    }
    Ok(())
}

fn weakly(a: &SparsityCurve, b: &SparsityCurve, tol: f64) -> bool {
    a.rows.iter().zip(&b.rows).all(|(x, y)| x.mean >= y.mean - tol * pooled(x, y))
}

fn somewhere_better(a: &SparsityCurve, b: &SparsityCurve, tol: f64) -> bool {
    a.rows.iter().zip(&b.rows).any(|(x, y)| x.mean > y.mean + tol * pooled(x, y))
}

/// `√(se_a² + se_b²)`.
pub fn pooled(x: &CurveRow, y: &CurveRow) -> f64 {
    x.stderr.hypot(y.stderr)
}

/// `a` weakly dominates `b` when at every density its mean is no lower than
/// `b`'s minus `tolerance` pooled standard errors; it dominates when it is
/// additionally above `b` by more than that margin somewhere.
pub fn compare_initializations(a: &SparsityCurve, b: &SparsityCurve, tolerance: f64) -> Result<Dominance> {
    aligned(a, b)?;
    Ok(if weakly(a, b, tolerance) {
        if somewhere_better(a, b, tolerance) {
            Dominance::Dominates
        } else {
            Dominance::WeaklyDominates
        }
    } else if weakly(b, a, tolerance) {
        Dominance::Dominated
    } else {
        Dominance::Incomparable
    })
}

/// True when `candidate` (weakly) dominates the `t*` reference.
pub fn matching_initialization_check(candidate: &SparsityCurve, reference: &SparsityCurve, tolerance: f64) -> Result<bool> {
    Ok(matches!(compare_initializations(candidate, reference, tolerance)?, Dominance::Dominates | Dominance::WeaklyDominates))
}
