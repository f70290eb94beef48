//! Dense two-phase simplex for small equality-form linear programs.
//!
//! Solves `min c.x  s.t.  A x = b, x >= 0` on problems with at most a
//! few thousand variables (occupation-measure programs over the LLE
//! decision chain). Bland's rule everywhere, so cycling is impossible;
//! degenerate bases only cost extra pivots.

use crate::error::{Error, Result};

/// Pivot / feasibility tolerance.
pub(crate) const EPS: f64 = 1e-9;

const MAX_PIVOTS: usize = 200_000;

pub(crate) struct StandardLp {
    /// Minimized objective, length = number of variables.
    pub objective: Vec<f64>,
    /// Dense constraint rows, each of objective length.
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

pub(crate) struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

struct Tableau {
    /// `rows x (cols + 1)`; the last column is the current rhs.
    data: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, row: usize) -> f64 {
        self.data[row][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let inv = 1.0 / self.data[row][col];
        for entry in self.data[row].iter_mut() {
            *entry *= inv;
        }
        let pivot_row = self.data[row].clone();
        for (r, other) in self.data.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let factor = other[col];
            if factor == 0.0 {
                continue;
            }
            for (entry, &p) in other.iter_mut().zip(&pivot_row) {
                *entry -= factor * p;
            }
        }
        self.basis[row] = col;
    }

    /// One phase of Bland-rule pivoting against the given cost vector,
    /// restricted to columns `0..allowed`. Returns false on
    /// unboundedness.
    fn run(&mut self, cost: &[f64], allowed: usize, pivots: &mut usize) -> Result<bool> {
        loop {
            // reduced costs: z_j = cost_j - cost_B . column_j
            let mut entering = None;
            for j in 0..allowed {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut z = cost[j];
                for (row, &b) in self.data.iter().zip(&self.basis) {
                    let cb = cost.get(b).copied().unwrap_or(0.0);
                    if cb != 0.0 {
                        z -= cb * row[j];
                    }
                }
                if z < -EPS {
                    entering = Some(j);
                    break; // Bland: smallest index
                }
            }
            let Some(col) = entering else {
                return Ok(true);
            };

            let mut leaving: Option<(usize, f64)> = None;
            for r in 0..self.data.len() {
                let coef = self.data[r][col];
                if coef > EPS {
                    let ratio = self.rhs(r) / coef;
                    let better = match leaving {
                        None => true,
                        Some((best_r, best)) => {
                            ratio < best - EPS
                                || (ratio < best + EPS && self.basis[r] < self.basis[best_r])
                        }
                    };
                    if better {
                        leaving = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leaving else {
                return Ok(false);
            };
            self.pivot(row, col);
            *pivots += 1;
            if *pivots > MAX_PIVOTS {
                return Err(Error::Lp(format!(
                    "pivot cap {MAX_PIVOTS} reached (degenerate cycling should be \
                     impossible under Bland's rule)"
                )));
            }
        }
    }
}

pub(crate) fn solve_standard(lp: &StandardLp) -> Result<LpSolution> {
    let n = lp.objective.len();
    let m = lp.rows.len();
    if lp.rhs.len() != m || lp.rows.iter().any(|r| r.len() != n) {
        return Err(Error::Lp("inconsistent LP dimensions".into()));
    }

    // phase 1 tableau: [A | I | b] with b >= 0, artificial basis
    let cols = n + m;
    let mut data = Vec::with_capacity(m);
    for (i, row) in lp.rows.iter().enumerate() {
        let mut line = vec![0.0; cols + 1];
        let flip = if lp.rhs[i] < 0.0 { -1.0 } else { 1.0 };
        for (j, &a) in row.iter().enumerate() {
            line[j] = flip * a;
        }
        line[n + i] = 1.0;
        line[cols] = flip * lp.rhs[i];
        data.push(line);
    }
    let mut tableau = Tableau {
        data,
        basis: (n..n + m).collect(),
        cols,
    };

    let mut pivots = 0;
    let mut phase1_cost = vec![0.0; cols];
    for c in phase1_cost[n..].iter_mut() {
        *c = 1.0;
    }
    if !tableau.run(&phase1_cost, n, &mut pivots)? {
        return Err(Error::Lp("phase 1 unbounded (cannot happen)".into()));
    }
    let infeasibility: f64 = tableau
        .basis
        .iter()
        .zip(0..m)
        .filter(|(&b, _)| b >= n)
        .map(|(_, r)| tableau.rhs(r))
        .sum();
    if infeasibility > 1e-7 {
        return Err(Error::Lp(format!(
            "infeasible: phase 1 optimum {infeasibility:e}"
        )));
    }

    // drive leftover artificials out of the basis; rows that cannot
    // pivot on any original column are redundant and get dropped
    let mut r = 0;
    while r < tableau.data.len() {
        if tableau.basis[r] >= n {
            let col = (0..n).find(|&j| tableau.data[r][j].abs() > EPS);
            match col {
                Some(j) => {
                    tableau.pivot(r, j);
                    pivots += 1;
                }
                None => {
                    tableau.data.remove(r);
                    tableau.basis.remove(r);
                    continue;
                }
            }
        }
        r += 1;
    }

    let mut phase2_cost = lp.objective.clone();
    phase2_cost.resize(cols, 0.0);
    if !tableau.run(&phase2_cost, n, &mut pivots)? {
        return Err(Error::Lp("objective is unbounded".into()));
    }

    let mut x = vec![0.0; n];
    for (row, &b) in (0..tableau.data.len()).zip(&tableau.basis) {
        if b < n {
            x[b] = tableau.rhs(row).max(0.0);
        }
    }
    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| c * v)
        .sum();
    Ok(LpSolution { x, objective })
}
