//! Dense linear programming backend for the discrete OT oracle.
//!
//! Problems are stated in equality standard form: minimize `c.x` subject to
//! `A x = b`, `x >= 0`. The solver is a two-phase primal simplex with Bland's
//! rule, dense tableaus, and no sparsity handling, sized for transport
//! instances of at most a few thousand variables.

use crate::error::{Error, Result};

/// Equality-form LP: minimize `objective . x` with `constraints` rows `a.x = b`
/// and `x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Abstract LP backend. The oracle only needs `solve`.
pub trait LpSolve {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution>;
}

/// Two-phase dense primal simplex with Bland's anti-cycling rule.
#[derive(Debug, Default, Clone, Copy)]
pub struct DenseSimplex;

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

struct Tableau {
    /// `rows x (cols + 1)`; last column is the rhs.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.t[row][col];
        let inv = 1.0 / piv;
        for v in self.t[row].iter_mut() {
            *v *= inv;
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let factor = r[col];
            if factor != 0.0 {
                for (v, p) in r.iter_mut().zip(pivot_row.iter()) {
                    *v -= factor * p;
                }
                r[col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations for cost vector `c` (length `cols`), returning
    /// the objective value at optimality. `allowed` masks columns that may
    /// enter the basis.
    fn optimize(&mut self, c: &[f64], allowed: &[bool]) -> Result<f64> {
        loop {
            // Reduced costs: rc_j = c_j - c_B . B^-1 A_j. Bland: smallest
            // eligible index enters.
            let mut entering = None;
            for j in 0..self.cols {
                if !allowed[j] || self.basis.contains(&j) {
                    continue;
                }
                let mut z = 0.0;
                for (i, &bi) in self.basis.iter().enumerate() {
                    let cb = c[bi];
                    if cb != 0.0 {
                        z += cb * self.t[i][j];
                    }
                }
                if c[j] - z < -COST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(e) = entering else {
                let mut value = 0.0;
                for (i, &bi) in self.basis.iter().enumerate() {
                    value += c[bi] * self.rhs(i);
                }
                return Ok(value);
            };
            // Ratio test; ties broken by smallest basic index (Bland).
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.t.len() {
                let a = self.t[i][e];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-12
                                || ((ratio - lr).abs() <= 1e-12 && self.basis[i] < self.basis[li])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((l, _)) = leave else {
                return Err(Error::Numerical("LP is unbounded".into()));
            };
            self.pivot(l, e);
        }
    }
}

impl LpSolve for DenseSimplex {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution> {
        let n = lp.objective.len();
        let m = lp.rows.len();
        if lp.rhs.len() != m {
            return Err(Error::Dimension(format!(
                "LP has {m} rows but {} rhs entries",
                lp.rhs.len()
            )));
        }
        for (i, r) in lp.rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Dimension(format!(
                    "LP row {i} has {} coefficients, expected {n}",
                    r.len()
                )));
            }
        }

        // Phase 1 tableau: [A | I | b] with rows flipped so b >= 0; artificial
        // variables n..n+m start basic.
        let cols = n + m;
        let mut t = vec![vec![0.0; cols + 1]; m];
        for i in 0..m {
            let sign = if lp.rhs[i] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..n {
                t[i][j] = sign * lp.rows[i][j];
            }
            t[i][n + i] = 1.0;
            t[i][cols] = sign * lp.rhs[i];
        }
        let mut tab = Tableau {
            t,
            basis: (n..n + m).collect(),
            cols,
        };

        let mut phase1_cost = vec![0.0; cols];
        for c in phase1_cost.iter_mut().skip(n) {
            *c = 1.0;
        }
        let allowed = vec![true; cols];
        let infeas = tab.optimize(&phase1_cost, &allowed)?;
        if infeas > FEAS_TOL {
            return Err(Error::Instance(format!(
                "LP infeasible (phase-1 residual {infeas:.3e})"
            )));
        }

        // Drive remaining basic artificials out, dropping redundant rows.
        let mut drop_rows = Vec::new();
        for i in 0..m {
            if tab.basis[i] >= n {
                let mut pivot_col = None;
                for j in 0..n {
                    if tab.t[i][j].abs() > PIVOT_TOL {
                        pivot_col = Some(j);
                        break;
                    }
                }
                match pivot_col {
                    Some(j) => tab.pivot(i, j),
                    None => drop_rows.push(i),
                }
            }
        }
        if !drop_rows.is_empty() {
            let mut keep = Vec::with_capacity(m - drop_rows.len());
            let mut keep_basis = Vec::with_capacity(m - drop_rows.len());
            for i in 0..m {
                if !drop_rows.contains(&i) {
                    keep.push(std::mem::take(&mut tab.t[i]));
                    keep_basis.push(tab.basis[i]);
                }
            }
            tab.t = keep;
            tab.basis = keep_basis;
        }

        // Phase 2 over original columns only.
        let mut phase2_cost = vec![0.0; cols];
        phase2_cost[..n].copy_from_slice(&lp.objective);
        let mut allowed = vec![false; cols];
        for a in allowed.iter_mut().take(n) {
            *a = true;
        }
        let value = tab.optimize(&phase2_cost, &allowed)?;

        let mut x = vec![0.0; n];
        for (i, &bi) in tab.basis.iter().enumerate() {
            if bi < n {
                x[bi] = tab.rhs(i).max(0.0);
            }
        }
        Ok(LpSolution { x, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(obj: &[f64], rows: &[&[f64]], rhs: &[f64]) -> Result<LpSolution> {
        DenseSimplex.solve(&LinearProgram {
            objective: obj.to_vec(),
            rows: rows.iter().map(|r| r.to_vec()).collect(),
            rhs: rhs.to_vec(),
        })
    }

    #[test]
    fn simplex_two_variable() {
        // min -x - 2y  s.t.  x + y = 1  =>  x=0, y=1, value -2
        let sol = solve(&[-1.0, -2.0], &[&[1.0, 1.0]], &[1.0]).unwrap();
        assert!((sol.value + 2.0).abs() < 1e-12);
        assert!((sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_detects_infeasible() {
        // x = 1 and x = 2 cannot both hold.
        let err = solve(&[1.0], &[&[1.0], &[1.0]], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Instance(_)));
    }

    #[test]
    fn simplex_handles_redundant_rows() {
        // Duplicate constraint should not break feasibility.
        let sol = solve(&[1.0, 1.0], &[&[1.0, 1.0], &[2.0, 2.0]], &[1.0, 2.0]).unwrap();
        assert!((sol.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_small_transport() {
        // Two sources (0.5, 0.5) to two sinks (0.5, 0.5), cost [[0,1],[1,0]]:
        // optimum ships on the diagonal at zero cost.
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
        ];
        let lp = LinearProgram {
            objective: vec![0.0, 1.0, 1.0, 0.0],
            rows,
            rhs: vec![0.5, 0.5, 0.5, 0.5],
        };
        let sol = DenseSimplex.solve(&lp).unwrap();
        assert!(sol.value.abs() < 1e-12);
        assert!((sol.x[0] - 0.5).abs() < 1e-9);
        assert!((sol.x[3] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn simplex_negative_rhs() {
        // -x = -1 with min x  =>  x = 1.
        let sol = solve(&[1.0], &[&[-1.0]], &[-1.0]).unwrap();
        assert!((sol.value - 1.0).abs() < 1e-12);
    }
}
