//! Exact discrete optimal transport on small finite spaces.
//!
//! Everything here is double precision and LP-exact: the primal transport
//! problem, the general Kantorovich dual, the 1-Lipschitz potential dual for
//! Wasserstein-1, c-transforms, push-forwards, and certification of the
//! sandwich bounds that tie the transport cost of the inverse-path cost
//! function to the cycle and adversarial losses used in training. This module
//! is the ground-truth oracle the neural losses are checked against; no
//! learned component enters it.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lp::{DenseSimplex, LinearProgram, LpSolve};

/// Tolerance used for the certification inequalities.
pub const CERT_EPS: f64 = 1e-8;
/// Atom/weight matching tolerance for push-forward comparison.
pub const ATOM_TOL: f64 = 1e-12;

/// Finite weighted point set in `R^d`, `d <= 8`, weights on the simplex.
#[derive(Debug, Clone, Serialize)]
pub struct DiscretePointSet {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscretePointSet {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Instance("point set is empty".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::Instance(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 || dim > 8 {
            return Err(Error::Instance(format!(
                "point dimension {dim} outside supported range 1..=8"
            )));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::Instance("inconsistent point dimensions".into()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Instance("non-finite point coordinate".into()));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Instance("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Instance(format!(
                "weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Uniform weights over the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Instance("point set is empty".into()));
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // Pin the sum to exactly 1 against accumulated rounding.
        let sum: f64 = weights.iter().sum();
        weights[n - 1] += 1.0 - sum;
        Self::new(points, weights)
    }

    /// Single atom of mass one.
    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Image measure under `map`, with coincident image atoms merged.
    pub fn pushforward<F>(&self, map: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let imgs: Vec<Vec<f64>> = self.points.iter().map(|p| map(p)).collect();
        let merged = merge_atoms(&imgs, &self.weights);
        let (points, weights) = merged.into_iter().unzip();
        Self::new(points, weights)
    }
}

/// Euclidean distance between two vectors.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn merge_atoms(points: &[Vec<f64>], weights: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let mut merged: Vec<(Vec<f64>, f64)> = Vec::new();
    for (p, &w) in points.iter().zip(weights) {
        match merged.iter_mut().find(|(q, _)| euclidean(p, q) <= ATOM_TOL) {
            Some((_, mw)) => *mw += w,
            None => merged.push((p.clone(), w)),
        }
    }
    merged
}

/// Marginals plus the ground cost `C[i][j] = c(x_i, y_j)`.
#[derive(Debug, Clone, Serialize)]
pub struct DiscreteOTInstance {
    pub mu: DiscretePointSet,
    pub nu: DiscretePointSet,
    #[serde(skip)]
    pub cost: Array2<f64>,
}

impl DiscreteOTInstance {
    pub fn new(mu: DiscretePointSet, nu: DiscretePointSet, cost: Array2<f64>) -> Result<Self> {
        if cost.nrows() != mu.len() || cost.ncols() != nu.len() {
            return Err(Error::Instance(format!(
                "cost is {}x{} but marginals have {} and {} atoms",
                cost.nrows(),
                cost.ncols(),
                mu.len(),
                nu.len()
            )));
        }
        if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Instance(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { mu, nu, cost })
    }

    /// Builds the cost matrix by evaluating `c` on every atom pair.
    pub fn from_cost_fn<F>(mu: DiscretePointSet, nu: DiscretePointSet, c: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> f64,
    {
        let mut cost = Array2::zeros((mu.len(), nu.len()));
        for (i, x) in mu.points().iter().enumerate() {
            for (j, y) in nu.points().iter().enumerate() {
                cost[[i, j]] = c(x, y);
            }
        }
        Self::new(mu, nu, cost)
    }

    fn dump(&self) -> String {
        let cost_rows: Vec<Vec<f64>> = self
            .cost
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        serde_json::json!({
            "mu": {"points": self.mu.points(), "weights": self.mu.weights()},
            "nu": {"points": self.nu.points(), "weights": self.nu.weights()},
            "cost": cost_rows,
        })
        .to_string()
    }
}

/// Optimal coupling of an instance together with its transport cost.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub value: f64,
}

impl TransportPlan {
    /// Largest violation of the marginal constraints.
    pub fn marginal_error(&self, mu: &DiscretePointSet, nu: &DiscretePointSet) -> f64 {
        let mut err: f64 = 0.0;
        for (i, &w) in mu.weights().iter().enumerate() {
            err = err.max((self.plan.row(i).sum() - w).abs());
        }
        for (j, &w) in nu.weights().iter().enumerate() {
            err = err.max((self.plan.column(j).sum() - w).abs());
        }
        err
    }
}

/// Certificate for the transport-cost sandwich bounds on one instance.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCertificate {
    /// Primal transport cost of the inverse-path cost function.
    pub k: f64,
    /// Sum of the two Wasserstein-1 dual values comparing `mu` with `g#nu`
    /// and `nu` with `h#mu`. This scaling makes `k >= ell_ot_prime` provable
    /// (push the optimal coupling through `g` and `h`) and pinches to
    /// equality in the exact-inverse case.
    pub ell_ot_prime: f64,
    /// Cycle-consistency value (with its 1/2 factor).
    pub ell_cycle: f64,
    /// `ell_ot_prime + ell_cycle / 2`.
    pub d: f64,
    /// `ell_ot_prime - eps <= k <= ell_ot_prime + ell_cycle + eps`.
    pub sandwich_ok: bool,
    /// `|k - d| <= ell_cycle / 2 + eps`.
    pub gap_ok: bool,
}

/// Solves the marginal-constrained transport LP for raw weight vectors.
///
/// Exposed separately so callers can hit the infeasibility error path with
/// weights that do not sum equal.
pub fn solve_primal_weights(
    cost: &Array2<f64>,
    mu_w: &[f64],
    nu_w: &[f64],
) -> Result<TransportPlan> {
    let n = mu_w.len();
    let m = nu_w.len();
    if cost.nrows() != n || cost.ncols() != m {
        return Err(Error::Instance("cost shape does not match weights".into()));
    }
    let sum_mu: f64 = mu_w.iter().sum();
    let sum_nu: f64 = nu_w.iter().sum();
    if (sum_mu - sum_nu).abs() > 1e-9 {
        return Err(Error::Instance(format!(
            "marginal masses differ: {sum_mu} vs {sum_nu}"
        )));
    }

    // Variables pi[i][j] flattened row-major; the final column-sum row is
    // implied by the others and dropped.
    let nv = n * m;
    let mut rows = Vec::with_capacity(n + m - 1);
    let mut rhs = Vec::with_capacity(n + m - 1);
    for i in 0..n {
        let mut row = vec![0.0; nv];
        for j in 0..m {
            row[i * m + j] = 1.0;
        }
        rows.push(row);
        rhs.push(mu_w[i]);
    }
    for j in 0..m.saturating_sub(1) {
        let mut row = vec![0.0; nv];
        for i in 0..n {
            row[i * m + j] = 1.0;
        }
        rows.push(row);
        rhs.push(nu_w[j]);
    }
    let lp = LinearProgram {
        objective: cost.iter().copied().collect(),
        rows,
        rhs,
    };
    let sol = DenseSimplex.solve(&lp)?;
    let plan = Array2::from_shape_vec((n, m), sol.x).expect("plan shape");
    Ok(TransportPlan {
        plan,
        value: sol.value,
    })
}

/// Optimal plan of the marginal-constrained LP; `value` is the minimum
/// average transport cost.
pub fn solve_primal(instance: &DiscreteOTInstance) -> Result<TransportPlan> {
    solve_primal_weights(
        &instance.cost,
        instance.mu.weights(),
        instance.nu.weights(),
    )
    .map_err(|e| match e {
        Error::Instance(msg) => Error::Instance(msg),
        other => Error::Oracle {
            msg: other.to_string(),
            dump: instance.dump(),
        },
    })
}

/// General Kantorovich dual as a finite LP: maximize
/// `sum_i mu_i phi_i + sum_j nu_j psi_j` subject to `phi_i + psi_j <= C_ij`.
///
/// Returns `(value, phi, psi)`.
pub fn solve_dual(instance: &DiscreteOTInstance) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = instance.mu.len();
    let m = instance.nu.len();
    // Free potentials split into positive parts, one slack per atom pair.
    // Pin phi_0 = 0: valid because the objective and constraints are
    // invariant under (phi + c, psi - c).
    let nfree = n + m - 1;
    let nv = 2 * nfree + n * m;
    let var = |k: usize, neg: bool| if neg { nfree + k } else { k };
    let mut rows = Vec::with_capacity(n * m);
    let mut rhs = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let mut row = vec![0.0; nv];
            if i > 0 {
                row[var(i - 1, false)] = 1.0;
                row[var(i - 1, true)] = -1.0;
            }
            row[var(n - 1 + j, false)] = 1.0;
            row[var(n - 1 + j, true)] = -1.0;
            row[2 * nfree + i * m + j] = 1.0;
            rows.push(row);
            rhs.push(instance.cost[[i, j]]);
        }
    }
    let mut objective = vec![0.0; nv];
    for i in 1..n {
        objective[var(i - 1, false)] = -instance.mu.weights()[i];
        objective[var(i - 1, true)] = instance.mu.weights()[i];
    }
    for j in 0..m {
        objective[var(n - 1 + j, false)] = -instance.nu.weights()[j];
        objective[var(n - 1 + j, true)] = instance.nu.weights()[j];
    }
    let lp = LinearProgram {
        objective,
        rows,
        rhs,
    };
    let sol = DenseSimplex.solve(&lp).map_err(|e| Error::Oracle {
        msg: e.to_string(),
        dump: instance.dump(),
    })?;
    let mut phi = vec![0.0; n];
    for i in 1..n {
        phi[i] = sol.x[var(i - 1, false)] - sol.x[var(i - 1, true)];
    }
    let mut psi = vec![0.0; m];
    for j in 0..m {
        psi[j] = sol.x[var(n - 1 + j, false)] - sol.x[var(n - 1 + j, true)];
    }
    Ok((-sol.value, phi, psi))
}

/// Wasserstein-1 distance via the primal transport LP with metric cost.
pub fn wasserstein1<F>(mu: &DiscretePointSet, nu: &DiscretePointSet, metric: F) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    if mu.dim() != nu.dim() {
        return Err(Error::Instance(format!(
            "metric spaces differ: dim {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    let instance = DiscreteOTInstance::from_cost_fn(mu.clone(), nu.clone(), metric)?;
    Ok(solve_primal(&instance)?.value)
}

/// Wasserstein-1 via the 1-Lipschitz potential LP: maximize
/// `sum mu_k phi(u_k) - sum nu_k phi(u_k)` over potentials on the union
/// support with `|phi(u_k) - phi(u_l)| <= d(u_k, u_l)` on all pairs.
pub fn wasserstein1_dual<F>(mu: &DiscretePointSet, nu: &DiscretePointSet, metric: F) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    if mu.dim() != nu.dim() {
        return Err(Error::Instance(format!(
            "metric spaces differ: dim {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    let mut union: Vec<Vec<f64>> = Vec::with_capacity(mu.len() + nu.len());
    let mut coeff: Vec<f64> = Vec::with_capacity(mu.len() + nu.len());
    for (p, &w) in mu.points().iter().zip(mu.weights()) {
        union.push(p.clone());
        coeff.push(w);
    }
    for (p, &w) in nu.points().iter().zip(nu.weights()) {
        union.push(p.clone());
        coeff.push(-w);
    }
    let k = union.len();
    // phi_0 pinned to 0 (objective is translation invariant); the rest split
    // into positive parts. One slack per ordered pair.
    let nfree = k - 1;
    let npairs = k * (k - 1);
    let nv = 2 * nfree + npairs;
    let mut rows = Vec::with_capacity(npairs);
    let mut rhs = Vec::with_capacity(npairs);
    let mut pair = 0usize;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let mut row = vec![0.0; nv];
            if a > 0 {
                row[a - 1] = 1.0;
                row[nfree + a - 1] = -1.0;
            }
            if b > 0 {
                row[b - 1] -= 1.0;
                row[nfree + b - 1] += 1.0;
            }
            row[2 * nfree + pair] = 1.0;
            rows.push(row);
            rhs.push(metric(&union[a], &union[b]));
            pair += 1;
        }
    }
    let mut objective = vec![0.0; nv];
    for a in 1..k {
        objective[a - 1] = -coeff[a];
        objective[nfree + a - 1] = coeff[a];
    }
    let lp = LinearProgram {
        objective,
        rows,
        rhs,
    };
    let sol = DenseSimplex.solve(&lp)?;
    Ok(-sol.value)
}

/// c-transform of a potential on X: `phi^c(y_j) = min_i (C_ij - phi_i)`.
pub fn c_transform(phi: &[f64], instance: &DiscreteOTInstance) -> Result<Vec<f64>> {
    if phi.len() != instance.mu.len() {
        return Err(Error::Dimension(format!(
            "potential has {} values for {} atoms",
            phi.len(),
            instance.mu.len()
        )));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Instance("potential values must be finite".into()));
    }
    let n = instance.mu.len();
    let m = instance.nu.len();
    let mut out = vec![f64::INFINITY; m];
    for j in 0..m {
        for i in 0..n {
            out[j] = out[j].min(instance.cost[[i, j]] - phi[i]);
        }
    }
    Ok(out)
}

/// Reverse c-transform back onto X: `psi^c(x_i) = min_j (C_ij - psi_j)`.
pub fn c_transform_back(psi: &[f64], instance: &DiscreteOTInstance) -> Result<Vec<f64>> {
    if psi.len() != instance.nu.len() {
        return Err(Error::Dimension(format!(
            "potential has {} values for {} atoms",
            psi.len(),
            instance.nu.len()
        )));
    }
    let n = instance.mu.len();
    let m = instance.nu.len();
    let mut out = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in 0..m {
            out[i] = out[i].min(instance.cost[[i, j]] - psi[j]);
        }
    }
    Ok(out)
}

/// Dual objective for the pair `(phi, phi^c)`.
pub fn dual_objective(phi: &[f64], instance: &DiscreteOTInstance) -> Result<f64> {
    let psi = c_transform(phi, instance)?;
    let a: f64 = instance
        .mu
        .weights()
        .iter()
        .zip(phi)
        .map(|(w, p)| w * p)
        .sum();
    let b: f64 = instance
        .nu
        .weights()
        .iter()
        .zip(&psi)
        .map(|(w, p)| w * p)
        .sum();
    Ok(a + b)
}

/// Certifies the sandwich bounds for maps `g: Y -> X` and `h: X -> Y`.
///
/// `k` is the primal LP value under the cost `||y - h(x)|| + ||g(y) - x||`,
/// `ell_ot_prime` the sum of the two Wasserstein-1 duals comparing `mu` with
/// `g#nu` and `nu` with `h#mu`, and `ell_cycle` the weighted round-trip
/// penalty (with its 1/2 factor). All distances Euclidean.
pub fn certify_prop1<G, H>(
    mu: &DiscretePointSet,
    nu: &DiscretePointSet,
    g: G,
    h: H,
) -> Result<BoundCertificate>
where
    G: Fn(&[f64]) -> Vec<f64>,
    H: Fn(&[f64]) -> Vec<f64>,
{
    let dx = mu.dim();
    let dy = nu.dim();
    for y in nu.points() {
        if g(y).len() != dx {
            return Err(Error::Instance(
                "g must map Y points into the X space".into(),
            ));
        }
    }
    for x in mu.points() {
        if h(x).len() != dy {
            return Err(Error::Instance(
                "h must map X points into the Y space".into(),
            ));
        }
    }

    let instance = DiscreteOTInstance::from_cost_fn(mu.clone(), nu.clone(), |x, y| {
        euclidean(y, &h(x)) + euclidean(&g(y), x)
    })?;
    let k = solve_primal(&instance)?.value;

    let mut ell_cycle = 0.0;
    for (x, &w) in mu.points().iter().zip(mu.weights()) {
        ell_cycle += w * euclidean(x, &g(&h(x)));
    }
    for (y, &w) in nu.points().iter().zip(nu.weights()) {
        ell_cycle += w * euclidean(y, &h(&g(y)));
    }
    ell_cycle *= 0.5;

    let g_push = DiscretePointSet::new(nu.points().iter().map(|y| g(y)).collect(), nu.weights().to_vec())?;
    let h_push = DiscretePointSet::new(mu.points().iter().map(|x| h(x)).collect(), mu.weights().to_vec())?;
    let w1_x = wasserstein1_dual(mu, &g_push, euclidean)?;
    let w1_y = wasserstein1_dual(nu, &h_push, euclidean)?;
    let ell_ot_prime = w1_x + w1_y;

    let d = ell_ot_prime + 0.5 * ell_cycle;
    let sandwich_ok =
        ell_ot_prime - CERT_EPS <= k && k <= ell_ot_prime + ell_cycle + CERT_EPS;
    let gap_ok = (k - d).abs() <= 0.5 * ell_cycle + CERT_EPS;
    Ok(BoundCertificate {
        k,
        ell_ot_prime,
        ell_cycle,
        d,
        sandwich_ok,
        gap_ok,
    })
}

/// True iff the image of `mu` under `t` equals `nu` atom for atom.
pub fn pushforward_check<T>(t: T, mu: &DiscretePointSet, nu: &DiscretePointSet) -> bool
where
    T: Fn(&[f64]) -> Vec<f64>,
{
    let image = merge_atoms(
        &mu.points().iter().map(|p| t(p)).collect::<Vec<_>>(),
        mu.weights(),
    );
    let target = merge_atoms(nu.points(), nu.weights());
    if image.len() != target.len() {
        return false;
    }
    image.iter().all(|(p, w)| {
        target
            .iter()
            .any(|(q, v)| euclidean(p, q) <= ATOM_TOL && (w - v).abs() <= ATOM_TOL)
    })
}

/// Affine map `x -> A x + b`, the test-instance family for certification.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub matrix: Array2<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Array2::eye(dim),
            offset: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.offset.clone();
        for (r, o) in out.iter_mut().enumerate() {
            for (c, &v) in x.iter().enumerate() {
                *o += self.matrix[[r, c]] * v;
            }
        }
        out
    }
}
