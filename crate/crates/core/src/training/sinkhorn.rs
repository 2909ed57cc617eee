//! Entropic optimal transport by Sinkhorn scaling.
//!
//! [`sinkhorn`] is the standalone solver, run on potentials in the log
//! domain so that small regularizers do not underflow. [`TransportLoss`] is
//! the differentiable variant used inside the group-contrastive loss: it
//! runs the scaling in the kernel domain and back-propagates through every
//! iteration it performed.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::tape::CustomBackward;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornPlan {
    pub plan: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute row-marginal error of the returned plan.
    pub residual: f64,
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Solves `min ⟨P, C⟩ − ε H(P)` subject to `P·1 = mu`, `Pᵀ·1 = nu`.
///
/// Stops once the row marginals are within `tol`; otherwise returns the last
/// iterate with `converged = false`.
pub fn sinkhorn(
    cost: &Array2<f64>,
    mu: &[f64],
    nu: &[f64],
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornPlan> {
    let (a, b) = cost.dim();
    if mu.len() != a || nu.len() != b {
        return Err(Error::Shape(format!(
            "cost is {a} x {b} but marginals have lengths {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("sinkhorn eps must be positive, got {eps}")));
    }
    if mu.iter().chain(nu).any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Validation("marginals must be finite and non-negative".into()));
    }
    let (sa, sb): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Validation(format!("marginal masses differ: {sa} vs {sb}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("cost matrix has non-finite entries".into()));
    }

    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; a];
    let mut g = vec![0.0; b];
    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((a, b), |(i, j)| {
            let z = (f[i] + g[j] - cost[[i, j]]) / eps;
            if z == f64::NEG_INFINITY || z.is_nan() {
                0.0
            } else {
                z.exp()
            }
        })
    };
    let row_residual = |plan: &Array2<f64>| {
        plan.rows()
            .into_iter()
            .zip(mu)
            .map(|(r, m)| (r.sum() - m).abs())
            .fold(0.0, f64::max)
    };

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..a {
            f[i] = if mu[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * log_mu[i] - eps * logsumexp((0..b).map(|j| (g[j] - cost[[i, j]]) / eps))
            };
        }
        for j in 0..b {
            g[j] = if nu[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * log_nu[j] - eps * logsumexp((0..a).map(|i| (f[i] - cost[[i, j]]) / eps))
            };
        }
        residual = row_residual(&plan_of(&f, &g));
        if residual < tol {
            break;
        }
    }
    let plan = plan_of(&f, &g);
    let converged = residual < tol;
    if !converged {
        log::warn!("sinkhorn stopped after {iterations} iterations with residual {residual:.3e}");
    }
    Ok(SinkhornPlan {
        plan,
        iterations,
        converged,
        residual,
    })
}

/// `⟨Π, C⟩ + λ·⟨Π, penalty⟩` where `Π` is the Sinkhorn plan of `C`
/// restricted to the active rows and columns with uniform marginals.
pub struct TransportLoss {
    rows: Vec<usize>,
    cols: Vec<usize>,
    eps: f64,
    /// `C + λ·penalty` on the active block.
    weighted: Array2<f64>,
    kernel: Array2<f64>,
    /// Scalings after each iteration.
    us: Vec<Array1<f64>>,
    vs: Vec<Array1<f64>>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportLoss {
    /// `penalty` is indexed like `cost` (`m x n`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cost: &Array2<f64>,
        penalty: &Array2<f64>,
        rows: Vec<usize>,
        cols: Vec<usize>,
        eps: f64,
        neg_weight: f64,
        max_iter: usize,
        tol: f64,
    ) -> Self {
        let (a, b) = (rows.len(), cols.len());
        let sub = Array2::from_shape_fn((a, b), |(i, j)| cost[[rows[i], cols[j]]]);
        let weighted = Array2::from_shape_fn((a, b), |(i, j)| {
            sub[[i, j]] + neg_weight * penalty[[rows[i], cols[j]]]
        });
        let kernel = sub.mapv(|c| (-c / eps).exp());
        let mu = 1.0 / a as f64;
        let nu = 1.0 / b as f64;
        let mut v = Array1::<f64>::ones(b);
        let mut us = Vec::new();
        let mut vs = Vec::new();
        let mut converged = false;
        for _ in 0..max_iter.max(1) {
            let kv = kernel.dot(&v);
            let u = kv.mapv(|x| mu / x);
            let ktu = kernel.t().dot(&u);
            v = ktu.mapv(|x| nu / x);
            let rows_now = &u * &kernel.dot(&v);
            let residual = rows_now.iter().map(|r| (r - mu).abs()).fold(0.0, f64::max);
            us.push(u);
            vs.push(v.clone());
            if residual < tol {
                converged = true;
                break;
            }
        }
        let (u, v) = (us.last().expect("one iteration"), vs.last().expect("one iteration"));
        let mut value = 0.0;
        for i in 0..a {
            for j in 0..b {
                value += u[i] * kernel[[i, j]] * v[j] * weighted[[i, j]];
            }
        }
        let iterations = us.len();
        TransportLoss {
            rows,
            cols,
            eps,
            weighted,
            kernel,
            us,
            vs,
            value,
            iterations,
            converged,
        }
    }

    pub fn plan(&self) -> Array2<f64> {
        let u = self.us.last().expect("one iteration");
        let v = self.vs.last().expect("one iteration");
        let (a, b) = self.kernel.dim();
        Array2::from_shape_fn((a, b), |(i, j)| u[i] * self.kernel[[i, j]] * v[j])
    }
}

impl CustomBackward for TransportLoss {
    fn backward(&self, input: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        let g0 = grad_out[[0, 0]];
        let k = &self.kernel;
        let (a, b) = k.dim();
        let plan = self.plan();
        let t_last = self.us.len() - 1;
        let (u_t, v_t) = (&self.us[t_last], &self.vs[t_last]);

        // L = Σ Π ⊙ W with Π = diag(u) K diag(v); W depends on C directly.
        let mut d_cost = &plan * g0;
        let d_plan = &self.weighted * g0;
        let mut d_kernel = Array2::from_shape_fn((a, b), |(i, j)| d_plan[[i, j]] * u_t[i] * v_t[j]);
        let mut du = Array1::from_shape_fn(a, |i| (0..b).map(|j| d_plan[[i, j]] * k[[i, j]] * v_t[j]).sum::<f64>());
        let mut dv = Array1::from_shape_fn(b, |j| (0..a).map(|i| d_plan[[i, j]] * u_t[i] * k[[i, j]]).sum::<f64>());

        let ones = Array1::<f64>::ones(b);
        for t in (0..=t_last).rev() {
            let u = &self.us[t];
            let v = &self.vs[t];
            // v = nu / (Kᵀ u)
            let ktu = k.t().dot(u);
            let da = Array1::from_shape_fn(b, |j| -dv[j] * v[j] / ktu[j]);
            du = du + k.dot(&da);
            for i in 0..a {
                for j in 0..b {
                    d_kernel[[i, j]] += u[i] * da[j];
                }
            }
            // u = mu / (K v_prev)
            let v_prev = if t == 0 { &ones } else { &self.vs[t - 1] };
            let kv = k.dot(v_prev);
            let db = Array1::from_shape_fn(a, |i| -du[i] * u[i] / kv[i]);
            dv = k.t().dot(&db);
            for i in 0..a {
                for j in 0..b {
                    d_kernel[[i, j]] += db[i] * v_prev[j];
                }
            }
            du = Array1::zeros(a);
        }
        d_cost = d_cost + &(&d_kernel * k * (-1.0 / self.eps));

        let mut out = Array2::zeros(input.dim());
        for (i, &r) in self.rows.iter().enumerate() {
            for (j, &c) in self.cols.iter().enumerate() {
                out[[r, c]] = d_cost[[i, j]];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::array;

    #[test]
    fn constant_cost_gives_outer_product() {
        let mu = [0.2, 0.3, 0.5];
        let nu = [0.6, 0.4];
        let res = sinkhorn(&Array2::from_elem((3, 2), 0.7), &mu, &nu, 0.1, 100, 1e-12).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((res.plan[[i, j]] - mu[i] * nu[j]).abs() < 1e-12);
            }
        }
        assert!(res.converged);
    }

    #[test]
    fn single_cell() {
        let res = sinkhorn(&array![[3.0]], &[2.0], &[2.0], 0.5, 10, 1e-12).unwrap();
        assert!((res.plan[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let c = Array2::zeros((2, 2));
        assert!(sinkhorn(&c, &[0.5, 0.5], &[0.7, 0.7], 0.1, 10, 1e-9).is_err());
        assert!(sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], 0.0, 10, 1e-9).is_err());
        assert!(sinkhorn(&c, &[-0.5, 1.5], &[0.5, 0.5], 0.1, 10, 1e-9).is_err());
        assert!(sinkhorn(&c, &[1.0], &[0.5, 0.5], 0.1, 10, 1e-9).is_err());
    }

    #[test]
    fn zero_mass_rows_are_empty() {
        let c = array![[0.1, 0.9], [0.4, 0.2], [0.3, 0.3]];
        let res = sinkhorn(&c, &[0.5, 0.0, 0.5], &[0.5, 0.5], 0.1, 500, 1e-10).unwrap();
        assert!(res.converged);
        assert!(res.plan.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let res = sinkhorn(&c, &[0.9, 0.1], &[0.1, 0.9], 0.01, 1, 1e-14).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn small_eps_concentrates_on_optimal_assignment() {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut rng = crate::rng::substream(6, "sinkhorn.assign");
        let mut tried = 0;
        while tried < 20 {
            let c = Array2::from_shape_fn((3, 3), |_| rand::Rng::random_range(&mut rng, 0.0..1.0));
            let mut costs: Vec<(f64, [usize; 3])> =
                perms.iter().map(|p| ((0..3).map(|i| c[[i, p[i]]]).sum(), *p)).collect();
            costs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if costs[1].0 - costs[0].0 < 0.05 {
                continue;
            }
            tried += 1;
            let res = sinkhorn(&c, &[1.0 / 3.0; 3], &[1.0 / 3.0; 3], 0.002, 20000, 1e-9).unwrap();
            for (i, &j) in costs[0].1.iter().enumerate() {
                assert!(res.plan[[i, j]] > 0.3, "{:?}", res.plan);
            }
        }
    }

    #[test]
    fn kernel_and_log_domain_agree() {
        let mut rng = crate::rng::substream(4, "sinkhorn");
        let c = Array2::from_shape_fn((3, 4), |_| rand::Rng::random_range(&mut rng, 0.0..2.0));
        let zero = Array2::zeros((3, 4));
        let op = TransportLoss::new(&c, &zero, vec![0, 1, 2], vec![0, 1, 2, 3], 0.2, 1.0, 1000, 1e-13);
        let log = sinkhorn(&c, &[1.0 / 3.0; 3], &[0.25; 4], 0.2, 1000, 1e-13).unwrap();
        for (a, b) in op.plan().iter().zip(log.plan.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transport_gradient_matches_finite_differences() {
        let mut rng = crate::rng::substream(5, "sinkhorn.grad");
        let c0 = Array2::from_shape_fn((4, 3), |_| rand::Rng::random_range(&mut rng, 0.0..2.0));
        let pen = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        let rows = vec![0, 1, 2];
        let cols = vec![0, 1, 2];
        // fixed iteration count so the map is smooth
        let eval = |c: &Array2<f64>| TransportLoss::new(c, &pen, rows.clone(), cols.clone(), 0.3, 1.0, 40, 0.0);
        let op = eval(&c0);
        let mut tape = Tape::new();
        let x = tape.leaf(c0.clone());
        let value = op.value;
        let y = tape.custom(x, Array2::from_elem((1, 1), value), Box::new(op));
        let g = tape.backward(y).get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut cp = c0.clone();
                cp[[i, j]] += h;
                let mut cm = c0.clone();
                cm[[i, j]] -= h;
                let numeric = (eval(&cp).value - eval(&cm).value) / (2.0 * h);
                assert!(
                    (numeric - g[[i, j]]).abs() < 1e-7 * (1.0 + numeric.abs()),
                    "({i},{j}) numeric {numeric} analytic {}",
                    g[[i, j]]
                );
            }
        }
    }
}
