//! First variation of the state along a convex control perturbation.

use rayon::prelude::*;
use serde::Serialize;

use crate::forward::{
    perturb_control, simulate_paths, ControlProcess, Ensemble, Estimate, ForwardError,
    NoiseEnsemble, PathHistory, Problem, Result,
};

/// `Y` on all grid nodes; zero on the initial segment.
pub type VariationPath = PathHistory;

/// Linearized scheme `Y_{n+1} = S(dt)[Y_n + dt int (D_xf Y(t_n+theta) + D_uf v_n) mu_f(dtheta)]`,
/// the exact derivative of the forward stepper in the direction `v`.
pub fn solve_first_variation(
    problem: &Problem,
    path: &PathHistory,
    u_bar: &ControlProcess,
    v: &ControlProcess,
) -> Result<VariationPath> {
    problem.check_control(u_bar)?;
    problem.check_control(v)?;
    if path.dim != problem.state_dim() || path.nodes() != problem.grid.nodes() {
        return Err(ForwardError::Dimension {
            what: "state path",
            expected: problem.grid.nodes() * problem.state_dim(),
            got: path.data.len(),
        });
    }
    let g = &problem.grid;
    let l = g.delay_steps;
    let dim = problem.state_dim();
    let mut y = PathHistory::zeros(g.nodes(), dim);
    let mut ws = problem.workspace();
    let mut yhat = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    for n in 0..g.steps {
        next.copy_from_slice(y.node(l + n));
        let vn = v.at(n);
        let v_zero = vn.iter().all(|x| *x == 0.0);
        for node in problem.drift_nodes() {
            let scale = g.dt * node.weight;
            problem.delayed_state(path, n, node, &mut ws.x);
            problem.delayed_state(&y, n, node, &mut yhat);
            problem
                .model
                .drift_dx_add(&ws.x, &yhat, scale, &mut ws.scratch, &mut next);
            if !v_zero {
                problem
                    .model
                    .drift_du_add(vn, scale, &mut ws.scratch, &mut next);
            }
        }
        problem.step_propagator().apply(&mut next);
        y.node_mut(l + n + 1).copy_from_slice(&next);
    }
    Ok(y)
}

/// One row of the remainder table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemainderRow {
    pub rho: f64,
    pub ratio: f64,
    pub mc_stderr: f64,
}

/// `E sup_t |X^rho - X_bar - rho Y|^2 / rho^2` with common noise across `rho`.
pub fn remainder_diagnostic(
    problem: &Problem,
    u_bar: &ControlProcess,
    w: &ControlProcess,
    rhos: &[f64],
    noise: &NoiseEnsemble,
) -> Result<Vec<RemainderRow>> {
    let base = simulate_paths(problem, u_bar, noise)?;
    let v = w.difference(u_bar);
    let ys = variations(problem, &base, u_bar, &v)?;
    rhos.iter()
        .map(|&rho| {
            let u = perturb_control(u_bar, w, rho)?;
            let pert = simulate_paths(problem, &u, noise)?;
            let samples: Vec<f64> = pert
                .paths
                .iter()
                .zip(base.paths.iter().zip(&ys))
                .map(|(xr, (xb, y))| {
                    let mut sup: f64 = 0.0;
                    for i in 0..xr.nodes() {
                        let s: f64 = xr
                            .node(i)
                            .iter()
                            .zip(xb.node(i))
                            .zip(y.node(i))
                            .map(|((a, b), c)| (a - b - rho * c).powi(2))
                            .sum();
                        sup = sup.max(s);
                    }
                    if rho == 0.0 {
                        0.0
                    } else {
                        sup / (rho * rho)
                    }
                })
                .collect();
            let e = Estimate::from_samples(&samples);
            Ok(RemainderRow {
                rho,
                ratio: e.mean,
                mc_stderr: e.stderr,
            })
        })
        .collect()
}

/// First variation for every path of an ensemble.
pub fn variations(
    problem: &Problem,
    ensemble: &Ensemble,
    u_bar: &ControlProcess,
    v: &ControlProcess,
) -> Result<Vec<VariationPath>> {
    ensemble
        .paths
        .par_iter()
        .map(|p| solve_first_variation(problem, p, u_bar, v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_path, ControlBox, InitialPath, TimeGrid};
    use crate::measures::RegularMeasure;
    use crate::spectral::{
        CoefficientSpec, Diffusion, DriftFamily, Model, OperatorSpec, RunningCost, TerminalCost,
    };

    fn problem(a: f64, drift: DriftFamily, mu_f: RegularMeasure, dt: f64) -> Problem {
        let grid = TimeGrid::new(dt, 1.0, 0.2).unwrap();
        let model = Model::new(
            OperatorSpec::scalar(a),
            CoefficientSpec {
                drift,
                running: RunningCost::zero(),
                terminal: TerminalCost::Linear { k: 0.0 },
                diffusion: Diffusion::Constant { sigma: 0.0 },
            },
        )
        .unwrap();
        Problem::new(
            model,
            grid,
            mu_f,
            RegularMeasure::zero(-0.2, 0.0).unwrap(),
            RegularMeasure::dirac(0.8, 1.0, 1.0).unwrap(),
            InitialPath::constant(vec![0.5]),
            ControlBox::unbounded(),
        )
        .unwrap()
    }

    #[test]
    fn zero_direction_gives_zero() {
        let p = problem(
            -0.3,
            DriftFamily::Tanh {
                alpha: 1.0,
                beta: 1.0,
                c: 1.0,
            },
            RegularMeasure::dirac(-0.2, 0.0, -0.2).unwrap(),
            0.01,
        );
        let u = ControlProcess::constant(p.grid.steps, 1, 0.2);
        let x = simulate_path(&p, &u, None).unwrap();
        let y = solve_first_variation(&p, &x, &u, &ControlProcess::constant(p.grid.steps, 1, 0.0))
            .unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn control_only_drift_matches_quadrature() {
        // D_xf = 0: Y(t) = int_0^t e^{a(t-s)} c mu_f([-d,0]) v(s) ds with v = 1
        let (a, c, mass) = (-0.7, 1.3, 0.8);
        let mu = RegularMeasure::uniform(-0.2, 0.0, mass, 4).unwrap();
        let mut errs = Vec::new();
        for dt in [0.01, 0.005] {
            let p = problem(a, DriftFamily::Affine { b: 0.0, c, k: 0.0 }, mu.clone(), dt);
            let u = ControlProcess::constant(p.grid.steps, 1, 0.0);
            let v = ControlProcess::constant(p.grid.steps, 1, 1.0);
            let x = simulate_path(&p, &u, None).unwrap();
            let y = solve_first_variation(&p, &x, &u, &v).unwrap();
            let t = 1.0;
            let exact = c * mass * (1.0 - (a * t).exp()) / -a;
            errs.push((y.node(p.grid.nodes() - 1)[0] - exact).abs());
        }
        assert!(errs[0] < 1e-2 && errs[1] < 0.6 * errs[0], "{errs:?}");
    }

    #[test]
    fn linear_without_delay_matches_variation_of_constants() {
        // Y' = (a + b) Y + c v, v(t) = t
        let (a, b, c) = (-0.5, 0.3, 2.0);
        let mu = RegularMeasure::dirac(-0.2, 0.0, 0.0).unwrap();
        let mut errs = Vec::new();
        for dt in [0.01, 0.005] {
            let p = problem(a, DriftFamily::Affine { b, c, k: 0.0 }, mu.clone(), dt);
            let u = ControlProcess::constant(p.grid.steps, 1, 0.0);
            let v = ControlProcess::from_fn(p.grid.steps, 1, |n, _| n as f64 * dt);
            let x = simulate_path(&p, &u, None).unwrap();
            let y = solve_first_variation(&p, &x, &u, &v).unwrap();
            let k = a + b;
            let exact = |t: f64| c * (((k * t).exp() - 1.0) / (k * k) - t / k);
            let err = (0..=p.grid.steps)
                .map(|n| (y.node(p.grid.delay_steps + n)[0] - exact(n as f64 * dt)).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] < 2e-2 && errs[1] < 0.6 * errs[0], "{errs:?}");
    }
}
