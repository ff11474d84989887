//! Cost functional, Hamiltonian gradient, duality checks and projected
//! gradient descent over deterministic open-loop controls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::absde::{solve_absde, AbsdeError, AbsdeOptions, AdjointEnsemble};
use crate::forward::{
    simulate_deterministic, simulate_paths, ControlProcess, Ensemble, Estimate, ForwardError,
    NoiseEnsemble, PathHistory, Problem,
};
use crate::regression::RegressionBasis;
use crate::variation::variations;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmpError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Absde(#[from] AbsdeError),
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
}

pub type Result<T, E = SmpError> = std::result::Result<T, E>;

/// Paths under `u`: one deterministic path without noise or diffusion.
pub fn simulate(
    problem: &Problem,
    u: &ControlProcess,
    noise: Option<&NoiseEnsemble>,
) -> Result<Ensemble> {
    Ok(match noise {
        Some(n) if problem.stochastic() => simulate_paths(problem, u, n)?,
        _ => simulate_deterministic(problem, u)?,
    })
}

/// Solver options matching the noise setting.
pub fn adjoint_options(problem: &Problem, noise: Option<&NoiseEnsemble>) -> AbsdeOptions {
    match noise {
        Some(n) if problem.stochastic() => AbsdeOptions {
            basis: Some(RegressionBasis::default_for(problem)),
            noise: Some(*n),
        },
        _ => AbsdeOptions::default(),
    }
}

fn path_cost(problem: &Problem, path: &PathHistory, u: &ControlProcess) -> f64 {
    let mut ws = problem.workspace();
    let dt = problem.grid.dt;
    let running: f64 = (0..problem.grid.steps)
        .map(|n| dt * problem.running_integral(path, n, u.at(n), &mut ws))
        .sum();
    running + problem.terminal_integral(path, &mut ws)
}

/// Per-path costs of an ensemble.
pub fn path_costs(problem: &Problem, ensemble: &Ensemble, u: &ControlProcess) -> Vec<f64> {
    ensemble
        .paths
        .par_iter()
        .map(|p| path_cost(problem, p, u))
        .collect()
}

/// `J(u) = E[int int l mu_l dt + int h mu_h]`.
pub fn cost(
    problem: &Problem,
    u: &ControlProcess,
    noise: Option<&NoiseEnsemble>,
) -> Result<Estimate> {
    problem.check_control(u)?;
    let ens = simulate(problem, u, noise)?;
    Ok(Estimate::from_samples(&path_costs(problem, &ens, u)))
}

/// `H(x, p, u)` at step `n`: `int <p, f(X(t_n + theta), u)> mu_f + int l(X(t_n + theta), u) mu_l`.
pub fn hamiltonian(problem: &Problem, path: &PathHistory, p: &[f64], n: usize, u: &[f64]) -> f64 {
    let mut ws = problem.workspace();
    let mut f = vec![0.0; problem.state_dim()];
    problem.drift_integral_add(path, n, u, 1.0, &mut ws, &mut f);
    let pf: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
    pf + problem.running_integral(path, n, u, &mut ws)
}

/// `D_uH` at step `n` as a U-gradient.
pub fn hamiltonian_du(problem: &Problem, p: &[f64], u: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut scratch = problem.model.scratch();
    let mass_f: f64 = problem.drift_nodes().iter().map(|k| k.weight).sum();
    let mass_l: f64 = problem.running_nodes().iter().map(|k| k.weight).sum();
    problem
        .model
        .drift_du_adjoint_add(p, mass_f, &mut scratch, out);
    problem.model.running_du_add(u, mass_l, out);
}

/// `G_n = E[D_uH(X, p_n, u_n)]` for every step.
pub fn expected_gradient(
    problem: &Problem,
    adjoint: &AdjointEnsemble,
    u: &ControlProcess,
) -> ControlProcess {
    let steps = problem.grid.steps;
    let dim = problem.control_dim();
    let m = adjoint.paths.len() as f64;
    let mut g = ControlProcess::constant(steps, dim, 0.0);
    let mut mean_p = vec![0.0; adjoint.dim];
    for n in 0..steps {
        mean_p.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..adjoint.paths.len() {
            for (a, b) in mean_p.iter_mut().zip(adjoint.p(i, n)) {
                *a += b / m;
            }
        }
        hamiltonian_du(problem, &mean_p, u.at(n), g.at_mut(n));
    }
    g
}

/// `|E D_uH|` in `L^2(0, T; U)` with an error bar: the per-path projection of
/// `D_uH` onto the normalized mean has mean `|E D_uH|`.
pub fn gradient_norm_estimate(
    problem: &Problem,
    adjoint: &AdjointEnsemble,
    u: &ControlProcess,
) -> Estimate {
    let g = expected_gradient(problem, adjoint, u);
    let dt = problem.grid.dt;
    let norm = g.l2_norm(&problem.model, dt);
    if norm == 0.0 {
        return Estimate {
            mean: 0.0,
            stderr: 0.0,
        };
    }
    let samples: Vec<f64> = (0..adjoint.paths.len())
        .into_par_iter()
        .map(|i| {
            let mut du = vec![0.0; problem.control_dim()];
            (0..problem.grid.steps)
                .map(|n| {
                    hamiltonian_du(problem, adjoint.p(i, n), u.at(n), &mut du);
                    dt * problem.model.u_inner(&du, g.at(n)) / norm
                })
                .sum()
        })
        .collect();
    Estimate::from_samples(&samples)
}

/// Derivative of `J` at `u` along `v` by Richardson-extrapolated forward
/// differences with common noise; the error bar is the per-path spread.
pub fn cost_gateaux_fd(
    problem: &Problem,
    u: &ControlProcess,
    v: &ControlProcess,
    rho: f64,
    noise: Option<&NoiseEnsemble>,
) -> Result<Estimate> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(SmpError::Step(rho));
    }
    problem.check_control(u)?;
    problem.check_control(v)?;
    let base = simulate(problem, u, noise)?;
    let j0 = path_costs(problem, &base, u);
    let shifted = |r: f64| -> Result<Vec<f64>> {
        let ur = u.scaled_add(v, r);
        let e = simulate(problem, &ur, noise)?;
        Ok(path_costs(problem, &e, &ur))
    };
    let j1 = shifted(rho)?;
    let j2 = shifted(rho / 2.0)?;
    let samples: Vec<f64> = j0
        .iter()
        .zip(j1.iter().zip(&j2))
        .map(|(a, (b, c))| 2.0 * (c - a) / (rho / 2.0) - (b - a) / rho)
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// `E sum_n dt <D_uH_n, v_n>_U`, per path.
pub fn cost_gateaux_adjoint(
    problem: &Problem,
    adjoint: &AdjointEnsemble,
    u: &ControlProcess,
    v: &ControlProcess,
) -> Estimate {
    let dt = problem.grid.dt;
    let samples: Vec<f64> = (0..adjoint.paths.len())
        .into_par_iter()
        .map(|i| {
            let mut du = vec![0.0; problem.control_dim()];
            (0..problem.grid.steps)
                .map(|n| {
                    hamiltonian_du(problem, adjoint.p(i, n), u.at(n), &mut du);
                    dt * problem.model.u_inner(&du, v.at(n))
                })
                .sum()
        })
        .collect();
    Estimate::from_samples(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityReport {
    /// `E[int <D_xh, Y> mu_h + int int <D_xl, Y> mu_l dt]`.
    pub lhs: Estimate,
    /// `E int <p, D_uf v> mu_f dt`.
    pub rhs: Estimate,
    /// Per-path `lhs - rhs`.
    pub gap: Estimate,
}

/// Duality between the first variation along `v` and the adjoint.
pub fn duality_gap(
    problem: &Problem,
    ensemble: &Ensemble,
    adjoint: &AdjointEnsemble,
    u: &ControlProcess,
    v: &ControlProcess,
) -> Result<DualityReport> {
    let ys = variations(problem, ensemble, u, v)?;
    let dt = problem.grid.dt;
    let dim = problem.state_dim();
    let mass_f: f64 = problem.drift_nodes().iter().map(|k| k.weight).sum();
    let rows: Vec<(f64, f64)> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let x = &ensemble.paths[i];
            let y = &ys[i];
            let mut ws = problem.workspace();
            let mut yhat = vec![0.0; dim];
            let mut grad = vec![0.0; dim];
            let mut lhs = 0.0;
            for node in problem.terminal_nodes() {
                x.interpolate(node.index, node.lam, &mut ws.x);
                y.interpolate(node.index, node.lam, &mut yhat);
                grad.iter_mut().for_each(|g| *g = 0.0);
                problem
                    .model
                    .terminal_dx_add(&ws.x, node.weight, &mut ws.scratch, &mut grad);
                lhs += dot(&grad, &yhat);
            }
            for n in 0..problem.grid.steps {
                for node in problem.running_nodes() {
                    problem.delayed_state(x, n, node, &mut ws.x);
                    problem.delayed_state(y, n, node, &mut yhat);
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    problem.model.running_dx_add(
                        &ws.x,
                        dt * node.weight,
                        &mut ws.scratch,
                        &mut grad,
                    );
                    lhs += dot(&grad, &yhat);
                }
            }
            let mut du = vec![0.0; problem.control_dim()];
            let mut rhs = 0.0;
            for n in 0..problem.grid.steps {
                du.iter_mut().for_each(|g| *g = 0.0);
                problem.model.drift_du_adjoint_add(
                    adjoint.p(i, n),
                    mass_f,
                    &mut ws.scratch,
                    &mut du,
                );
                rhs += dt * problem.model.u_inner(&du, v.at(n));
            }
            (lhs, rhs)
        })
        .collect();
    let lhs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rhs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let gap: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(DualityReport {
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        gap: Estimate::from_samples(&gap),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves state and adjoint at `u`.
pub fn state_and_adjoint(
    problem: &Problem,
    u: &ControlProcess,
    noise: Option<&NoiseEnsemble>,
) -> Result<(Ensemble, AdjointEnsemble)> {
    let ens = simulate(problem, u, noise)?;
    let adj = solve_absde(problem, &ens, u, &adjoint_options(problem, noise))?;
    Ok((ens, adj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentOptions {
    pub step: f64,
    /// Armijo constant in `J(u+) <= J(u) - (c / step) |u+ - u|^2`.
    pub armijo: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            step: 1.0,
            armijo: 1e-4,
            tol: 1e-6,
            max_iter: 200,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentStep {
    pub iteration: usize,
    pub cost: f64,
    pub cost_stderr: f64,
    pub projected_gradient: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DescentReport {
    pub control: ControlProcess,
    pub history: Vec<DescentStep>,
    pub converged: bool,
    /// Line search exhausted its halvings.
    pub stalled: bool,
}

/// `|P(u - G) - u|` in `L^2(0, T; U)`.
pub fn projected_gradient_norm(problem: &Problem, u: &ControlProcess, g: &ControlProcess) -> f64 {
    let b = problem.bounds;
    let d = ControlProcess {
        dim: u.dim,
        values: u
            .values
            .iter()
            .zip(&g.values)
            .map(|(a, gi)| b.clamp(a - gi) - a)
            .collect(),
    };
    d.l2_norm(&problem.model, problem.grid.dt)
}

/// Projected gradient descent with Armijo backtracking, common noise throughout.
pub fn projected_gradient_descent(
    problem: &Problem,
    u0: &ControlProcess,
    noise: Option<&NoiseEnsemble>,
    opts: &DescentOptions,
) -> Result<DescentReport> {
    problem.check_control(u0)?;
    let b = problem.bounds;
    let dt = problem.grid.dt;
    let mut u = ControlProcess {
        dim: u0.dim,
        values: u0.values.iter().map(|v| b.clamp(*v)).collect(),
    };
    let mut history = Vec::new();
    let mut step = opts.step;
    let (mut ens, mut adj) = state_and_adjoint(problem, &u, noise)?;
    let mut j = Estimate::from_samples(&path_costs(problem, &ens, &u));
    let mut converged = false;
    let mut stalled = false;
    for it in 0..=opts.max_iter {
        let g = expected_gradient(problem, &adj, &u);
        let pg = projected_gradient_norm(problem, &u, &g);
        history.push(DescentStep {
            iteration: it,
            cost: j.mean,
            cost_stderr: j.stderr,
            projected_gradient: pg,
            step,
        });
        if pg <= opts.tol {
            converged = true;
            break;
        }
        if it == opts.max_iter {
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = ControlProcess {
                dim: u.dim,
                values: u
                    .values
                    .iter()
                    .zip(&g.values)
                    .map(|(a, gi)| b.clamp(a - step * gi))
                    .collect(),
            };
            let moved = cand.difference(&u).l2_norm(&problem.model, dt);
            let e = simulate(problem, &cand, noise)?;
            let jc = Estimate::from_samples(&path_costs(problem, &e, &cand));
            if jc.mean <= j.mean - opts.armijo / step * moved * moved {
                accepted = Some((cand, e, jc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, e, jc)) => {
                adj = solve_absde(problem, &e, &cand, &adjoint_options(problem, noise))?;
                u = cand;
                ens = e;
                j = jc;
                // let the step grow back after easy iterations
                step = (step * 2.0).min(opts.step);
            }
            None => {
                stalled = true;
                break;
            }
        }
    }
    let _ = ens;
    Ok(DescentReport {
        control: u,
        history,
        converged,
        stalled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViReport {
    /// `min_{w, n} E <D_uH_n, w - u_n>_U` over the probes.
    pub margin: f64,
    /// `min_w sum_n dt E <D_uH_n, w - u_n>_U` over the probes.
    pub integrated_margin: f64,
    /// Exact pointwise minimum over the box (finite boxes only).
    pub box_margin: Option<f64>,
    pub probes: usize,
    /// `|E D_uH|` in `L^2(0, T; U)`.
    pub gradient_norm: f64,
}

/// Checks `E <D_uH(t), w - u(t)> >= 0` for box corners and random interior
/// points. For an unbounded box the probes sit in `u(t) +- 1`.
pub fn variational_inequality_check(
    problem: &Problem,
    adjoint: &AdjointEnsemble,
    u_bar: &ControlProcess,
    seed: u64,
) -> ViReport {
    let g = expected_gradient(problem, adjoint, u_bar);
    let dim = problem.control_dim();
    let b = problem.bounds;
    let finite = b.lo.is_finite() && b.hi.is_finite();
    let corners = 1usize << dim.min(6);
    let interior = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<(bool, Vec<f64>)> = (0..corners)
        .map(|c| {
            let v = (0..dim)
                .map(|j| if (c >> (j % 6)) & 1 == 1 { 1.0 } else { 0.0 })
                .collect();
            (true, v)
        })
        .collect();
    for _ in 0..interior {
        probes.push((
            false,
            (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
        ));
    }
    let dt = problem.grid.dt;
    let mut margin = f64::INFINITY;
    let mut integrated = f64::INFINITY;
    let mut w = vec![0.0; dim];
    let mut diff = vec![0.0; dim];
    for (_, s) in &probes {
        let mut total = 0.0;
        for n in 0..problem.grid.steps {
            let un = u_bar.at(n);
            for j in 0..dim {
                w[j] = if finite {
                    b.lo + s[j] * (b.hi - b.lo)
                } else {
                    un[j] - 1.0 + 2.0 * s[j]
                };
                diff[j] = w[j] - un[j];
            }
            let v = problem.model.u_inner(g.at(n), &diff);
            margin = margin.min(v);
            total += dt * v;
        }
        integrated = integrated.min(total);
    }
    let box_margin = finite.then(|| {
        let cw = problem.model.control_weights();
        (0..problem.grid.steps)
            .map(|n| {
                let un = u_bar.at(n);
                (0..dim)
                    .map(|j| {
                        let gj = g.at(n)[j];
                        let w = if gj >= 0.0 { b.lo } else { b.hi };
                        cw[j] * gj * (w - un[j])
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    });
    ViReport {
        margin,
        integrated_margin: integrated,
        box_margin,
        probes: probes.len(),
        gradient_norm: g.l2_norm(&problem.model, dt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ControlBox, InitialPath, TimeGrid};
    use crate::measures::RegularMeasure;
    use crate::spectral::{
        CoefficientSpec, Diffusion, DriftFamily, Model, OperatorSpec, RunningCost, TerminalCost,
    };

    fn problem(
        spec: OperatorSpec,
        sigma: f64,
        mu_h: RegularMeasure,
        bounds: ControlBox,
    ) -> Problem {
        let grid = TimeGrid::new(0.01, 1.0, 0.2).unwrap();
        let dim = spec.state_dim();
        let model = Model::new(
            spec,
            CoefficientSpec {
                drift: DriftFamily::Tanh {
                    alpha: 0.8,
                    beta: 1.0,
                    c: 1.0,
                },
                running: RunningCost {
                    q: 1.0,
                    r: 0.5,
                    x_target: 0.0,
                    u_target: 0.0,
                },
                terminal: TerminalCost::Quadratic {
                    m: 1.0,
                    target: 0.2,
                },
                diffusion: Diffusion::Constant { sigma },
            },
        )
        .unwrap();
        Problem::new(
            model,
            grid,
            RegularMeasure::discrete(-0.2, 0.0, &[(-0.2, 0.5), (-0.1, 0.25)]).unwrap(),
            RegularMeasure::discrete(-0.2, 0.0, &[(0.0, 1.0), (-0.05, 0.5)]).unwrap(),
            mu_h,
            InitialPath::constant(vec![0.7; dim]),
            bounds,
        )
        .unwrap()
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences_deterministic() {
        let p = problem(
            OperatorSpec::heat_dirichlet(4),
            0.0,
            RegularMeasure::dirac(0.8, 1.0, 1.0).unwrap(),
            ControlBox::unbounded(),
        );
        let dim = p.control_dim();
        let u = ControlProcess::from_fn(100, dim, |n, j| {
            0.1 * (n as f64 * 0.05).sin() + 0.01 * j as f64
        });
        let v = ControlProcess::from_fn(100, dim, |n, j| (0.03 * (n + j) as f64).cos());
        let (ens, adj) = state_and_adjoint(&p, &u, None).unwrap();
        let a = cost_gateaux_adjoint(&p, &adj, &u, &v).mean;
        let f = cost_gateaux_fd(&p, &u, &v, 1e-3, None).unwrap().mean;
        assert!((a - f).abs() < 1e-6 * f.abs().max(1.0), "{a} vs {f}");
        let d = duality_gap(&p, &ens, &adj, &u, &v).unwrap();
        assert!(
            d.gap.mean.abs() < 1e-10 * d.lhs.mean.abs().max(1.0),
            "{d:?}"
        );
    }

    #[test]
    fn hamiltonian_derivative_matches_difference_quotient() {
        let p = problem(
            OperatorSpec::heat_dirichlet(3),
            0.0,
            RegularMeasure::dirac(0.8, 1.0, 1.0).unwrap(),
            ControlBox::unbounded(),
        );
        let dim = p.control_dim();
        let u = ControlProcess::constant(100, dim, 0.3);
        let (ens, adj) = state_and_adjoint(&p, &u, None).unwrap();
        let n = 40;
        let mut du = vec![0.0; dim];
        hamiltonian_du(&p, adj.p(0, n), u.at(n), &mut du);
        let dir: Vec<f64> = (0..dim).map(|j| 1.0 + j as f64 * 0.1).collect();
        let h = 1e-6;
        let up: Vec<f64> = u.at(n).iter().zip(&dir).map(|(a, b)| a + h * b).collect();
        let um: Vec<f64> = u.at(n).iter().zip(&dir).map(|(a, b)| a - h * b).collect();
        let fd = (hamiltonian(&p, &ens.paths[0], adj.p(0, n), n, &up)
            - hamiltonian(&p, &ens.paths[0], adj.p(0, n), n, &um))
            / (2.0 * h);
        let an = p.model.u_inner(&du, &dir);
        assert!((fd - an).abs() < 1e-7, "{fd} vs {an}");
    }

    #[test]
    fn descent_lowers_cost_and_meets_box_inequality() {
        let p = problem(
            OperatorSpec::scalar(-0.3),
            0.0,
            RegularMeasure::dirac(0.8, 1.0, 1.0).unwrap(),
            ControlBox { lo: -0.5, hi: 0.1 },
        );
        let u0 = ControlProcess::constant(100, 1, 0.0);
        let rep = projected_gradient_descent(
            &p,
            &u0,
            None,
            &DescentOptions {
                tol: 1e-7,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.converged, "{:?}", rep.history.last());
        let costs: Vec<f64> = rep.history.iter().map(|h| h.cost).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
        let (_, adj) = state_and_adjoint(&p, &rep.control, None).unwrap();
        let vi = variational_inequality_check(&p, &adj, &rep.control, 9);
        assert!(
            vi.margin > -1e-6 && vi.box_margin.unwrap() > -1e-6,
            "{vi:?}"
        );
        assert!(rep.control.values.iter().all(|v| (-0.5..=0.1).contains(v)));
    }

    #[test]
    fn stochastic_gradient_agrees_within_error_bars() {
        let p = problem(
            OperatorSpec::scalar(-0.2),
            0.3,
            RegularMeasure::dirac(0.8, 1.0, 1.0).unwrap(),
            ControlBox::unbounded(),
        );
        let noise = NoiseEnsemble::new(11, 2000, 1, 0.01);
        let u = ControlProcess::constant(100, 1, 0.1);
        let v = ControlProcess::from_fn(100, 1, |n, _| 1.0 - n as f64 * 0.01);
        let (_, adj) = state_and_adjoint(&p, &u, Some(&noise)).unwrap();
        let a = cost_gateaux_adjoint(&p, &adj, &u, &v);
        let f = cost_gateaux_fd(&p, &u, &v, 1e-3, Some(&noise)).unwrap();
        assert!(
            (a.mean - f.mean).abs() < 4.0 * (a.stderr + f.stderr) + 1e-3,
            "{a:?} {f:?}"
        );
    }
}
