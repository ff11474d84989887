//! Backward adjoint equation with anticipated drift term and a terminal
//! history term driven by a measure on `[T - d, T]`.
//!
//! The one-step mild recursion, for `n = K-1, ..., 0`, is
//!
//! ```text
//! p_K = sum_{s = T} w D_xh(X(T))
//! p_n = S(dt)'[p_{n+1} + dt (E_{n+1}[a_{n+1}] + l_{n+1})] + sum_{s in [t_n, t_{n+1})} w S(s - t_n)' D_xh(X(s))
//! ```
//!
//! where `a_j` collects `D_xf' p` from every later step whose delayed
//! evaluation point touches node `j` (the transpose of the interpolation used
//! in the forward stepper) and `l_j` does the same for the running cost.
//! Only `a_j` reads future values of `p` and only it is projected with the
//! regression estimate of the conditional expectation. `p_n` is stored as
//! the pathwise value.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::forward::{
    picard_factor, ControlProcess, Ensemble, Estimate, ForwardError, NoiseEnsemble, PathHistory,
    Problem,
};
use crate::measures::{split_endpoint, MeasureError, MeasureSequence, RegularMeasure};
use crate::regression::{
    conditional_expectation_fit, informative_columns, select_columns, RegressionBasis,
    RegressionError,
};
use crate::spectral::{Propagator, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbsdeError {
    #[error("adjoint equation needs a self-adjoint generator")]
    Unsupported,
    #[error("regression at step {step}: {source}")]
    Regression {
        step: usize,
        #[source]
        source: RegressionError,
    },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("fixed-point iteration did not converge in {0} iterations")]
    NonConvergence(usize),
}

pub type Result<T, E = AbsdeError> = std::result::Result<T, E>;

/// `(p, q)` along one path on nodes `t_0 .. t_{K+L}`; both vanish beyond `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Record of reads of `p` during the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IndexAudit {
    pub reads: usize,
    pub reads_before_write: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AdjointDiagnostics {
    pub regressions: usize,
    pub max_regression_residual: f64,
    pub max_ridge: f64,
    pub audit: IndexAudit,
}

#[derive(Debug, Clone)]
pub struct AdjointEnsemble {
    pub dim: usize,
    pub noise_dim: usize,
    pub nodes: usize,
    pub paths: Vec<AdjointPath>,
    pub diagnostics: AdjointDiagnostics,
}

impl AdjointEnsemble {
    #[inline]
    pub fn p(&self, path: usize, n: usize) -> &[f64] {
        &self.paths[path].p[n * self.dim..(n + 1) * self.dim]
    }

    #[inline]
    pub fn q(&self, path: usize, n: usize) -> &[f64] {
        &self.paths[path].q[n * self.noise_dim..(n + 1) * self.noise_dim]
    }
}

/// Solver settings. Without a basis, or for deterministic models, no
/// regression is performed. `q` is estimated only when `noise` is given.
#[derive(Debug, Clone, Default)]
pub struct AbsdeOptions {
    pub basis: Option<RegressionBasis>,
    pub noise: Option<NoiseEnsemble>,
}

impl AbsdeOptions {
    pub fn regressed(problem: &Problem, noise: &NoiseEnsemble) -> Self {
        Self {
            basis: Some(RegressionBasis::default_for(problem)),
            noise: Some(*noise),
        }
    }
}

#[derive(Debug, Clone)]
struct HistoryNode {
    weight: f64,
    index: usize,
    lam: f64,
    /// `S(s - t_n)`; `None` when `s = t_n`.
    prop: Option<Propagator>,
}

/// Groups the terminal measure nodes by the step interval `[t_n, t_{n+1})`
/// that receives them; index `K` holds the mass at `T`.
fn history_schedule(problem: &Problem, mu: &RegularMeasure) -> Result<Vec<Vec<HistoryNode>>> {
    let g = &problem.grid;
    let mut out: Vec<Vec<HistoryNode>> = vec![Vec::new(); g.steps + 1];
    for (s, weight) in mu.nodes() {
        let (index, lam) = g.locate(s);
        if index < g.delay_steps {
            // before t = 0 the state does not depend on the control
            continue;
        }
        let n = index - g.delay_steps;
        let prop = if lam == 0.0 {
            None
        } else {
            Some(problem.model.spec.propagator(s - g.t(n))?)
        };
        out[n].push(HistoryNode {
            weight,
            index,
            lam,
            prop,
        });
    }
    Ok(out)
}

fn add_history(
    problem: &Problem,
    nodes: &[HistoryNode],
    path: &PathHistory,
    x: &mut [f64],
    tmp: &mut [f64],
    scratch: &mut crate::spectral::Scratch,
    out: &mut [f64],
) -> Result<()> {
    for h in nodes {
        path.interpolate(h.index, h.lam, x);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        problem.model.terminal_dx_add(x, h.weight, scratch, tmp);
        if let Some(prop) = &h.prop {
            prop.apply_adjoint(tmp)?;
        }
        out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
    }
    Ok(())
}

/// `int_{[t, T]} S(s - t)' D_xh(X(s)) mu(ds)` along one path; zero for `t >= T`.
pub fn terminal_history_term(
    problem: &Problem,
    path: &PathHistory,
    t: f64,
    mu_part: &RegularMeasure,
) -> Result<Vec<f64>> {
    if !problem.model.spec.self_adjoint() {
        return Err(AbsdeError::Unsupported);
    }
    let dim = problem.state_dim();
    let mut out = vec![0.0; dim];
    let g = &problem.grid;
    if t >= g.horizon {
        return Ok(out);
    }
    let mut ws = problem.workspace();
    let mut tmp = vec![0.0; dim];
    let tol = 1e-9 * g.dt;
    for (s, w) in mu_part.nodes() {
        if s < t - tol {
            continue;
        }
        let (index, lam) = g.locate(s);
        path.interpolate(index, lam, &mut ws.x);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        problem
            .model
            .terminal_dx_add(&ws.x, w, &mut ws.scratch, &mut tmp);
        problem
            .model
            .spec
            .propagator((s - t).max(0.0))?
            .apply_adjoint(&mut tmp)?;
        out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// Backward sweep. With `frozen`, the anticipated term reads the previous
/// iterate instead of the values being computed (fixed-point mode).
fn backward_sweep(
    problem: &Problem,
    ensemble: &Ensemble,
    u: &ControlProcess,
    opts: &AbsdeOptions,
    frozen: Option<&AdjointEnsemble>,
) -> Result<AdjointEnsemble> {
    if !problem.model.spec.self_adjoint() {
        return Err(AbsdeError::Unsupported);
    }
    problem.check_control(u)?;
    let g = problem.grid;
    let (k_steps, l_steps) = (g.steps, g.delay_steps);
    let dim = problem.state_dim();
    let nd = problem.model.noise_dim();
    let nodes = k_steps + l_steps + 1;
    let m = ensemble.len();
    let schedule = history_schedule(problem, &problem.mu_h)?;
    let regress = problem.stochastic() && m > 1 && opts.basis.is_some();
    let mut diag = AdjointDiagnostics::default();

    let mut ps: Vec<Vec<f64>> = vec![vec![0.0; nodes * dim]; m];
    ps.par_iter_mut().zip(&ensemble.paths).try_for_each_init(
        || (problem.workspace(), vec![0.0; dim]),
        |(ws, tmp), (p, path)| {
            let mut out = vec![0.0; dim];
            add_history(
                problem,
                &schedule[k_steps],
                path,
                &mut ws.x,
                tmp,
                &mut ws.scratch,
                &mut out,
            )?;
            p[k_steps * dim..(k_steps + 1) * dim].copy_from_slice(&out);
            Ok::<_, AbsdeError>(())
        },
    )?;

    let frozen_p: Option<Vec<Vec<f64>>> =
        frozen.map(|f| f.paths.iter().map(|a| a.p.clone()).collect());
    let mut written = vec![false; k_steps + 1];
    written[k_steps] = true;
    let mut antic = vec![0.0; m * dim];
    let mut lterm = vec![0.0; m * dim];
    let prop = problem.step_propagator();

    for n in (0..k_steps).rev() {
        let j = n + 1;
        // audit the read pattern of the anticipated term once per step
        let mut any_antic = false;
        for node in problem.drift_nodes() {
            for (back, c) in node.taps() {
                if c == 0.0 {
                    continue;
                }
                let mm = j + back;
                if mm < k_steps {
                    any_antic = true;
                    diag.audit.reads += 1;
                    if frozen.is_none() && !written[mm] {
                        diag.audit.reads_before_write += 1;
                    }
                }
            }
        }
        let src: &[Vec<f64>] = match &frozen_p {
            Some(f) => f,
            None => &ps,
        };
        antic
            .par_chunks_mut(dim)
            .zip(lterm.par_chunks_mut(dim))
            .zip(src.par_iter().zip(&ensemble.paths))
            .for_each_init(
                || problem.workspace(),
                |ws, ((a, lt), (p, path))| {
                    a.iter_mut().for_each(|v| *v = 0.0);
                    lt.iter_mut().for_each(|v| *v = 0.0);
                    for node in problem.drift_nodes() {
                        for (back, c) in node.taps() {
                            if c == 0.0 || j + back >= k_steps {
                                continue;
                            }
                            let mm = j + back;
                            problem.delayed_state(path, mm, node, &mut ws.x);
                            problem.model.drift_dx_adjoint_add(
                                &ws.x,
                                &p[mm * dim..(mm + 1) * dim],
                                c * node.weight,
                                &mut ws.scratch,
                                a,
                            );
                        }
                    }
                    for node in problem.running_nodes() {
                        for (back, c) in node.taps() {
                            if c == 0.0 || j + back >= k_steps {
                                continue;
                            }
                            let mm = j + back;
                            problem.delayed_state(path, mm, node, &mut ws.x);
                            problem.model.running_dx_add(
                                &ws.x,
                                c * node.weight,
                                &mut ws.scratch,
                                lt,
                            );
                        }
                    }
                },
            );
        if regress && any_antic {
            let basis = opts.basis.as_ref().expect("regress implies basis");
            let fit = project(basis, ensemble, l_steps + j, &antic, dim)
                .map_err(|source| AbsdeError::Regression { step: j, source })?;
            diag.regressions += 1;
            diag.max_regression_residual = diag.max_regression_residual.max(fit.1);
            diag.max_ridge = diag.max_ridge.max(fit.2);
            antic = fit.0;
        }
        ps.par_iter_mut()
            .zip(antic.par_chunks(dim).zip(lterm.par_chunks(dim)))
            .zip(&ensemble.paths)
            .try_for_each_init(
                || (problem.workspace(), vec![0.0; dim], vec![0.0; dim]),
                |(ws, acc, tmp), ((p, (a, lt)), path)| {
                    for d in 0..dim {
                        acc[d] = p[j * dim + d] + g.dt * (a[d] + lt[d]);
                    }
                    prop.apply_adjoint(acc)?;
                    add_history(
                        problem,
                        &schedule[n],
                        path,
                        &mut ws.x,
                        tmp,
                        &mut ws.scratch,
                        acc,
                    )?;
                    p[n * dim..(n + 1) * dim].copy_from_slice(acc);
                    Ok::<_, AbsdeError>(())
                },
            )?;
        written[n] = true;
    }

    let mut qs: Vec<Vec<f64>> = vec![vec![0.0; nodes * nd]; m];
    if let (true, Some(noise)) = (problem.stochastic() && m > 1, opts.noise.as_ref()) {
        estimate_q(problem, ensemble, &ps, noise, opts, &mut qs, &mut diag)?;
    }
    Ok(AdjointEnsemble {
        dim,
        noise_dim: nd,
        nodes,
        paths: ps
            .into_iter()
            .zip(qs)
            .map(|(p, q)| AdjointPath { p, q })
            .collect(),
        diagnostics: diag,
    })
}

/// Regression of per-path vectors on the basis at absolute node `i`.
fn project(
    basis: &RegressionBasis,
    ensemble: &Ensemble,
    i: usize,
    targets: &[f64],
    dim: usize,
) -> std::result::Result<(Vec<f64>, f64, f64), RegressionError> {
    let nf = basis.feature_count();
    let mut feats = Vec::with_capacity(ensemble.len() * nf);
    let mut row = Vec::with_capacity(nf);
    for path in &ensemble.paths {
        basis.features(path, i, &mut row);
        feats.extend_from_slice(&row);
    }
    let cols = informative_columns(&feats, nf);
    let feats = select_columns(&feats, nf, &cols);
    let fit = conditional_expectation_fit(&feats, cols.len(), targets, dim, basis.ridge)?;
    Ok((fit.fitted, fit.residual, fit.ridge))
}

/// `q_n` modewise as the regression of `p_n dW_n / dt` on the features at `t_n`.
fn estimate_q(
    problem: &Problem,
    ensemble: &Ensemble,
    ps: &[Vec<f64>],
    noise: &NoiseEnsemble,
    opts: &AbsdeOptions,
    qs: &mut [Vec<f64>],
    diag: &mut AdjointDiagnostics,
) -> Result<()> {
    let g = problem.grid;
    let dim = problem.state_dim();
    let nd = problem.model.noise_dim();
    let m = ensemble.len();
    let basis = opts
        .basis
        .clone()
        .unwrap_or_else(|| RegressionBasis::default_for(problem));
    // increments regenerated path by path
    let dws: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = noise.path_stream(i, 0);
            let mut v = vec![0.0; g.steps * nd];
            for c in v.chunks_mut(nd) {
                s.next_increment(c);
            }
            v
        })
        .collect();
    let mut target = vec![0.0; m * nd];
    for n in 0..g.steps {
        for i in 0..m {
            for k in 0..nd {
                target[i * nd + k] = ps[i][n * dim + k] * dws[i][n * nd + k] / g.dt;
            }
        }
        let (fitted, res, ridge) = project(&basis, ensemble, g.delay_steps + n, &target, nd)
            .map_err(|source| AbsdeError::Regression { step: n, source })?;
        diag.regressions += 1;
        diag.max_regression_residual = diag.max_regression_residual.max(res);
        diag.max_ridge = diag.max_ridge.max(ridge);
        for i in 0..m {
            qs[i][n * nd..(n + 1) * nd].copy_from_slice(&fitted[i * nd..(i + 1) * nd]);
        }
    }
    Ok(())
}

/// Adjoint pair for the terminal measure of `problem`.
pub fn solve_absde(
    problem: &Problem,
    ensemble: &Ensemble,
    u: &ControlProcess,
    opts: &AbsdeOptions,
) -> Result<AdjointEnsemble> {
    backward_sweep(problem, ensemble, u, opts, None)
}

/// Special case `mu_h = delta_T`.
pub fn solve_absde_delta_t(
    problem: &Problem,
    ensemble: &Ensemble,
    u: &ControlProcess,
    opts: &AbsdeOptions,
) -> Result<AdjointEnsemble> {
    let g = problem.grid;
    let dirac = RegularMeasure::dirac(g.horizon - g.delay, g.horizon, g.horizon)?;
    solve_absde(&problem.with_mu_h(dirac)?, ensemble, u, opts)
}

/// `n`-th approximating equation: the interior part of `mu_h` is mollified,
/// the atom at `T` is kept.
pub fn solve_absde_approx(
    problem: &Problem,
    ensemble: &Ensemble,
    u: &ControlProcess,
    opts: &AbsdeOptions,
    n: usize,
) -> Result<AdjointEnsemble> {
    let approx = approximating_measure(&problem.mu_h, problem.grid.horizon, n)?;
    solve_absde(&problem.with_mu_h(approx)?, ensemble, u, opts)
}

/// `mollify(split(mu_h), n) + mu_h({T}) delta_T`.
pub fn approximating_measure(
    mu_h: &RegularMeasure,
    horizon: f64,
    n: usize,
) -> Result<RegularMeasure> {
    let (bar, atom) = split_endpoint(mu_h, horizon)?;
    let seq = MeasureSequence::new(bar, n)?;
    if atom == 0.0 {
        return Ok(seq.approximant);
    }
    Ok(seq.approximant.with_atom(horizon, atom)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub beta: f64,
    /// A-priori contraction factor at `beta`.
    pub kappa: f64,
    /// `sup_n e^{beta t_n} (E |p^{(m+1)}_n - p^{(m)}_n|^2)^{1/2}` per iteration.
    pub residuals: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
    /// Index of the first iterate that is already a fixed point to tolerance.
    pub fixed_point_iterate: usize,
    #[serde(skip)]
    pub solution: Option<AdjointEnsemble>,
}

/// Smallest `beta` of the form `2^k` (or zero) with contraction factor below one half.
pub fn choose_beta(problem: &Problem) -> f64 {
    if picard_factor(problem, 0.0) < 0.5 {
        return 0.0;
    }
    let mut beta = 1.0;
    for _ in 0..64 {
        if picard_factor(problem, beta) < 0.5 {
            return beta;
        }
        beta *= 2.0;
    }
    beta
}

pub fn weighted_distance(a: &AdjointEnsemble, b: &AdjointEnsemble, dt: f64, beta: f64) -> f64 {
    let m = a.paths.len() as f64;
    (0..a.nodes)
        .map(|n| {
            let s: f64 = (0..a.paths.len())
                .map(|i| {
                    a.p(i, n)
                        .iter()
                        .zip(b.p(i, n))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                })
                .sum();
            (beta * n as f64 * dt).exp() * (s / m).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Iterates the backward map with the anticipated term frozen at the previous
/// iterate, starting from `p = 0`, with `mu_h = delta_T`.
pub fn solve_absde_fixed_point(
    problem: &Problem,
    ensemble: &Ensemble,
    u: &ControlProcess,
    opts: &AbsdeOptions,
    beta: Option<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointReport> {
    let g = problem.grid;
    let dirac = RegularMeasure::dirac(g.horizon - g.delay, g.horizon, g.horizon)?;
    let prob = problem.with_mu_h(dirac)?;
    let beta = beta.unwrap_or_else(|| choose_beta(&prob));
    let m = ensemble.len();
    let dim = prob.state_dim();
    let nd = prob.model.noise_dim();
    let nodes = g.nodes();
    let mut current = AdjointEnsemble {
        dim,
        noise_dim: nd,
        nodes,
        paths: vec![
            AdjointPath {
                p: vec![0.0; nodes * dim],
                q: vec![0.0; nodes * nd],
            };
            m
        ],
        diagnostics: AdjointDiagnostics::default(),
    };
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let next = backward_sweep(&prob, ensemble, u, opts, Some(&current))?;
        let r = weighted_distance(&next, &current, g.dt, beta);
        residuals.push(r);
        current = next;
        if r <= tol {
            converged = true;
            break;
        }
    }
    let ratios = residuals
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    Ok(FixedPointReport {
        beta,
        kappa: picard_factor(&prob, beta),
        fixed_point_iterate: residuals.len().saturating_sub(1),
        residuals,
        ratios,
        converged,
        solution: Some(current),
    })
}

/// One row of the contraction table: mean and worst residual ratio at `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaRow {
    pub beta: f64,
    pub kappa: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

pub fn beta_ratio_table(
    problem: &Problem,
    ensemble: &Ensemble,
    u: &ControlProcess,
    opts: &AbsdeOptions,
    betas: &[f64],
    iterations: usize,
) -> Result<Vec<BetaRow>> {
    betas
        .iter()
        .map(|&beta| {
            let r =
                solve_absde_fixed_point(problem, ensemble, u, opts, Some(beta), 0.0, iterations)?;
            let useful: Vec<f64> = r.ratios.iter().copied().filter(|x| x.is_finite()).collect();
            let mean_ratio = if useful.is_empty() {
                0.0
            } else {
                useful.iter().sum::<f64>() / useful.len() as f64
            };
            Ok(BetaRow {
                beta,
                kappa: r.kappa,
                mean_ratio,
                max_ratio: useful.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// `E sum_n dt |p^a_n - p^b_n|^2` per path and the same for `b` alone.
pub fn l2_gap(a: &AdjointEnsemble, b: &AdjointEnsemble, dt: f64) -> (Estimate, f64) {
    let per_path: Vec<f64> = (0..a.paths.len())
        .map(|i| {
            a.paths[i]
                .p
                .iter()
                .zip(&b.paths[i].p)
                .map(|(x, y)| dt * (x - y) * (x - y))
                .sum()
        })
        .collect();
    let norm = b
        .paths
        .iter()
        .map(|p| p.p.iter().map(|x| dt * x * x).sum::<f64>())
        .sum::<f64>()
        / b.paths.len() as f64;
    (Estimate::from_samples(&per_path), norm)
}

/// Weighted norm of `(p, q)` against the size of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriReport {
    pub beta: f64,
    pub weighted_p: f64,
    pub weighted_q: f64,
    pub data_bound: f64,
    pub constant: f64,
}

/// `E sum_n dt e^{beta t_n} (|p_n|^2 + |q_n|^2)` and the ratio to
/// `1 + E sup |X|^2 + |u|^2`.
pub fn apriori_estimate(
    problem: &Problem,
    ensemble: &Ensemble,
    adjoint: &AdjointEnsemble,
    u: &ControlProcess,
    beta: f64,
) -> AprioriReport {
    let dt = problem.grid.dt;
    let m = adjoint.paths.len() as f64;
    let mut wp = 0.0;
    let mut wq = 0.0;
    for i in 0..adjoint.paths.len() {
        for n in 0..adjoint.nodes {
            let w = dt * (beta * n as f64 * dt).exp();
            wp += w * adjoint.p(i, n).iter().map(|x| x * x).sum::<f64>();
            wq += w * adjoint.q(i, n).iter().map(|x| x * x).sum::<f64>();
        }
    }
    wp /= m;
    wq /= m;
    let u2 = u.l2_norm(&problem.model, dt).powi(2);
    let data_bound = 1.0 + ensemble.sup_moments[0].mean + u2;
    AprioriReport {
        beta,
        weighted_p: wp,
        weighted_q: wq,
        data_bound,
        constant: (wp + wq) / data_bound,
    }
}
