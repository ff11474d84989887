//! Named experiments runnable from a config file.

use serde_json::json;

use crate::absde::{
    approximating_measure, apriori_estimate, beta_ratio_table, choose_beta, l2_gap, solve_absde,
    solve_absde_approx, AbsdeOptions,
};
use crate::config::{Direction, LoadedConfig};
use crate::forward::{picard_curve, picard_factor, ControlProcess, PicardGuess, Problem};
use crate::measures::{split_endpoint, standard_test_functions, weak_star_error};
use crate::output::{Cell, ScenarioOutput, Table};
use crate::smp::{
    adjoint_options, cost_gateaux_adjoint, cost_gateaux_fd, duality_gap,
    projected_gradient_descent, simulate, state_and_adjoint, variational_inequality_check,
    DescentOptions,
};
use crate::variation::remainder_diagnostic;
use crate::Error;

pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    /// `params.*` keys read by the scenario, with defaults.
    pub keys: &'static str,
    run: fn(&LoadedConfig) -> Result<ScenarioOutput, Error>,
}

/// Sorted by name.
pub const REGISTRY: &[Scenario] = &[
    Scenario {
        name: "absde_convergence",
        description:
            "L2 distance between adjoints for mollified terminal measures and the direct solution",
        keys: "params.levels [1, 2, 4, ..., 128]",
        run: absde_convergence,
    },
    Scenario {
        name: "contraction_study",
        description:
            "Picard residual ratios of the state map and beta-weighted ratios of the backward map",
        keys: "params.iterations 12, params.betas [0, 1, 4, 16]",
        run: contraction_study,
    },
    Scenario {
        name: "duality_check",
        description:
            "both sides of the duality between first variation and adjoint, under grid refinement",
        keys: "params.direction cosine, params.refinements 1",
        run: duality_check,
    },
    Scenario {
        name: "gradient_check",
        description: "adjoint Gateaux derivative against Richardson finite differences",
        keys: "params.direction cosine, params.rhos [0.01, 0.001]",
        run: gradient_check,
    },
    Scenario {
        name: "measure_approx",
        description: "weak-* error of the mollified terminal measure against 1, x, x^2, sin x",
        keys: "params.levels [1, 2, 4, ..., 256]",
        run: measure_approx,
    },
    Scenario {
        name: "optimize",
        description:
            "projected gradient descent with Armijo steps and a variational inequality check",
        keys: "params.step 1.0, params.tol 1e-6, params.max_iter 200",
        run: optimize,
    },
    Scenario {
        name: "remainder_study",
        description: "second-order remainder of the state expansion along a convex perturbation",
        keys: "params.rhos [0.2, 0.1, 0.05, 0.025], params.target control.initial + 1",
        run: remainder_study,
    },
    Scenario {
        name: "simulate",
        description: "forward ensemble with moment summary and optional path dump",
        keys: "params.dump_paths false",
        run: simulate_scenario,
    },
];

pub fn is_registered(name: &str) -> bool {
    REGISTRY.iter().any(|s| s.name == name)
}

pub fn find(name: &str) -> Option<&'static Scenario> {
    REGISTRY.iter().find(|s| s.name == name)
}

impl Scenario {
    pub fn execute(&self, cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
        (self.run)(cfg)
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Perturbation direction on the step grid.
pub fn direction(problem: &Problem, kind: Direction) -> ControlProcess {
    let g = problem.grid;
    ControlProcess::from_fn(g.steps, problem.control_dim(), |n, _| {
        let t = g.t(n);
        match kind {
            Direction::Constant => 1.0,
            Direction::Ramp => 1.0 - t / g.horizon,
            Direction::Cosine => (std::f64::consts::PI * t / g.horizon).cos(),
        }
    })
}

fn powers_of_two(max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |n| Some(n * 2))
        .take_while(|n| *n <= max)
        .collect()
}

fn simulate_scenario(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let u = cfg.initial_control(&problem);
    let noise = cfg.noise(&problem);
    let ens = simulate(&problem, &u, noise.as_ref())?;
    let g = problem.grid;
    let mut moments = Table::new("moments", &["t", "mean_sq_norm", "stderr"]);
    for i in 0..g.nodes() {
        let s: Vec<f64> = ens
            .paths
            .iter()
            .map(|p| p.node(i).iter().map(|x| x * x).sum())
            .collect();
        let e = crate::forward::Estimate::from_samples(&s);
        moments.push(vec![g.time(i).into(), e.mean.into(), e.stderr.into()]);
    }
    let mut tables = vec![moments];
    if cfg.config.params.dump_paths.unwrap_or(false) {
        let dim = problem.state_dim();
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((1..=dim).map(|k| format!("mode_{k}")));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut paths = Table::new("paths", &header_refs);
        for (k, p) in ens.paths.iter().enumerate() {
            for i in 0..g.nodes() {
                let mut row: Vec<Cell> = vec![k.into(), g.time(i).into()];
                row.extend(p.node(i).iter().map(|x| Cell::Float(*x)));
                paths.push(row);
            }
        }
        tables.push(paths);
    }
    Ok(ScenarioOutput {
        metrics: json!({
            "paths": ens.len(),
            "steps": g.steps,
            "e_sup_sq": ens.sup_moments[0].mean,
            "e_sup_sq_stderr": ens.sup_moments[0].stderr,
            "e_sup_4": ens.sup_moments[1].mean,
        }),
        tables,
    })
}

fn gradient_check(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let u = cfg.initial_control(&problem);
    let noise = cfg.noise(&problem);
    let v = direction(&problem, cfg.config.params.direction.unwrap_or_default());
    let rhos = cfg
        .config
        .params
        .rhos
        .clone()
        .unwrap_or_else(|| vec![1e-2, 1e-3]);
    let (_, adj) = state_and_adjoint(&problem, &u, noise.as_ref())?;
    let a = cost_gateaux_adjoint(&problem, &adj, &u, &v);
    let mut table = Table::new(
        "gradient_check",
        &[
            "rho",
            "fd_derivative",
            "fd_stderr",
            "adjoint_derivative",
            "adjoint_stderr",
            "rel_error",
        ],
    );
    let mut last = None;
    for &rho in &rhos {
        let f = cost_gateaux_fd(&problem, &u, &v, rho, noise.as_ref())?;
        let rel = (a.mean - f.mean).abs() / f.mean.abs().max(f64::EPSILON);
        table.push(vec![
            rho.into(),
            f.mean.into(),
            f.stderr.into(),
            a.mean.into(),
            a.stderr.into(),
            rel.into(),
        ]);
        last = Some((f, rel));
    }
    let (f, rel) = last.ok_or_else(|| Error::Numerical("params.rhos is empty".into()))?;
    Ok(ScenarioOutput {
        metrics: json!({
            "fd_derivative": f.mean,
            "fd_stderr": f.stderr,
            "adjoint_derivative": a.mean,
            "adjoint_stderr": a.stderr,
            "rel_error": rel,
        }),
        tables: vec![table],
    })
}

fn refined(cfg: &LoadedConfig, level: usize) -> Result<LoadedConfig, Error> {
    let mut c = cfg.clone();
    c.config.grid.dt = cfg.config.grid.dt / (1usize << level) as f64;
    Ok(c)
}

fn duality_check(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let levels = cfg.config.params.refinements.unwrap_or(1).max(1);
    let mut table = Table::new(
        "duality",
        &[
            "dt",
            "lhs",
            "lhs_stderr",
            "rhs",
            "rhs_stderr",
            "gap",
            "gap_stderr",
            "relative_gap",
        ],
    );
    let mut dts = Vec::new();
    let mut gaps = Vec::new();
    for level in 0..levels {
        let c = refined(cfg, level)?;
        let problem = c.problem()?;
        let u = c.initial_control(&problem);
        let noise = c.noise(&problem);
        let v = direction(&problem, c.config.params.direction.unwrap_or_default());
        let (ens, adj) = state_and_adjoint(&problem, &u, noise.as_ref())?;
        let d = duality_gap(&problem, &ens, &adj, &u, &v)?;
        let rel = d.gap.mean.abs() / d.lhs.mean.abs().max(f64::EPSILON);
        table.push(vec![
            problem.grid.dt.into(),
            d.lhs.mean.into(),
            d.lhs.stderr.into(),
            d.rhs.mean.into(),
            d.rhs.stderr.into(),
            d.gap.mean.into(),
            d.gap.stderr.into(),
            rel.into(),
        ]);
        dts.push(problem.grid.dt);
        gaps.push(d.gap.mean.abs());
    }
    let rel = table.column("relative_gap").unwrap_or_default();
    Ok(ScenarioOutput {
        metrics: json!({
            "relative_gap": rel.last().copied(),
            "fitted_slope": (dts.len() > 1).then(|| fitted_slope(&dts, &gaps)),
        }),
        tables: vec![table],
    })
}

fn contraction_study(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let u = cfg.initial_control(&problem);
    let noise = cfg.noise(&problem);
    let iterations = cfg.config.params.iterations.unwrap_or(12);
    let betas = cfg
        .config
        .params
        .betas
        .clone()
        .unwrap_or_else(|| vec![0.0, 1.0, 4.0, 16.0]);
    let mut picard = Table::new(
        "picard",
        &["beta", "iteration", "residual", "ratio", "a_priori_factor"],
    );
    for &beta in &betas {
        let rep = picard_curve(
            &problem,
            &u,
            noise.as_ref().map(|n| (n, 0)),
            PicardGuess::Exponential { rate: beta },
            beta,
            iterations,
        )?;
        for (i, r) in rep.residuals.iter().enumerate() {
            let ratio = (i > 0 && rep.residuals[i - 1] > 0.0).then(|| r / rep.residuals[i - 1]);
            picard.push(vec![
                beta.into(),
                i.into(),
                (*r).into(),
                ratio.into(),
                rep.a_priori_factor.into(),
            ]);
        }
    }
    let ens = simulate(&problem, &u, noise.as_ref())?;
    let opts = adjoint_options(&problem, noise.as_ref());
    let rows = beta_ratio_table(&problem, &ens, &u, &opts, &betas, iterations)?;
    let mut backward = Table::new("absde_beta", &["beta", "kappa", "mean_ratio", "max_ratio"]);
    for r in &rows {
        backward.push(vec![
            r.beta.into(),
            r.kappa.into(),
            r.mean_ratio.into(),
            r.max_ratio.into(),
        ]);
    }
    let beta = choose_beta(&problem);
    Ok(ScenarioOutput {
        metrics: json!({
            "a_priori_factor_beta0": picard_factor(&problem, 0.0),
            "chosen_beta": beta,
            "kappa_at_chosen_beta": picard_factor(&problem, beta),
            "backward": rows,
        }),
        tables: vec![picard, backward],
    })
}

fn measure_approx(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let levels = cfg
        .config
        .params
        .levels
        .clone()
        .unwrap_or_else(|| powers_of_two(256));
    let horizon = problem.grid.horizon;
    let tests = standard_test_functions();
    let refs: Vec<&dyn Fn(f64) -> f64> = tests.iter().map(|f| f as &dyn Fn(f64) -> f64).collect();
    let (_, endpoint_mass) = split_endpoint(&problem.mu_h, horizon)?;
    let mut table = Table::new("measure_approx", &["n", "weak_star_error"]);
    let mut errs = Vec::new();
    for &n in &levels {
        let approx = approximating_measure(&problem.mu_h, horizon, n)?;
        let e = weak_star_error(&problem.mu_h, &approx, &refs)?;
        table.push(vec![n.into(), e.into()]);
        errs.push(e);
    }
    let decreasing_tail = errs.len() < 2 || errs[errs.len() - 2] > errs[errs.len() - 1];
    Ok(ScenarioOutput {
        metrics: json!({
            "final_error": errs.last().copied(),
            "endpoint_mass": endpoint_mass,
            "decreasing_tail": decreasing_tail,
        }),
        tables: vec![table],
    })
}

fn absde_convergence(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let u = cfg.initial_control(&problem);
    let noise = cfg.noise(&problem);
    let levels = cfg
        .config
        .params
        .levels
        .clone()
        .unwrap_or_else(|| powers_of_two(128));
    let ens = simulate(&problem, &u, noise.as_ref())?;
    let opts: AbsdeOptions = adjoint_options(&problem, noise.as_ref());
    let direct = solve_absde(&problem, &ens, &u, &opts)?;
    let mut table = Table::new(
        "absde_convergence",
        &["n", "l2_distance_sq", "stderr", "relative"],
    );
    let mut rels = Vec::new();
    for &n in &levels {
        let approx = solve_absde_approx(&problem, &ens, &u, &opts, n)?;
        let (gap, norm) = l2_gap(&approx, &direct, problem.grid.dt);
        let rel = (gap.mean / norm.max(f64::MIN_POSITIVE)).sqrt();
        table.push(vec![
            n.into(),
            gap.mean.into(),
            gap.stderr.into(),
            rel.into(),
        ]);
        rels.push(rel);
    }
    let apriori = apriori_estimate(&problem, &ens, &direct, &u, 1.0);
    Ok(ScenarioOutput {
        metrics: json!({
            "final_relative": rels.last().copied(),
            "apriori": apriori,
            "regressions": direct.diagnostics.regressions,
            "reads_before_write": direct.diagnostics.audit.reads_before_write,
        }),
        tables: vec![table],
    })
}

fn remainder_study(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let u = cfg.initial_control(&problem);
    let target = cfg
        .config
        .params
        .target
        .unwrap_or(cfg.config.control.initial + 1.0);
    let w = ControlProcess::constant(problem.grid.steps, problem.control_dim(), target);
    w.check_box(&problem.bounds)?;
    let rhos = cfg
        .config
        .params
        .rhos
        .clone()
        .unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025]);
    let noise = cfg.noise(&problem).unwrap_or_else(|| {
        crate::forward::NoiseEnsemble::new(
            cfg.config.seed,
            1,
            problem.model.noise_dim(),
            problem.grid.dt,
        )
    });
    let rows = remainder_diagnostic(&problem, &u, &w, &rhos, &noise)?;
    let mut table = Table::new("remainder", &["rho", "ratio", "mc_stderr"]);
    for r in &rows {
        table.push(vec![r.rho.into(), r.ratio.into(), r.mc_stderr.into()]);
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    Ok(ScenarioOutput {
        metrics: json!({
            "fitted_slope": fitted_slope(&rhos, &ratios),
            "max_ratio": ratios.iter().copied().fold(0.0, f64::max),
        }),
        tables: vec![table],
    })
}

fn optimize(cfg: &LoadedConfig) -> Result<ScenarioOutput, Error> {
    let problem = cfg.problem()?;
    let u0 = cfg.initial_control(&problem);
    let noise = cfg.noise(&problem);
    let p = &cfg.config.params;
    let d = DescentOptions::default();
    let opts = DescentOptions {
        step: p.step.unwrap_or(d.step),
        tol: p.tol.unwrap_or(d.tol),
        max_iter: p.max_iter.unwrap_or(d.max_iter),
        ..d
    };
    let rep = projected_gradient_descent(&problem, &u0, noise.as_ref(), &opts)?;
    let mut hist = Table::new(
        "optimize",
        &[
            "iteration",
            "cost",
            "cost_stderr",
            "projected_gradient",
            "step",
        ],
    );
    for h in &rep.history {
        hist.push(vec![
            h.iteration.into(),
            h.cost.into(),
            h.cost_stderr.into(),
            h.projected_gradient.into(),
            h.step.into(),
        ]);
    }
    let g = problem.grid;
    let mut header = vec!["t".to_string()];
    header.extend((1..=problem.control_dim()).map(|j| format!("u_{j}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut control = Table::new("control", &header_refs);
    for n in 0..g.steps {
        let mut row: Vec<Cell> = vec![g.t(n).into()];
        row.extend(rep.control.at(n).iter().map(|v| Cell::Float(*v)));
        control.push(row);
    }
    let (_, adj) = state_and_adjoint(&problem, &rep.control, noise.as_ref())?;
    let vi = variational_inequality_check(&problem, &adj, &rep.control, cfg.config.seed);
    let last = rep.history.last().copied();
    Ok(ScenarioOutput {
        metrics: json!({
            "converged": rep.converged,
            "stalled": rep.stalled,
            "iterations": rep.history.len().saturating_sub(1),
            "final_cost": last.map(|h| h.cost),
            "final_cost_stderr": last.map(|h| h.cost_stderr),
            "projected_gradient": last.map(|h| h.projected_gradient),
            "vi": vi,
        }),
        tables: vec![hist, control],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_sorted_and_large_enough() {
        assert!(REGISTRY.len() >= 6);
        assert!(REGISTRY.windows(2).all(|w| w[0].name < w[1].name));
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [0.1, 0.2, 0.4];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((fitted_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }
}
