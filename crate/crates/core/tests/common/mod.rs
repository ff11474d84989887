//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use delay_smp::forward::{
    ControlBox, ControlProcess, InitialPath, NoiseEnsemble, Problem, TimeGrid,
};
use delay_smp::measures::RegularMeasure;
use delay_smp::spectral::{
    CoefficientSpec, Diffusion, DriftFamily, Model, OperatorSpec, RunningCost, TerminalCost,
};

pub struct ScalarSetup {
    pub a: f64,
    pub drift: DriftFamily,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub sigma: f64,
    pub dt: f64,
    pub horizon: f64,
    pub delay: f64,
    pub x0: f64,
    pub bounds: ControlBox,
}

impl ScalarSetup {
    pub fn problem(
        &self,
        mu_f: RegularMeasure,
        mu_l: RegularMeasure,
        mu_h: RegularMeasure,
    ) -> Problem {
        let model = Model::new(
            OperatorSpec::scalar(self.a),
            CoefficientSpec {
                drift: self.drift,
                running: self.running,
                terminal: self.terminal,
                diffusion: Diffusion::Constant { sigma: self.sigma },
            },
        )
        .unwrap();
        Problem::new(
            model,
            TimeGrid::new(self.dt, self.horizon, self.delay).unwrap(),
            mu_f,
            mu_l,
            mu_h,
            InitialPath::constant(vec![self.x0]),
            self.bounds,
        )
        .unwrap()
    }
}

/// Scalar linear delay equation `x' = a x + b x(t - d) + c u(t)` with `x = x0`
/// on `[-d, 0]` and a piecewise-constant control, integrated by the method of
/// steps: RK4 on a fine grid, delayed values at half steps from cubic Hermite
/// interpolation of the already computed solution.
pub struct MethodOfSteps {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub x0: f64,
    pub horizon: f64,
    pub delay: f64,
    /// Control interval length; the control is constant on `[n dt, (n+1) dt)`.
    pub dt: f64,
    /// Fine steps per control interval.
    pub refine: usize,
}

pub struct FineSolution {
    pub h: f64,
    /// `x` at `t_i = i h`, `i = 0..=K`.
    pub x: Vec<f64>,
    /// Right and left derivatives at the fine nodes.
    pub dright: Vec<f64>,
    pub dleft: Vec<f64>,
    pub x0: f64,
}

impl FineSolution {
    /// `x(t)` for any `t <= T`, including the initial segment.
    pub fn at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.x0;
        }
        let s = t / self.h;
        let i = (s.floor() as usize).min(self.x.len() - 2);
        let tau = s - i as f64;
        if tau.abs() < 1e-12 {
            return self.x[i];
        }
        if (1.0 - tau).abs() < 1e-12 {
            return self.x[i + 1];
        }
        let (y0, y1) = (self.x[i], self.x[i + 1]);
        let (m0, m1) = (self.dright[i] * self.h, self.dleft[i + 1] * self.h);
        let t2 = tau * tau;
        let t3 = t2 * tau;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + tau) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1
    }
}

impl MethodOfSteps {
    pub fn solve(&self, u: &[f64]) -> FineSolution {
        let h = self.dt / self.refine as f64;
        let k = (self.horizon / h).round() as usize;
        let lag = (self.delay / h).round() as usize;
        let mut sol = FineSolution {
            h,
            x: vec![self.x0; k + 1],
            dright: vec![0.0; k + 1],
            dleft: vec![0.0; k + 1],
            x0: self.x0,
        };
        let ctrl = |i: usize| u[(i / self.refine).min(u.len() - 1)];
        // delayed value at fine node i + frac, frac in {0, 1/2, 1}
        let delayed = |sol: &FineSolution, i: usize, frac: f64| -> f64 {
            let t = (i as f64 + frac) * h - self.delay;
            if t <= 0.0 {
                self.x0
            } else if frac == 0.0 {
                sol.x[i - lag]
            } else if frac == 1.0 {
                sol.x[i + 1 - lag]
            } else {
                sol.at(t)
            }
        };
        for i in 0..k {
            let uc = ctrl(i);
            let f = |x: f64, xd: f64| self.a * x + self.b * xd + self.c * uc;
            let x = sol.x[i];
            let d0 = delayed(&sol, i, 0.0);
            let dm = delayed(&sol, i, 0.5);
            let d1 = delayed(&sol, i, 1.0);
            let k1 = f(x, d0);
            let k2 = f(x + 0.5 * h * k1, dm);
            let k3 = f(x + 0.5 * h * k2, dm);
            let k4 = f(x + h * k3, d1);
            sol.x[i + 1] = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            sol.dright[i] = k1;
            sol.dleft[i + 1] = f(sol.x[i + 1], d1);
        }
        sol.dright[k] = sol.dleft[k];
        sol
    }
}

/// Composite Simpson rule with `n` (even) cells.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Riccati feedback for `dX = (k X + c u) dt + g dW` with cost
/// `E[int q/2 X^2 + r/2 u^2 dt + m/2 X_T^2]`; along the mean path this is also
/// the optimal deterministic open-loop control.
pub struct Riccati {
    pub k: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
    pub m: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Riccati {
    /// `(phi, mean path)` on `steps + 1` uniform nodes, by RK4.
    pub fn solve(&self, steps: usize) -> (Vec<f64>, Vec<f64>) {
        let h = self.horizon / steps as f64;
        let rhs = |phi: f64| 2.0 * self.k * phi - self.c * self.c / self.r * phi * phi + self.q;
        let mut phi = vec![0.0; steps + 1];
        phi[steps] = self.m;
        for i in (0..steps).rev() {
            // backward in time: dphi/ds = rhs(phi) with s = T - t
            let p = phi[i + 1];
            let k1 = rhs(p);
            let k2 = rhs(p + 0.5 * h * k1);
            let k3 = rhs(p + 0.5 * h * k2);
            let k4 = rhs(p + h * k3);
            phi[i] = p + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let mut x = vec![self.x0; steps + 1];
        let g = |i: f64| {
            // phi at fractional node by linear interpolation of a smooth function
            let lo = (i.floor() as usize).min(steps - 1);
            let t = i - lo as f64;
            phi[lo] * (1.0 - t) + phi[lo + 1] * t
        };
        for i in 0..steps {
            let f = |x: f64, s: f64| (self.k - self.c * self.c / self.r * g(s)) * x;
            let xi = x[i];
            let s = i as f64;
            let k1 = f(xi, s);
            let k2 = f(xi + 0.5 * h * k1, s + 0.5);
            let k3 = f(xi + 0.5 * h * k2, s + 0.5);
            let k4 = f(xi + h * k3, s + 1.0);
            x[i + 1] = xi + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        (phi, x)
    }

    /// `u*(t) = -(c / r) phi(t) x(t)` at `t_n = n dt`, `n < K`.
    pub fn control(&self, dt: f64) -> Vec<f64> {
        let k = (self.horizon / dt).round() as usize;
        let refine = 20;
        let (phi, x) = self.solve(k * refine);
        (0..k)
            .map(|n| -self.c / self.r * phi[n * refine] * x[n * refine])
            .collect()
    }
}

/// Delay-free scalar exponential Euler, written out by hand:
/// `X_{n+1} = e^{a dt} (X_n + dt (b X_n + c u_n) + sigma dW_n)`.
#[allow(clippy::too_many_arguments)]
pub fn reference_paths(
    a: f64,
    b: f64,
    c: f64,
    sigma: f64,
    x0: f64,
    u: &[f64],
    dt: f64,
    noise: &NoiseEnsemble,
) -> Vec<Vec<f64>> {
    let e = (a * dt).exp();
    (0..noise.paths)
        .map(|i| {
            let mut s = noise.path_stream(i, 0);
            let mut x = vec![x0; u.len() + 1];
            let mut dw = [0.0];
            for n in 0..u.len() {
                s.next_increment(&mut dw);
                let mut next = x[n];
                next += dt * (b * x[n] + c * u[n]);
                next += sigma * dw[0];
                x[n + 1] = next * e;
            }
            x
        })
        .collect()
}

/// Pathwise delay-free adjoint of the reference scheme:
/// `p_K = m X_K`, `p_n = e^{a dt}(p_{n+1} + dt (b p_{n+1} + q X_{n+1}))` with the
/// bracket terms dropped at `n + 1 = K`. Returns `E p_n` for `n = 0..K`.
pub fn reference_mean_adjoint(
    a: f64,
    b: f64,
    q: f64,
    m: f64,
    paths: &[Vec<f64>],
    dt: f64,
) -> Vec<f64> {
    let k = paths[0].len() - 1;
    let e = (a * dt).exp();
    let mut mean = vec![0.0; k + 1];
    for x in paths {
        let mut p = vec![0.0; k + 1];
        p[k] = m * x[k];
        for n in (0..k).rev() {
            let j = n + 1;
            let extra = if j < k {
                dt * (b * p[j] + q * x[j])
            } else {
                0.0
            };
            p[n] = e * (p[j] + extra);
        }
        for (a, b) in mean.iter_mut().zip(&p) {
            *a += b / paths.len() as f64;
        }
    }
    mean
}

pub fn control_l2(a: &ControlProcess, b: &[f64], dt: f64) -> f64 {
    a.values
        .iter()
        .zip(b)
        .map(|(x, y)| dt * (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}
