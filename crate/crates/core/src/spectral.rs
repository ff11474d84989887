//! Generators in an explicit eigenbasis and Nemytskii coefficient maps.
//!
//! States are modal coefficient vectors. Pointwise coefficients act on a
//! physical grid of `4N + 1` uniform points over `[0, 1]` with trapezoid
//! weights; with these weights the retained eigenfunctions are exactly
//! orthonormal, so `project(reconstruct(v)) == v` up to rounding.
//!
//! Controls live on the same physical grid (one value per grid point) with
//! the weighted inner product `<a, b>_U = sum_j w_j a_j b_j`. The scalar model
//! is the degenerate case of one grid point with unit weight.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("negative time {0} passed to a semigroup")]
    NegativeTime(f64),
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("number of modes must be positive (scalar models use exactly one)")]
    InvalidModes,
    #[error("coefficient parameter `{0}` must be finite")]
    NonFinite(&'static str),
}

pub type Result<T, E = SpectralError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    Scalar { a: f64 },
    HeatDirichlet,
    HeatNeumann,
    Wave,
}

/// Generator `A` with `modes` retained eigenpairs.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    pub modes: usize,
}

impl OperatorSpec {
    pub fn new(kind: OperatorKind, modes: usize) -> Result<Self> {
        match kind {
            OperatorKind::Scalar { a } if !a.is_finite() => Err(SpectralError::NonFinite("a")),
            OperatorKind::Scalar { .. } if modes != 1 => Err(SpectralError::InvalidModes),
            _ if modes == 0 => Err(SpectralError::InvalidModes),
            _ => Ok(Self { kind, modes }),
        }
    }

    pub fn scalar(a: f64) -> Self {
        Self {
            kind: OperatorKind::Scalar { a },
            modes: 1,
        }
    }

    pub fn heat_dirichlet(modes: usize) -> Self {
        Self {
            kind: OperatorKind::HeatDirichlet,
            modes,
        }
    }

    /// Eigenvalues `lambda_k`. For the wave kind these are the frequencies
    /// `omega_k = k pi` of the rotation blocks.
    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.modes)
            .map(|k| match self.kind {
                OperatorKind::Scalar { a } => a,
                OperatorKind::HeatDirichlet => -(k as f64 * PI).powi(2),
                OperatorKind::HeatNeumann => -((k - 1) as f64 * PI).powi(2),
                OperatorKind::Wave => k as f64 * PI,
            })
            .collect()
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            OperatorKind::Wave => 2 * self.modes,
            _ => self.modes,
        }
    }

    pub fn self_adjoint(&self) -> bool {
        !matches!(self.kind, OperatorKind::Wave)
    }

    /// `(M, omega)` with `|S(t)| <= M e^{omega t}`.
    pub fn semigroup_bound(&self) -> (f64, f64) {
        match self.kind {
            OperatorKind::Wave => (1.0, 0.0),
            _ => (
                1.0,
                self.eigenvalues()
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
        }
    }

    /// Precomputed `S(t)`.
    pub fn propagator(&self, t: f64) -> Result<Propagator> {
        if t < 0.0 || t.is_nan() {
            return Err(SpectralError::NegativeTime(t));
        }
        let lam = self.eigenvalues();
        Ok(match self.kind {
            OperatorKind::Wave => {
                Propagator::Rotation(lam.iter().map(|w| ((w * t).cos(), (w * t).sin())).collect())
            }
            _ => Propagator::Diagonal(lam.iter().map(|l| (l * t).exp()).collect()),
        })
    }
}

/// `S(t)` for a fixed `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Propagator {
    Diagonal(Vec<f64>),
    /// `(cos, sin)` per mode acting on `(y_k, z_k)` stored as `[y..., z...]`.
    Rotation(Vec<(f64, f64)>),
}

impl Propagator {
    pub fn apply(&self, v: &mut [f64]) {
        match self {
            Propagator::Diagonal(f) => v.iter_mut().zip(f).for_each(|(x, e)| *x *= e),
            Propagator::Rotation(r) => {
                let n = r.len();
                let (y, z) = v.split_at_mut(n);
                for ((yk, zk), (c, s)) in y.iter_mut().zip(z.iter_mut()).zip(r) {
                    let (a, b) = (*yk, *zk);
                    *yk = c * a + s * b;
                    *zk = -s * a + c * b;
                }
            }
        }
    }

    pub fn apply_adjoint(&self, v: &mut [f64]) -> Result<()> {
        match self {
            Propagator::Diagonal(_) => {
                self.apply(v);
                Ok(())
            }
            Propagator::Rotation(_) => Err(SpectralError::Unsupported(
                "adjoint semigroup of the wave model",
            )),
        }
    }
}

/// H-valued state in the eigenbasis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &StateVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn semigroup_apply(spec: &OperatorSpec, t: f64, v: &StateVector) -> Result<StateVector> {
    check_dim(spec.state_dim(), v.0.len())?;
    let mut out = v.clone();
    spec.propagator(t)?.apply(&mut out.0);
    Ok(out)
}

pub fn adjoint_semigroup_apply(
    spec: &OperatorSpec,
    t: f64,
    v: &StateVector,
) -> Result<StateVector> {
    check_dim(spec.state_dim(), v.0.len())?;
    let mut out = v.clone();
    spec.propagator(t)?.apply_adjoint(&mut out.0)?;
    Ok(out)
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SpectralError::Dimension { expected, got })
    }
}

/// Pointwise drift `f(x, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftFamily {
    /// `b x + c u + k`
    Affine {
        b: f64,
        c: f64,
        #[serde(default)]
        k: f64,
    },
    /// `alpha tanh(beta x) + c u`
    Tanh { alpha: f64, beta: f64, c: f64 },
}

impl DriftFamily {
    pub fn zero() -> Self {
        DriftFamily::Affine {
            b: 0.0,
            c: 0.0,
            k: 0.0,
        }
    }

    #[inline]
    pub fn value(&self, x: f64, u: f64) -> f64 {
        match *self {
            DriftFamily::Affine { b, c, k } => b * x + c * u + k,
            DriftFamily::Tanh { alpha, beta, c } => alpha * (beta * x).tanh() + c * u,
        }
    }

    #[inline]
    pub fn dx(&self, x: f64) -> f64 {
        match *self {
            DriftFamily::Affine { b, .. } => b,
            DriftFamily::Tanh { alpha, beta, .. } => {
                let t = (beta * x).tanh();
                alpha * beta * (1.0 - t * t)
            }
        }
    }

    #[inline]
    pub fn du(&self) -> f64 {
        match *self {
            DriftFamily::Affine { c, .. } | DriftFamily::Tanh { c, .. } => c,
        }
    }

    /// Global bounds `(C1, C2)` on `|f_x|` and `|f_u|`.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            DriftFamily::Affine { b, c, .. } => (b.abs(), c.abs()),
            DriftFamily::Tanh { alpha, beta, c } => ((alpha * beta).abs(), c.abs()),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, DriftFamily::Affine { .. })
    }
}

/// `l(x, u) = q/2 (x - x_target)^2 + r/2 (u - u_target)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningCost {
    pub q: f64,
    pub r: f64,
    #[serde(default)]
    pub x_target: f64,
    #[serde(default)]
    pub u_target: f64,
}

impl RunningCost {
    pub fn zero() -> Self {
        Self {
            q: 0.0,
            r: 0.0,
            x_target: 0.0,
            u_target: 0.0,
        }
    }

    #[inline]
    pub fn value(&self, x: f64, u: f64) -> f64 {
        0.5 * self.q * (x - self.x_target).powi(2) + 0.5 * self.r * (u - self.u_target).powi(2)
    }

    #[inline]
    pub fn dx(&self, x: f64) -> f64 {
        self.q * (x - self.x_target)
    }

    #[inline]
    pub fn du(&self, u: f64) -> f64 {
        self.r * (u - self.u_target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCost {
    /// `m/2 (x - target)^2`
    Quadratic {
        m: f64,
        #[serde(default)]
        target: f64,
    },
    /// `k x`
    Linear { k: f64 },
}

impl TerminalCost {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            TerminalCost::Quadratic { m, target } => 0.5 * m * (x - target).powi(2),
            TerminalCost::Linear { k } => k * x,
        }
    }

    #[inline]
    pub fn dx(&self, x: f64) -> f64 {
        match *self {
            TerminalCost::Quadratic { m, target } => m * (x - target),
            TerminalCost::Linear { k } => k,
        }
    }
}

/// Additive noise intensity `g(t)`, acting as a multiple of the identity on the retained modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Diffusion {
    Constant {
        sigma: f64,
    },
    /// `sigma e^{-rate t}`
    Decaying {
        sigma: f64,
        rate: f64,
    },
}

impl Diffusion {
    #[inline]
    pub fn intensity(&self, t: f64) -> f64 {
        match *self {
            Diffusion::Constant { sigma } => sigma,
            Diffusion::Decaying { sigma, rate } => sigma * (-rate * t).exp(),
        }
    }

    pub fn bound(&self) -> f64 {
        match *self {
            Diffusion::Constant { sigma } => sigma.abs(),
            Diffusion::Decaying { sigma, rate } => {
                if rate >= 0.0 {
                    sigma.abs()
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Diffusion::Constant { sigma } | Diffusion::Decaying { sigma, .. } => sigma == 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub drift: DriftFamily,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub diffusion: Diffusion,
}

/// Bounds certifying the Lipschitz and boundedness hypotheses for a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisAudit {
    pub semigroup_m: f64,
    pub semigroup_omega: f64,
    pub drift_lipschitz_x: f64,
    pub drift_bound_u: f64,
    pub diffusion_bound: f64,
}

/// Eigenfunctions sampled on the physical grid.
#[derive(Debug, Clone)]
struct Basis {
    weights: Vec<f64>,
    /// Row-major `grid x modes`.
    values: Vec<f64>,
    modes: usize,
}

impl Basis {
    fn new(spec: &OperatorSpec) -> Self {
        let n = spec.modes;
        if let OperatorKind::Scalar { .. } = spec.kind {
            return Self {
                weights: vec![1.0],
                values: vec![1.0],
                modes: 1,
            };
        }
        let p = 4 * n;
        let h = 1.0 / p as f64;
        let weights = (0..=p)
            .map(|j| if j == 0 || j == p { 0.5 * h } else { h })
            .collect();
        let mut values = Vec::with_capacity((p + 1) * n);
        for j in 0..=p {
            let xi = j as f64 * h;
            for k in 1..=n {
                values.push(match spec.kind {
                    OperatorKind::HeatNeumann if k == 1 => 1.0,
                    OperatorKind::HeatNeumann => 2f64.sqrt() * ((k - 1) as f64 * PI * xi).cos(),
                    _ => 2f64.sqrt() * (k as f64 * PI * xi).sin(),
                });
            }
        }
        Self {
            weights,
            values,
            modes: n,
        }
    }

    fn grid_len(&self) -> usize {
        self.weights.len()
    }

    fn reconstruct(&self, modes: &[f64], field: &mut [f64]) {
        for (j, fj) in field.iter_mut().enumerate() {
            let row = &self.values[j * self.modes..(j + 1) * self.modes];
            *fj = dot(row, modes);
        }
    }

    /// `out += scale * project(field)`.
    fn project_add(&self, field: &[f64], scale: &[f64], out: &mut [f64]) {
        for (j, fj) in field.iter().enumerate() {
            let wf = self.weights[j] * fj;
            if wf == 0.0 {
                continue;
            }
            let row = &self.values[j * self.modes..(j + 1) * self.modes];
            for ((o, e), s) in out.iter_mut().zip(row).zip(scale) {
                *o += s * wf * e;
            }
        }
    }
}

/// Reusable buffers for pointwise evaluations.
#[derive(Debug, Clone)]
pub struct Scratch {
    field: Vec<f64>,
    aux: Vec<f64>,
    modes: Vec<f64>,
}

/// Operator plus coefficients with precomputed basis data.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: OperatorSpec,
    pub coeffs: CoefficientSpec,
    basis: Basis,
    /// `1` for heat and scalar; `1/omega_k` on the velocity block for the wave kind.
    forcing_scale: Vec<f64>,
}

impl Model {
    pub fn new(spec: OperatorSpec, coeffs: CoefficientSpec) -> Result<Self> {
        let spec = OperatorSpec::new(spec.kind, spec.modes)?;
        let finite = |v: f64, name: &'static str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(SpectralError::NonFinite(name))
            }
        };
        match coeffs.drift {
            DriftFamily::Affine { b, c, k } => {
                finite(b, "drift.b")?;
                finite(c, "drift.c")?;
                finite(k, "drift.k")?;
            }
            DriftFamily::Tanh { alpha, beta, c } => {
                finite(alpha, "drift.alpha")?;
                finite(beta, "drift.beta")?;
                finite(c, "drift.c")?;
            }
        }
        let r = coeffs.running;
        for (v, n) in [
            (r.q, "running.q"),
            (r.r, "running.r"),
            (r.x_target, "running.x_target"),
            (r.u_target, "running.u_target"),
        ] {
            finite(v, n)?;
        }
        match coeffs.terminal {
            TerminalCost::Quadratic { m, target } => {
                finite(m, "terminal.m")?;
                finite(target, "terminal.target")?;
            }
            TerminalCost::Linear { k } => finite(k, "terminal.k")?,
        }
        match coeffs.diffusion {
            Diffusion::Constant { sigma } => finite(sigma, "diffusion.sigma")?,
            Diffusion::Decaying { sigma, rate } => {
                finite(sigma, "diffusion.sigma")?;
                finite(rate, "diffusion.rate")?;
            }
        }
        let basis = Basis::new(&spec);
        let forcing_scale = match spec.kind {
            OperatorKind::Wave => spec.eigenvalues().iter().map(|w| 1.0 / w).collect(),
            _ => vec![1.0; spec.modes],
        };
        Ok(Self {
            spec,
            coeffs,
            basis,
            forcing_scale,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    /// Number of control values (physical grid points).
    pub fn control_dim(&self) -> usize {
        self.basis.grid_len()
    }

    /// Dimension of the truncated cylindrical noise.
    pub fn noise_dim(&self) -> usize {
        self.spec.modes
    }

    /// Quadrature weights of the control inner product.
    pub fn control_weights(&self) -> &[f64] {
        &self.basis.weights
    }

    pub fn grid_points(&self) -> Vec<f64> {
        let p = self.basis.grid_len();
        if p == 1 {
            return vec![0.0];
        }
        (0..p).map(|j| j as f64 / (p - 1) as f64).collect()
    }

    pub fn u_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.basis
            .weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            field: vec![0.0; self.basis.grid_len()],
            aux: vec![0.0; self.basis.grid_len()],
            modes: vec![0.0; self.spec.modes],
        }
    }

    pub fn audit(&self) -> HypothesisAudit {
        let (m, omega) = self.spec.semigroup_bound();
        let (c1, c2) = self.coeffs.drift.bounds();
        HypothesisAudit {
            semigroup_m: m,
            semigroup_omega: omega,
            drift_lipschitz_x: c1,
            drift_bound_u: c2,
            diffusion_bound: self.coeffs.diffusion.bound(),
        }
    }

    /// Position block of a state (everything but the wave velocities).
    fn position<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.spec.modes]
    }

    fn forcing_offset(&self) -> usize {
        match self.spec.kind {
            OperatorKind::Wave => self.spec.modes,
            _ => 0,
        }
    }

    /// Reconstructs the physical field of `x` into the scratch field buffer.
    pub fn reconstruct(&self, x: &[f64], field: &mut [f64]) {
        self.basis.reconstruct(self.position(x), field);
    }

    /// Projects a physical field onto the retained modes.
    pub fn project(&self, field: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.modes];
        self.basis
            .project_add(field, &vec![1.0; self.spec.modes], &mut out);
        out
    }

    fn add_forcing(&self, field: &[f64], scale: f64, out: &mut [f64]) {
        let off = self.forcing_offset();
        let n = self.spec.modes;
        let target = &mut out[off..off + n];
        if scale == 1.0 {
            self.basis.project_add(field, &self.forcing_scale, target);
        } else {
            let s: Vec<f64> = self.forcing_scale.iter().map(|f| f * scale).collect();
            self.basis.project_add(field, &s, target);
        }
    }

    /// `out += scale * F(x, u)` for the pointwise drift.
    pub fn drift_add(&self, x: &[f64], u: &[f64], scale: f64, s: &mut Scratch, out: &mut [f64]) {
        self.reconstruct(x, &mut s.field);
        let f = &self.coeffs.drift;
        for (v, uj) in s.field.iter_mut().zip(u) {
            *v = f.value(*v, *uj);
        }
        self.add_forcing(&s.field, scale, out);
    }

    /// `out += scale * D_xF(x, u) h`.
    pub fn drift_dx_add(&self, x: &[f64], h: &[f64], scale: f64, s: &mut Scratch, out: &mut [f64]) {
        self.reconstruct(x, &mut s.field);
        self.reconstruct(h, &mut s.aux);
        let f = &self.coeffs.drift;
        for (v, hj) in s.field.iter_mut().zip(&s.aux) {
            *v = f.dx(*v) * hj;
        }
        self.add_forcing(&s.field, scale, out);
    }

    /// `out += scale * D_xF(x, u)' p`.
    pub fn drift_dx_adjoint_add(
        &self,
        x: &[f64],
        p: &[f64],
        scale: f64,
        s: &mut Scratch,
        out: &mut [f64],
    ) {
        self.reconstruct(x, &mut s.field);
        let off = self.forcing_offset();
        let n = self.spec.modes;
        for ((m, pk), fs) in s
            .modes
            .iter_mut()
            .zip(&p[off..off + n])
            .zip(&self.forcing_scale)
        {
            *m = pk * fs;
        }
        self.basis.reconstruct(&s.modes, &mut s.aux);
        let f = &self.coeffs.drift;
        for (v, pj) in s.field.iter_mut().zip(&s.aux) {
            *v = f.dx(*v) * pj;
        }
        let ones = vec![scale; n];
        self.basis.project_add(&s.field, &ones, &mut out[..n]);
    }

    /// `out += scale * D_uF(x, u) v`.
    pub fn drift_du_add(&self, v: &[f64], scale: f64, s: &mut Scratch, out: &mut [f64]) {
        let c = self.coeffs.drift.du();
        for (fj, vj) in s.field.iter_mut().zip(v) {
            *fj = c * vj;
        }
        let field = std::mem::take(&mut s.field);
        self.add_forcing(&field, scale, out);
        s.field = field;
    }

    /// `out += scale * D_uF(x, u)' p` as a U-gradient (Riesz representative
    /// for the weighted control inner product).
    pub fn drift_du_adjoint_add(&self, p: &[f64], scale: f64, s: &mut Scratch, out: &mut [f64]) {
        let off = self.forcing_offset();
        let n = self.spec.modes;
        for ((m, pk), fs) in s
            .modes
            .iter_mut()
            .zip(&p[off..off + n])
            .zip(&self.forcing_scale)
        {
            *m = pk * fs;
        }
        self.basis.reconstruct(&s.modes, &mut s.aux);
        let c = self.coeffs.drift.du();
        for (o, pj) in out.iter_mut().zip(&s.aux) {
            *o += scale * c * pj;
        }
    }

    /// Running cost `L(x, u) = sum_j w_j l(x(xi_j), u_j)`.
    pub fn running(&self, x: &[f64], u: &[f64], s: &mut Scratch) -> f64 {
        self.reconstruct(x, &mut s.field);
        let l = &self.coeffs.running;
        self.basis
            .weights
            .iter()
            .zip(s.field.iter().zip(u))
            .map(|(w, (xj, uj))| w * l.value(*xj, *uj))
            .sum()
    }

    /// `out += scale * D_xL(x, u)`.
    pub fn running_dx_add(&self, x: &[f64], scale: f64, s: &mut Scratch, out: &mut [f64]) {
        self.reconstruct(x, &mut s.field);
        let l = &self.coeffs.running;
        for v in s.field.iter_mut() {
            *v = l.dx(*v);
        }
        let n = self.spec.modes;
        let sc = vec![scale; n];
        self.basis.project_add(&s.field, &sc, &mut out[..n]);
    }

    /// `out += scale * D_uL(x, u)` as a U-gradient.
    pub fn running_du_add(&self, u: &[f64], scale: f64, out: &mut [f64]) {
        let l = &self.coeffs.running;
        for (o, uj) in out.iter_mut().zip(u) {
            *o += scale * l.du(*uj);
        }
    }

    pub fn terminal(&self, x: &[f64], s: &mut Scratch) -> f64 {
        self.reconstruct(x, &mut s.field);
        let h = &self.coeffs.terminal;
        self.basis
            .weights
            .iter()
            .zip(&s.field)
            .map(|(w, xj)| w * h.value(*xj))
            .sum()
    }

    /// `out += scale * D_xh(x)`.
    pub fn terminal_dx_add(&self, x: &[f64], scale: f64, s: &mut Scratch, out: &mut [f64]) {
        self.reconstruct(x, &mut s.field);
        let h = &self.coeffs.terminal;
        for v in s.field.iter_mut() {
            *v = h.dx(*v);
        }
        let n = self.spec.modes;
        let sc = vec![scale; n];
        self.basis.project_add(&s.field, &sc, &mut out[..n]);
    }

    /// `out += g(t) dw` for a noise increment on the retained modes.
    pub fn noise_add(&self, t: f64, dw: &[f64], out: &mut [f64]) {
        let g = self.coeffs.diffusion.intensity(t);
        if g == 0.0 {
            return;
        }
        let off = self.forcing_offset();
        for ((o, d), fs) in out[off..].iter_mut().zip(dw).zip(&self.forcing_scale) {
            *o += g * d * fs;
        }
    }
}

/// `F(x, u)` as a fresh state vector.
pub fn nemytskii_drift(model: &Model, x: &StateVector, u: &[f64]) -> StateVector {
    let mut out = StateVector::zeros(model.state_dim());
    model.drift_add(&x.0, u, 1.0, &mut model.scratch(), &mut out.0);
    out
}

/// Linearizations of the drift at a fixed `(x, u)`.
pub struct NemytskiiGradients<'a> {
    model: &'a Model,
    x: StateVector,
}

impl NemytskiiGradients<'_> {
    pub fn dx(&self, h: &StateVector) -> StateVector {
        let mut out = StateVector::zeros(self.model.state_dim());
        self.model
            .drift_dx_add(&self.x.0, &h.0, 1.0, &mut self.model.scratch(), &mut out.0);
        out
    }

    pub fn dx_adjoint(&self, p: &StateVector) -> StateVector {
        let mut out = StateVector::zeros(self.model.state_dim());
        self.model.drift_dx_adjoint_add(
            &self.x.0,
            &p.0,
            1.0,
            &mut self.model.scratch(),
            &mut out.0,
        );
        out
    }

    pub fn du(&self, v: &[f64]) -> StateVector {
        let mut out = StateVector::zeros(self.model.state_dim());
        self.model
            .drift_du_add(v, 1.0, &mut self.model.scratch(), &mut out.0);
        out
    }

    pub fn du_adjoint(&self, p: &StateVector) -> Vec<f64> {
        let mut out = vec![0.0; self.model.control_dim()];
        self.model
            .drift_du_adjoint_add(&p.0, 1.0, &mut self.model.scratch(), &mut out);
        out
    }
}

/// The pair of actions `h -> D_xF h`, `v -> D_uF v` at `(x, u)`.
///
/// The drift families are affine in `u`, so the `u` argument only fixes the
/// point of linearization formally.
pub fn nemytskii_gradients<'a>(
    model: &'a Model,
    x: &StateVector,
    _u: &[f64],
) -> NemytskiiGradients<'a> {
    NemytskiiGradients {
        model,
        x: x.clone(),
    }
}
