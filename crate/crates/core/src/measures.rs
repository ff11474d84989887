//! Finite signed regular measures on a closed interval.
//!
//! A measure is stored as a finite list of atoms plus an absolutely continuous
//! part whose density is piecewise linear (jumps are encoded by two knots at
//! the same abscissa). Integration is exact on atoms and trapezoidal on the
//! density knots, so every integral in the solvers reduces to a weighted sum
//! over [`RegularMeasure::nodes`].

use thiserror::Error;

/// Locations closer than this (relative to the support length) are treated as equal.
const LOCATION_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("invalid support [{a}, {b}]")]
    InvalidSupport { a: f64, b: f64 },
    #[error("atom at {location} lies outside the support [{a}, {b}]")]
    AtomOutsideSupport { location: f64, a: f64, b: f64 },
    #[error("atom locations must be strictly increasing ({prev} is followed by {next})")]
    UnorderedAtoms { prev: f64, next: f64 },
    #[error("non-finite atom or density value")]
    NonFinite,
    #[error("density knots must be nondecreasing and lie inside the support")]
    BadDensity,
    #[error("integrand is not evaluable at {0}")]
    NotEvaluable(f64),
    #[error("support right endpoint {endpoint} does not match the horizon {horizon}")]
    EndpointMismatch { endpoint: f64, horizon: f64 },
    #[error("measure still carries an atom at the right endpoint {0}; split it off first")]
    EndpointAtom(f64),
    #[error("measures live on different supports")]
    SupportMismatch,
    #[error("approximation index must be positive")]
    ZeroIndex,
}

pub type Result<T, E = MeasureError> = std::result::Result<T, E>;

/// Point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub location: f64,
    pub mass: f64,
}

/// Piecewise-linear signed density, zero outside its first and last knot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Density {
    knots: Vec<(f64, f64)>,
}

impl Density {
    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(MeasureError::NonFinite);
        }
        if knots.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(MeasureError::BadDensity);
        }
        Ok(Self { knots })
    }

    /// Samples `f` on `cells + 1` uniform knots over `[a, b]`.
    pub fn sampled(a: f64, b: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let cells = cells.max(1);
        let h = (b - a) / cells as f64;
        let knots = (0..=cells)
            .map(|i| {
                let x = if i == cells { b } else { a + i as f64 * h };
                (x, f(x))
            })
            .collect();
        Self::from_knots(knots)
    }

    /// Constant `height` on `[lo, hi]` with knot spacing at most `spacing`.
    pub fn boxcar(lo: f64, hi: f64, height: f64, spacing: f64) -> Result<Self> {
        let cells = if spacing > 0.0 {
            ((hi - lo) / spacing).ceil().max(1.0) as usize
        } else {
            1
        };
        Self::sampled(lo, hi, cells, |_| height)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn is_empty(&self) -> bool {
        self.knots.len() < 2
    }

    fn span(&self) -> Option<(f64, f64)> {
        Some((self.knots.first()?.0, self.knots.last()?.0))
    }

    /// Left and right limits of the density at `x`.
    pub fn limits(&self, x: f64) -> (f64, f64) {
        let Some((lo, hi)) = self.span() else {
            return (0.0, 0.0);
        };
        if x < lo || x > hi {
            return (0.0, 0.0);
        }
        let start = self.knots.partition_point(|k| k.0 < x);
        let end = self.knots.partition_point(|k| k.0 <= x);
        if start < end {
            let left = if x == lo { 0.0 } else { self.knots[start].1 };
            let right = if x == hi { 0.0 } else { self.knots[end - 1].1 };
            return (left, right);
        }
        let (x0, y0) = self.knots[start - 1];
        let (x1, y1) = self.knots[start];
        let v = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        (v, v)
    }

    /// Exact integral of the density.
    pub fn integral(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
            .sum()
    }

    /// Exact integral of `|density|`, accounting for sign changes inside segments.
    pub fn abs_integral(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| {
                let (x0, y0) = w[0];
                let (x1, y1) = w[1];
                let len = x1 - x0;
                if y0 * y1 >= 0.0 {
                    0.5 * len * (y0.abs() + y1.abs())
                } else {
                    0.5 * len * (y0 * y0 + y1 * y1) / (y0.abs() + y1.abs())
                }
            })
            .sum()
    }

    /// Positive part `max(w, 0)` with zero crossings inserted as knots.
    pub fn positive_part(&self) -> Density {
        self.clipped(1.0)
    }

    /// Negative part `max(-w, 0)`.
    pub fn negative_part(&self) -> Density {
        self.clipped(-1.0)
    }

    fn clipped(&self, sign: f64) -> Density {
        let mut out = Vec::with_capacity(self.knots.len() * 2);
        for (i, &(x, y)) in self.knots.iter().enumerate() {
            if i > 0 {
                let (xp, yp) = self.knots[i - 1];
                if yp * y < 0.0 {
                    let xc = xp + (x - xp) * yp / (yp - y);
                    out.push((xc, 0.0));
                }
            }
            out.push((x, (sign * y).max(0.0)));
        }
        Density { knots: out }
    }

    pub fn scaled(&self, factor: f64) -> Density {
        Density {
            knots: self.knots.iter().map(|&(x, y)| (x, factor * y)).collect(),
        }
    }

    /// Pointwise sum, merging knot sets and preserving jumps.
    pub fn add(&self, other: &Density) -> Density {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        let mut xs: Vec<f64> = self
            .knots
            .iter()
            .chain(other.knots.iter())
            .map(|k| k.0)
            .collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let last = xs.len() - 1;
        let mut knots = Vec::with_capacity(2 * xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let (l1, r1) = self.limits(x);
            let (l2, r2) = other.limits(x);
            let (left, right) = (l1 + l2, r1 + r2);
            if i == 0 {
                knots.push((x, right));
            } else if i == last {
                knots.push((x, left));
            } else {
                knots.push((x, left));
                if right != left {
                    knots.push((x, right));
                }
            }
        }
        Density { knots }
    }

    /// Trapezoid nodes `(x, weight)` such that `sum weight * phi(x)` approximates
    /// the integral of `phi * density`. Coincident knots are merged.
    pub fn trapezoid_nodes(&self) -> Vec<(f64, f64)> {
        let mut nodes: Vec<(f64, f64)> = Vec::with_capacity(self.knots.len());
        for w in self.knots.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            let half = 0.5 * (x1 - x0);
            if half == 0.0 {
                continue;
            }
            push_node(&mut nodes, x0, half * y0);
            push_node(&mut nodes, x1, half * y1);
        }
        nodes.retain(|n| n.1 != 0.0);
        nodes
    }
}

fn push_node(nodes: &mut Vec<(f64, f64)>, x: f64, w: f64) {
    match nodes.last_mut() {
        Some(last) if last.0 == x => last.1 += w,
        _ => nodes.push((x, w)),
    }
}

/// Signed regular measure on `[a, b]`: atoms plus a piecewise-linear density.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularMeasure {
    support: (f64, f64),
    atoms: Vec<Atom>,
    density: Density,
    resolution: f64,
    tail_mass: f64,
}

impl RegularMeasure {
    pub fn new(a: f64, b: f64, atoms: Vec<Atom>, density: Option<Density>) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || b < a {
            return Err(MeasureError::InvalidSupport { a, b });
        }
        let tol = LOCATION_EPS * (b - a).max(1.0);
        let mut atoms = atoms;
        for atom in atoms.iter_mut() {
            if !(atom.location.is_finite() && atom.mass.is_finite()) {
                return Err(MeasureError::NonFinite);
            }
            if atom.location < a - tol || atom.location > b + tol {
                return Err(MeasureError::AtomOutsideSupport {
                    location: atom.location,
                    a,
                    b,
                });
            }
            atom.location = atom.location.clamp(a, b);
        }
        for w in atoms.windows(2) {
            if w[1].location <= w[0].location {
                return Err(MeasureError::UnorderedAtoms {
                    prev: w[0].location,
                    next: w[1].location,
                });
            }
        }
        let density = density.unwrap_or_default();
        if let Some((lo, hi)) = density.span() {
            if lo < a - tol || hi > b + tol {
                return Err(MeasureError::BadDensity);
            }
        }
        let resolution = density
            .knots
            .windows(2)
            .map(|w| w[1].0 - w[0].0)
            .filter(|h| *h > 0.0)
            .fold(f64::INFINITY, f64::min);
        let resolution = if resolution.is_finite() {
            resolution
        } else {
            (b - a) / 512.0
        };
        Ok(Self {
            support: (a, b),
            atoms,
            density,
            resolution,
            tail_mass: 0.0,
        })
    }

    pub fn zero(a: f64, b: f64) -> Result<Self> {
        Self::new(a, b, Vec::new(), None)
    }

    pub fn dirac(a: f64, b: f64, location: f64) -> Result<Self> {
        Self::new(
            a,
            b,
            vec![Atom {
                location,
                mass: 1.0,
            }],
            None,
        )
    }

    /// Atoms given as unsorted `(location, mass)` pairs; equal locations are rejected.
    pub fn discrete(a: f64, b: f64, pairs: &[(f64, f64)]) -> Result<Self> {
        let mut atoms: Vec<Atom> = pairs
            .iter()
            .map(|&(location, mass)| Atom { location, mass })
            .collect();
        atoms.sort_by(|x, y| x.location.total_cmp(&y.location));
        Self::new(a, b, atoms, None)
    }

    /// Uniform density of total mass `mass` on the whole support.
    pub fn uniform(a: f64, b: f64, mass: f64, cells: usize) -> Result<Self> {
        let height = mass / (b - a);
        Self::new(
            a,
            b,
            Vec::new(),
            Some(Density::sampled(a, b, cells, |_| height)?),
        )
    }

    /// Density interpolating linearly between `w_a` at `a` and `w_b` at `b`.
    pub fn linear_density(a: f64, b: f64, w_a: f64, w_b: f64, cells: usize) -> Result<Self> {
        let d = Density::sampled(a, b, cells, |x| w_a + (w_b - w_a) * (x - a) / (b - a))?;
        Self::new(a, b, Vec::new(), Some(d))
    }

    /// `sum_{i=1}^{i_max} 2^{-i} delta_{b - (b-a)/i}`, the truncated infinite
    /// discrete example; the dropped mass `2^{-i_max}` is kept in [`Self::tail_mass`].
    pub fn truncated_geometric(a: f64, b: f64, scale: f64, i_max: usize) -> Result<Self> {
        let atoms = (1..=i_max.max(1))
            .map(|i| Atom {
                location: b - (b - a) / i as f64,
                mass: scale * 0.5f64.powi(i as i32),
            })
            .collect();
        let mut m = Self::new(a, b, atoms, None)?;
        m.tail_mass = scale.abs() * 0.5f64.powi(i_max.max(1) as i32);
        Ok(m)
    }

    /// Same measure with a different quadrature spacing for newly built density pieces.
    pub fn with_resolution(mut self, resolution: f64) -> Self {
        if resolution > 0.0 && resolution.is_finite() {
            self.resolution = resolution;
        }
        self
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn density(&self) -> &Density {
        &self.density
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Mass dropped when truncating an infinite discrete measure.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn with_tail_mass(mut self, tail_mass: f64) -> Self {
        self.tail_mass = tail_mass;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.mass == 0.0) && self.density.knots.iter().all(|k| k.1 == 0.0)
    }

    pub fn is_absolutely_continuous(&self) -> bool {
        self.atoms.iter().all(|a| a.mass == 0.0)
    }

    /// `|mu|([a, b])`.
    pub fn total_variation(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass.abs()).sum::<f64>() + self.density.abs_integral()
    }

    /// `mu([a, b])`.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum::<f64>() + self.density.integral()
    }

    /// Mass of the atom at `x`, zero if there is none.
    pub fn atom_mass_at(&self, x: f64) -> f64 {
        let tol = self.location_tol();
        self.atoms
            .iter()
            .filter(|a| (a.location - x).abs() <= tol)
            .map(|a| a.mass)
            .sum()
    }

    fn location_tol(&self) -> f64 {
        LOCATION_EPS * (self.support.1 - self.support.0).max(1.0)
    }

    /// Quadrature nodes `(location, weight)`: atoms first, then density nodes.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .atoms
            .iter()
            .filter(|a| a.mass != 0.0)
            .map(|a| (a.location, a.mass))
            .collect();
        out.extend(self.density.trapezoid_nodes());
        out
    }

    pub fn integrate(&self, mut phi: impl FnMut(f64) -> f64) -> f64 {
        self.nodes().into_iter().map(|(x, w)| w * phi(x)).sum()
    }

    /// Like [`Self::integrate`], for integrands that may be undefined at some points.
    pub fn try_integrate(&self, mut phi: impl FnMut(f64) -> Option<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for (x, w) in self.nodes() {
            acc += w * phi(x).ok_or(MeasureError::NotEvaluable(x))?;
        }
        Ok(acc)
    }

    /// Jordan decomposition `mu = mu_plus - mu_minus`.
    pub fn jordan(&self) -> (RegularMeasure, RegularMeasure) {
        let (a, b) = self.support;
        let split = |sign: f64| {
            let atoms = self
                .atoms
                .iter()
                .filter(|at| sign * at.mass > 0.0)
                .map(|at| Atom {
                    location: at.location,
                    mass: sign * at.mass,
                })
                .collect();
            let density = if sign > 0.0 {
                self.density.positive_part()
            } else {
                self.density.negative_part()
            };
            RegularMeasure {
                support: (a, b),
                atoms,
                density,
                resolution: self.resolution,
                tail_mass: 0.0,
            }
        };
        (split(1.0), split(-1.0))
    }

    /// Measure plus an extra atom (merged with an existing atom at the same place).
    pub fn with_atom(&self, location: f64, mass: f64) -> Result<RegularMeasure> {
        let tol = self.location_tol();
        let mut atoms = self.atoms.clone();
        match atoms
            .iter_mut()
            .find(|a| (a.location - location).abs() <= tol)
        {
            Some(a) => a.mass += mass,
            None => {
                atoms.push(Atom { location, mass });
                atoms.sort_by(|x, y| x.location.total_cmp(&y.location));
            }
        }
        let mut m = RegularMeasure::new(
            self.support.0,
            self.support.1,
            atoms,
            Some(self.density.clone()),
        )?;
        m.resolution = self.resolution;
        m.tail_mass = self.tail_mass;
        Ok(m)
    }

    /// The same measure translated by `shift` (support included).
    pub fn shifted(&self, shift: f64) -> RegularMeasure {
        RegularMeasure {
            support: (self.support.0 + shift, self.support.1 + shift),
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    location: a.location + shift,
                    mass: a.mass,
                })
                .collect(),
            density: Density {
                knots: self
                    .density
                    .knots
                    .iter()
                    .map(|&(x, y)| (x + shift, y))
                    .collect(),
            },
            resolution: self.resolution,
            tail_mass: self.tail_mass,
        }
    }
}

/// `mu = bar_mu + atom_mass * delta_T`, with `bar_mu({T}) = 0`.
pub fn split_endpoint(mu_h: &RegularMeasure, horizon: f64) -> Result<(RegularMeasure, f64)> {
    let (a, b) = mu_h.support;
    if (b - horizon).abs() > mu_h.location_tol() {
        return Err(MeasureError::EndpointMismatch {
            endpoint: b,
            horizon,
        });
    }
    let tol = mu_h.location_tol();
    let atom_mass = mu_h.atom_mass_at(b);
    let atoms = mu_h
        .atoms
        .iter()
        .copied()
        .filter(|at| (at.location - b).abs() > tol)
        .collect();
    let mut bar = RegularMeasure::new(a, b, atoms, Some(mu_h.density.clone()))?;
    bar.resolution = mu_h.resolution;
    bar.tail_mass = mu_h.tail_mass;
    Ok((bar, atom_mass))
}

/// Replaces each atom `(x_k, m_k)` by the density `m_k / eps` on `[x_k, x_k + eps]`
/// with `eps = min(m_gap / 2, (b - a) / n)`. Atoms too close to the right end
/// get a smaller `eps` so the mass stays inside the support.
pub fn mollify_approximation(bar_mu: &RegularMeasure, n: usize) -> Result<RegularMeasure> {
    Ok(MeasureSequence::new(bar_mu.clone(), n)?.approximant)
}

/// The `n`-th absolutely continuous approximant of a measure without endpoint atom.
#[derive(Debug, Clone)]
pub struct MeasureSequence {
    pub index: usize,
    pub base: RegularMeasure,
    pub approximant: RegularMeasure,
    /// Mollification width used for interior atoms.
    pub width: f64,
    /// Locations of atoms whose width had to shrink to stay inside the support.
    pub shrunk: Vec<f64>,
}

impl MeasureSequence {
    pub fn new(base: RegularMeasure, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(MeasureError::ZeroIndex);
        }
        let (a, b) = base.support;
        let tol = base.location_tol();
        if base
            .atoms
            .iter()
            .any(|at| at.mass != 0.0 && (at.location - b).abs() <= tol)
        {
            return Err(MeasureError::EndpointAtom(b));
        }
        let atoms: Vec<Atom> = base
            .atoms
            .iter()
            .copied()
            .filter(|at| at.mass != 0.0)
            .collect();
        let min_gap = atoms
            .windows(2)
            .map(|w| w[1].location - w[0].location)
            .fold(f64::INFINITY, f64::min);
        let width = (0.5 * min_gap).min((b - a) / n as f64);
        let mut density = base.density.clone();
        let mut shrunk = Vec::new();
        for atom in &atoms {
            let mut eps = width;
            if atom.location + eps > b {
                eps = b - atom.location;
                shrunk.push(atom.location);
            }
            let piece = Density::boxcar(
                atom.location,
                atom.location + eps,
                atom.mass / eps,
                base.resolution,
            )?;
            density = density.add(&piece);
        }
        let mut approximant = RegularMeasure::new(a, b, Vec::new(), Some(density))?;
        approximant.resolution = base.resolution;
        Ok(Self {
            index: n,
            base,
            approximant,
            width,
            shrunk,
        })
    }
}

/// `max_phi |int phi d mu - int phi d approx|` over the given test functions.
pub fn weak_star_error(
    mu: &RegularMeasure,
    approx: &RegularMeasure,
    tests: &[&dyn Fn(f64) -> f64],
) -> Result<f64> {
    let (a1, b1) = mu.support;
    let (a2, b2) = approx.support;
    let tol = mu.location_tol();
    if (a1 - a2).abs() > tol || (b1 - b2).abs() > tol {
        return Err(MeasureError::SupportMismatch);
    }
    Ok(tests
        .iter()
        .map(|phi| (mu.integrate(phi) - approx.integrate(phi)).abs())
        .fold(0.0, f64::max))
}

/// The test family `{1, x, x^2, sin x}`.
pub fn standard_test_functions() -> [fn(f64) -> f64; 4] {
    [|_| 1.0, |x| x, |x| x * x, f64::sin]
}
