//! Hamilton-flow integration and the transition analysis: conservation-grade
//! adaptive Runge-Kutta, vanishing-order measurement along trajectories, the
//! invariants `kappa`, `nu`, `delta`, root selection `b`, the reduced-system
//! matrices with their spectra, and the tangent-bicharacteristic search.

use crate::error::{Error, Result};
use crate::expr::{hamilton_field, poisson, CompiledExpr, Expr, PhasePoint, Var};
use crate::linalg::{self, Mat};
use crate::normform::verify_normal_form;
use crate::rng::Rng;
use crate::spectral::SymbolSystem;
use num_complex::Complex64;

// ---------------------------------------------------------------------------
// Adaptive Runge-Kutta 5(4), Dormand-Prince coefficients
// ---------------------------------------------------------------------------

/// Integration controls. The defaults give conservation-grade accuracy for
/// the near-singular approaches the tangency search needs.
#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Relative drift of `p` tolerated along an accepted trajectory.
    pub drift_tol: f64,
    /// Cap on the step size; keeps recorded samples dense enough for the
    /// order fits.
    pub h_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            rtol: 1e-10,
            atol: 1e-10,
            max_steps: 2_000_000,
            drift_tol: 1e-9,
            h_max: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTag {
    /// Samples ordered by the flow parameter `s`.
    STime,
    /// Samples reindexed by monotone `x0`.
    X0,
}

#[derive(Clone, Debug)]
pub struct TrajSample {
    pub s: f64,
    pub point: PhasePoint,
    pub p: f64,
}

/// An integrated characteristic with its conservation record.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub param: ParamTag,
    pub samples: Vec<TrajSample>,
    pub p_initial: f64,
    pub p_drift: f64,
}

impl Trajectory {
    pub fn last_point(&self) -> &PhasePoint {
        &self.samples.last().expect("trajectory is never empty").point
    }

    /// Re-index by `x0`. Fails when `dx0/ds` is not bounded away from zero
    /// along the samples (sign changes or stalls).
    pub fn reparametrize_by_x0(&self, min_slope: f64) -> Result<Trajectory> {
        if self.samples.len() < 3 {
            return Err(Error::Invalid("too few samples to reparametrize".into()));
        }
        let mut dir = 0.0f64;
        for w in self.samples.windows(2) {
            let dx = w[1].point.x[0] - w[0].point.x[0];
            let ds = w[1].s - w[0].s;
            if ds == 0.0 {
                continue;
            }
            let slope = dx / ds;
            if slope.abs() < min_slope || (dir != 0.0 && slope.signum() != dir) {
                return Err(Error::Precondition(format!(
                    "dx0/ds = {slope:.3e} not bounded away from zero; cannot reparametrize"
                )));
            }
            dir = slope.signum();
        }
        let mut samples = self.samples.clone();
        samples.sort_by(|a, b| a.point.x[0].partial_cmp(&b.point.x[0]).unwrap());
        Ok(Trajectory {
            param: ParamTag::X0,
            samples,
            p_initial: self.p_initial,
            p_drift: self.p_drift,
        })
    }

    /// CSV export: `s,t,x0..xn,xi0..xin,p,phi1..phid,theta` with `t = 1/s`.
    pub fn write_csv<W: std::io::Write>(&self, sys: &SymbolSystem, out: &mut W) -> Result<()> {
        let n = sys.n;
        let d = sys.d();
        let mut header = String::from("s,t");
        for i in 0..=n {
            header.push_str(&format!(",x{i}"));
        }
        for i in 0..=n {
            header.push_str(&format!(",xi{i}"));
        }
        header.push_str(",p");
        for j in 1..=d {
            header.push_str(&format!(",phi{j}"));
        }
        header.push_str(",theta");
        writeln!(out, "{header}")?;
        let theta = sys.theta_expr();
        for sample in &self.samples {
            let t = if sample.s != 0.0 { 1.0 / sample.s } else { f64::INFINITY };
            let mut line = format!("{:.17e},{:.17e}", sample.s, t);
            for v in sample.point.x.iter().chain(sample.point.xi.iter()) {
                line.push_str(&format!(",{v:.17e}"));
            }
            line.push_str(&format!(",{:.17e}", sample.p));
            for phi in &sys.phis {
                line.push_str(&format!(",{:.17e}", phi.eval(&sample.point)?));
            }
            line.push_str(&format!(",{:.17e}", theta.eval(&sample.point)?));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_ERR: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct CompiledField {
    field: Vec<CompiledExpr>,
    p: CompiledExpr,
}

impl CompiledField {
    fn new(sys: &SymbolSystem) -> Result<Self> {
        let p = sys.principal_symbol();
        let field = hamilton_field(&p, sys.n)
            .iter()
            .map(|e| e.compile(sys.n))
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledField { field, p: p.compile(sys.n)? })
    }

    fn eval_into(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        for (slot, f) in out.iter_mut().zip(&self.field) {
            *slot = f.eval(state)?;
        }
        Ok(())
    }
}

/// Integrate the Hamilton flow of the principal symbol from `rho0` over
/// `span` (signed) in the flow parameter `s`. Every accepted step is
/// recorded. The drift of `p` is enforced against `cfg.drift_tol`.
pub fn integrate(
    sys: &SymbolSystem,
    rho0: &PhasePoint,
    span: f64,
    cfg: &FlowConfig,
) -> Result<Trajectory> {
    let compiled = CompiledField::new(sys)?;
    integrate_compiled(&compiled, rho0, 0.0, span, cfg)
}

fn integrate_compiled(
    compiled: &CompiledField,
    rho0: &PhasePoint,
    s0: f64,
    span: f64,
    cfg: &FlowConfig,
) -> Result<Trajectory> {
    if span == 0.0 {
        return Err(Error::Invalid("integration span must be nonzero".into()));
    }
    let dim = 2 * rho0.x.len();
    let mut state = rho0.to_state();
    let p0 = compiled.p.eval(&state)?;
    let mut samples = Vec::new();
    let mut drift: f64 = 0.0;
    samples.push(TrajSample { s: s0, point: rho0.clone(), p: p0 });

    let s_end = s0 + span;
    let dir = span.signum();
    let mut s = s0;
    let mut h = dir * (span.abs() / 100.0).min(1e-3).max(1e-10);
    let mut k = vec![vec![0.0; dim]; 7];
    let mut ytmp = vec![0.0; dim];
    compiled.eval_into(&state, &mut k[0])?;

    let mut steps = 0usize;
    while (s_end - s) * dir > 0.0 {
        if steps > cfg.max_steps {
            return Err(Error::StepUnderflow { s });
        }
        steps += 1;
        if (s + h - s_end) * dir > 0.0 {
            h = s_end - s;
        }
        // stages
        for i in 1..7 {
            for j in 0..dim {
                let mut acc = 0.0;
                for (l, kl) in k.iter().enumerate().take(i) {
                    let a = DP_A[i][l];
                    if a != 0.0 {
                        acc += a * kl[j];
                    }
                }
                ytmp[j] = state[j] + h * acc;
            }
            let (head, tail) = k.split_at_mut(i);
            let _ = head;
            compiled.eval_into(&ytmp, &mut tail[0])?;
        }
        // 5th-order solution is stage 7's argument (FSAL layout)
        let mut err_norm = 0.0f64;
        for j in 0..dim {
            let mut acc5 = 0.0;
            let mut errj = 0.0;
            for (l, kl) in k.iter().enumerate() {
                if l < 6 {
                    acc5 += DP_A[6][l] * kl[j];
                }
                errj += DP_ERR[l] * kl[j];
            }
            ytmp[j] = state[j] + h * acc5;
            let sc = cfg.atol + cfg.rtol * state[j].abs().max(ytmp[j].abs());
            let e = h * errj / sc;
            err_norm += e * e;
        }
        err_norm = (err_norm / dim as f64).sqrt();

        if err_norm <= 1.0 {
            s += h;
            state.copy_from_slice(&ytmp);
            let pt = PhasePoint::from_state(&state);
            let pv = compiled.p.eval(&state)?;
            drift = drift.max((pv - p0).abs());
            samples.push(TrajSample { s, point: pt, p: pv });
            compiled.eval_into(&state, &mut k[0])?;
        }
        let factor = if err_norm > 0.0 {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
        if h.abs() > cfg.h_max {
            h = dir * cfg.h_max;
        }
        if h.abs() < 1e-14 * (1.0 + s.abs()) {
            return Err(Error::StepUnderflow { s });
        }
        let _ = DP_C;
    }

    let scale = 1.0 + p0.abs();
    if drift > cfg.drift_tol * scale {
        return Err(Error::Inconsistent(format!(
            "p drifted by {drift:.3e} over the span (tolerance {:.3e})",
            cfg.drift_tol * scale
        )));
    }
    Ok(Trajectory { param: ParamTag::STime, samples, p_initial: p0, p_drift: drift })
}

// ---------------------------------------------------------------------------
// Vanishing orders along trajectories
// ---------------------------------------------------------------------------

/// Fitted vanishing order of `f` along the trajectory against `|x0|`.
#[derive(Clone, Debug)]
pub struct OrderFit {
    pub order: f64,
    /// Decades of `|x0|` covered by the fit window.
    pub decade_span: f64,
    pub points_used: usize,
    /// Limit estimate of `f / x0^m` when a scaling exponent was requested.
    pub scaled_limit: Option<f64>,
}

/// Least-squares vanishing order of `f(gamma)` as `x0 -> 0` over the window
/// `lo <= |x0| <= hi`. Sign changes of `f` inside the window invalidate the
/// log fit and are reported as errors; a window below one decade is
/// rejected.
pub fn vanishing_order(
    traj: &Trajectory,
    f: &Expr,
    window: (f64, f64),
    scaling_exponent: Option<i32>,
) -> Result<OrderFit> {
    let (lo, hi) = window;
    let mut pairs = Vec::new();
    let mut sign = 0.0f64;
    let mut smallest: Option<(f64, f64)> = None;
    for sample in &traj.samples {
        let x0 = sample.point.x[0].abs();
        if x0 < lo || x0 > hi {
            continue;
        }
        let v = f.eval(&sample.point)?;
        if v != 0.0 {
            if sign != 0.0 && v.signum() != sign {
                return Err(Error::Invalid(
                    "sign change inside the fit window invalidates the log fit".into(),
                ));
            }
            sign = v.signum();
        }
        if smallest.map_or(true, |(sx, _)| x0 < sx) {
            smallest = Some((x0, v));
        }
        pairs.push((x0, v.abs()));
    }
    if pairs.len() < 8 {
        return Err(Error::Invalid(format!(
            "only {} samples inside the fit window",
            pairs.len()
        )));
    }
    let xmin = pairs.iter().map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
    let xmax = pairs.iter().map(|(x, _)| *x).fold(0.0f64, f64::max);
    let decades = (xmax / xmin).log10();
    if decades < 1.0 {
        return Err(Error::Invalid(format!(
            "fit window covers only {decades:.2} decades of x0"
        )));
    }
    let order = linalg::log_log_slope(&pairs)
        .ok_or_else(|| Error::Invalid("degenerate log-log fit".into()))?;
    let scaled_limit = scaling_exponent.and_then(|m| {
        smallest.map(|(x0, v)| v / x0.powi(m))
    });
    Ok(OrderFit { order, decade_span: decades, points_used: pairs.len(), scaled_limit })
}

// ---------------------------------------------------------------------------
// Transition invariants
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum DependenceCase {
    /// `d theta` independent of the span of the `d phi_j`.
    Independent,
    /// `d theta` lies in the span of the `d phi_j` at the base point.
    Dependent,
}

/// Real roots of `1/delta - kappa b + nu delta b^2 = 0` with the selection
/// rule: for `nu > 0` take the root with the smaller `delta kappa b`.
#[derive(Clone, Debug)]
pub struct BRoots {
    pub roots: Vec<f64>,
    pub selected: f64,
}

/// Leading coefficients of the rescaled flow at the base point.
#[derive(Clone, Copy, Debug)]
pub struct LeadingConstants {
    pub x0: f64,
    pub phi2: f64,
    pub theta: f64,
    pub xi0: f64,
    pub b: f64,
}

impl LeadingConstants {
    pub fn from_root(b: f64, kappa: f64, nu: f64, delta: f64) -> Self {
        LeadingConstants {
            x0: 2.0 * b,
            phi2: b / delta,
            theta: -nu * b * b,
            xi0: (kappa * b * b / delta - nu * b * b * b) / 2.0,
            b,
        }
    }

    /// Max residual of the constant-term equations of the rescaled flow;
    /// zero (to rounding) exactly when `b` solves the root equation.
    pub fn residual(&self, kappa: f64, nu: f64, delta: f64) -> f64 {
        let b = self.b;
        let eqs = [
            -4.0 * self.xi0 + 2.0 * kappa * b * self.phi2 + 2.0 * delta * self.theta * self.phi2,
            -self.x0 + 2.0 * b,
            -2.0 * b + 2.0 * delta * self.phi2,
            -2.0 * self.theta - nu * self.x0 * b,
            -3.0 * self.phi2 + 2.0 * kappa * b * b + 2.0 * delta * self.xi0
                + 2.0 * delta * self.theta * b,
        ];
        eqs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Transition data at the base point of a normal-form system.
#[derive(Clone, Debug)]
pub struct TransitionAnalysis {
    pub nu: f64,
    pub kappa: f64,
    pub delta: f64,
    pub discriminant: f64,
    pub exists_tangent: bool,
    pub case: DependenceCase,
    pub b: Option<BRoots>,
    pub leading: Option<LeadingConstants>,
    pub reduced_matrix: Option<ReducedMatrixReport>,
}

/// The reduced-system matrix for one dependence case, its characteristic
/// polynomial compared against the factored closed form, and its spectrum.
#[derive(Clone, Debug)]
pub struct ReducedMatrixReport {
    pub case: DependenceCase,
    pub matrix: Mat,
    pub spectrum: Vec<Complex64>,
    pub charpoly: Vec<f64>,
    pub factored: Vec<f64>,
    pub charpoly_residual: f64,
    /// Eigenvalue 1 present and all other real eigenvalues negative.
    pub spectral_gap_ok: bool,
}

/// `nu = {xi0-phi1, {xi0-phi1, theta}}` at the base point.
pub fn nu_invariant(sys: &SymbolSystem) -> Result<f64> {
    let rho = sys.base_point.normalized();
    let central = Expr::sub(&Expr::xi(0), &sys.phis[0]);
    let theta = sys.theta_expr();
    poisson(&central, &poisson(&central, &theta)).eval(&rho)
}

/// `kappa = {{xi0-phi1, phi2}, phi2} / {phi1, phi2}` at the base point.
pub fn kappa_invariant(sys: &SymbolSystem) -> Result<(f64, f64)> {
    if sys.d() < 2 {
        return Err(Error::Invalid("kappa needs at least two defining functions".into()));
    }
    let rho = sys.base_point.normalized();
    let central = Expr::sub(&Expr::xi(0), &sys.phis[0]);
    let delta = poisson(&sys.phis[0], &sys.phis[1]).eval(&rho)?;
    if delta.abs() < 1e-12 {
        return Err(Error::Degenerate(format!("{{phi1, phi2}} = {delta:.3e} at the base point")));
    }
    let num = poisson(&poisson(&central, &sys.phis[1]), &sys.phis[1]).eval(&rho)?;
    Ok((num / delta, delta))
}

/// Real nonzero roots of `1/delta - kappa b + nu delta b^2 = 0` with the
/// selection rule applied.
pub fn b_roots(kappa: f64, nu: f64, delta: f64) -> Result<BRoots> {
    if delta == 0.0 {
        return Err(Error::Degenerate("delta = 0".into()));
    }
    let scale = kappa.abs().max(nu.abs()).max(1.0);
    if nu.abs() <= 1e-14 * scale {
        if kappa.abs() <= 1e-14 * scale {
            return Err(Error::NoRealRoot("kappa = nu = 0 leaves 1/delta = 0".into()));
        }
        let b = 1.0 / (delta * kappa);
        return Ok(BRoots { roots: vec![b], selected: b });
    }
    let disc = kappa * kappa - 4.0 * nu;
    if disc < 0.0 {
        return Err(Error::NoRealRoot(format!(
            "kappa^2 - 4 nu = {disc:.6e} < 0"
        )));
    }
    let sq = disc.sqrt();
    let b1 = (kappa + sq) / (2.0 * nu * delta);
    let b2 = (kappa - sq) / (2.0 * nu * delta);
    let mut roots = vec![b1, b2];
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let selected = if nu > 0.0 {
        // smaller delta kappa b keeps the quartic factor's real roots negative
        if delta * kappa * b1 <= delta * kappa * b2 {
            b1
        } else {
            b2
        }
    } else {
        // either root works; take the one of smaller magnitude for stability
        if b1.abs() <= b2.abs() {
            b1
        } else {
            b2
        }
    };
    Ok(BRoots { roots, selected })
}

/// Assemble the reduced-system matrix for the given case and verify its
/// characteristic polynomial against the factored closed form.
pub fn reduced_matrix(
    kappa: f64,
    nu: f64,
    delta: f64,
    b: f64,
    case: DependenceCase,
) -> Result<ReducedMatrixReport> {
    let root_residual = (1.0 / delta - kappa * b + nu * delta * b * b).abs();
    if root_residual > 1e-9 * (1.0 + (kappa * b).abs()) {
        return Err(Error::Precondition(format!(
            "b = {b} is not a root of the leading-term equation (residual {root_residual:.3e})"
        )));
    }
    let di = 1.0 / delta;
    let matrix = match case {
        DependenceCase::Independent => Mat::from_rows(&[
            vec![-1.0, 0.0, 0.0, 2.0, 0.0],
            vec![0.0, -3.0, 2.0 * delta, 2.0 * (kappa * b + di), 2.0 * delta * b],
            vec![0.0, 2.0 * di, -4.0, 2.0 * kappa * di * b, 2.0 * b],
            vec![0.0, 2.0 * delta, 0.0, -2.0, 0.0],
            vec![-nu * b, 0.0, 0.0, -2.0 * nu * b, -2.0],
        ]),
        DependenceCase::Dependent => Mat::from_rows(&[
            vec![-1.0, 0.0, 0.0, 2.0],
            vec![-2.0 * nu * delta * b * b, -3.0, 2.0 * delta, 2.0 * (kappa * b + di)],
            vec![-2.0 * nu * b * b, 2.0 * di, -4.0, 2.0 * kappa * di * b],
            vec![0.0, 2.0 * delta, 0.0, -2.0],
        ]),
    };
    let charpoly = linalg::charpoly(&matrix);
    // factored closed form: (l-1)(l+6)(l^2+5l+8-4 kappa delta b), with an
    // extra (l+2) factor in the independent case
    let quad = vec![1.0, 5.0, 8.0 - 4.0 * kappa * delta * b];
    let mut factored = linalg::poly_mul(&[1.0, -1.0], &[1.0, 6.0]);
    factored = linalg::poly_mul(&factored, &quad);
    if case == DependenceCase::Independent {
        factored = linalg::poly_mul(&factored, &[1.0, 2.0]);
    }
    // both are monic; compare trailing coefficients
    let mut resid: f64 = 0.0;
    for (got, want) in charpoly.iter().zip(factored.iter().skip(1)) {
        resid = resid.max((got - want).abs() / (1.0 + want.abs()));
    }
    let spectrum = linalg::eigenvalues(&matrix)?;
    let has_one = spectrum
        .iter()
        .any(|l| (l - Complex64::new(1.0, 0.0)).norm() < 1e-8);
    let others_negative = spectrum.iter().all(|l| {
        let is_real = l.im.abs() < 1e-8;
        let is_the_one = (l - Complex64::new(1.0, 0.0)).norm() < 1e-8;
        !is_real || is_the_one || l.re < 0.0
    });
    Ok(ReducedMatrixReport {
        case,
        matrix,
        spectrum,
        charpoly,
        factored: factored[1..].to_vec(),
        charpoly_residual: resid,
        spectral_gap_ok: has_one && others_negative,
    })
}

/// Tolerance for the bracket preconditions of the transition analysis.
pub const TRANSITION_TOL: f64 = 1e-8;

/// Compute the transition invariants at the base point. Preconditions: the
/// system passes the normal-form certificate on sampled Sigma' points,
/// `theta` vanishes at the base point, and the first-order bracket
/// conditions hold there.
pub fn transition_invariants(sys: &SymbolSystem) -> Result<TransitionAnalysis> {
    let rho = sys.base_point.normalized();
    let mut rng = Rng::new(0x7a1e);
    let samples = sys.sample_sigma_prime(&mut rng, 24, 0.05);
    let cert = verify_normal_form(sys, &samples)?;
    if !cert.verdict {
        return Err(Error::Precondition(format!(
            "normal-form certificate failed: {cert:?}"
        )));
    }
    let theta = sys.theta_expr();
    let theta0 = theta.eval(&rho)?;
    if theta0.abs() > TRANSITION_TOL {
        return Err(Error::Precondition(format!(
            "theta at the base point is {theta0:.3e}, expected 0"
        )));
    }
    let central = Expr::sub(&Expr::xi(0), &sys.phis[0]);
    let first = poisson(&central, &theta).eval(&rho)?;
    if first.abs() > TRANSITION_TOL {
        return Err(Error::Precondition(format!(
            "{{xi0 - phi1, theta}} = {first:.3e} at the base point, expected 0"
        )));
    }
    for j in cert.rank..sys.d() {
        let v = poisson(&sys.phis[j], &theta).eval(&rho)?.abs();
        if v > TRANSITION_TOL {
            return Err(Error::Precondition(format!(
                "{{phi_{}, theta}} = {v:.3e} at the base point, expected 0",
                j + 1
            )));
        }
    }

    let nu = nu_invariant(sys)?;
    let (kappa, delta) = kappa_invariant(sys)?;
    let disc = kappa * kappa - 4.0 * nu;
    let exists_tangent = disc > 0.0;
    let case = dependence_case(sys)?;

    let (b, leading, reduced) = if exists_tangent {
        let roots = b_roots(kappa, nu, delta)?;
        let lead = LeadingConstants::from_root(roots.selected, kappa, nu, delta);
        let rm = reduced_matrix(kappa, nu, delta, roots.selected, case)?;
        (Some(roots), Some(lead), Some(rm))
    } else {
        (None, None, None)
    };

    Ok(TransitionAnalysis {
        nu,
        kappa,
        delta,
        discriminant: disc,
        exists_tangent,
        case,
        b,
        leading,
        reduced_matrix: reduced,
    })
}

/// Decide whether `d theta` lies in the span of the `d phi_j` at the base
/// point (least-squares residual cutoff 1e-7 relative).
pub fn dependence_case(sys: &SymbolSystem) -> Result<DependenceCase> {
    let rho = sys.base_point.normalized();
    let n = sys.n;
    let theta = sys.theta_expr();
    let dim = 2 * (n + 1);
    let grad = |f: &Expr| -> Result<Vec<f64>> {
        let mut g = vec![0.0; dim];
        for i in 0..=n {
            g[i] = f.diff(Var::X(i)).eval(&rho)?;
            g[n + 1 + i] = f.diff(Var::Xi(i)).eval(&rho)?;
        }
        Ok(g)
    };
    let gt = grad(&theta)?;
    let gnorm = linalg::norm(&gt);
    if gnorm < 1e-12 {
        return Ok(DependenceCase::Dependent);
    }
    let mut cols = Vec::new();
    for phi in &sys.phis {
        cols.push(grad(phi)?);
    }
    let mut a = Mat::zeros(dim, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for i in 0..dim {
            a[(i, j)] = c[i];
        }
    }
    let coeffs = linalg::least_squares(&a, &gt);
    let fit = a.matvec(&coeffs);
    let resid: f64 = gt
        .iter()
        .zip(&fit)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(if resid <= 1e-7 * gnorm.max(1.0) {
        DependenceCase::Dependent
    } else {
        DependenceCase::Independent
    })
}

// ---------------------------------------------------------------------------
// Tangency search
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TangentConfig {
    /// Candidate rescaled-time seeds, tried in order until one integrates
    /// cleanly.
    pub seed_candidates: Vec<f64>,
    /// Outer end of the rescaled-time window (integration away from the
    /// base point stops here).
    pub t_outer: f64,
    /// Factor by which the inward leg shrinks the seed time.
    pub inward_factor: f64,
    pub flow: FlowConfig,
}

impl Default for TangentConfig {
    fn default() -> Self {
        TangentConfig {
            seed_candidates: vec![1e-3, 5e-4, 2e-3, 1e-4, 5e-3, 1e-2],
            t_outer: 0.05,
            inward_factor: 3.0,
            flow: FlowConfig::default(),
        }
    }
}

/// Result of the tangency search: the assembled trajectory and the fitted
/// vanishing orders of the defining functions, `theta`, `xi0`, and any
/// extra functions supplied by the caller.
#[derive(Clone, Debug)]
pub struct TangentReport {
    pub trajectory: Trajectory,
    pub seed_time: f64,
    pub orders: Vec<(String, OrderFit)>,
    pub p_drift: f64,
}

/// Seed the characteristic from the leading-order coefficients at a small
/// rescaled time, ride it away from (and briefly toward) the base point,
/// and measure vanishing orders against `x0`.
pub fn tangent_search(
    sys: &SymbolSystem,
    analysis: &TransitionAnalysis,
    extra: &[(String, Expr)],
    cfg: &TangentConfig,
) -> Result<TangentReport> {
    if !analysis.exists_tangent {
        return Err(Error::Precondition(
            "discriminant kappa^2 - 4 nu is not positive; no tangent characteristic predicted"
                .into(),
        ));
    }
    let lead = analysis.leading.as_ref().expect("leading constants exist when tangent exists");
    let compiled = CompiledField::new(sys)?;

    let mut last_err: Option<Error> = None;
    for &t0 in &cfg.seed_candidates {
        match try_seed(sys, &compiled, lead, t0, cfg) {
            Ok(traj) => {
                let orders = measure_orders(sys, &traj, lead, t0, cfg, extra)?;
                let p_drift = traj.p_drift;
                return Ok(TangentReport { trajectory: traj, seed_time: t0, orders, p_drift });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::Seed(format!(
        "no seed candidate produced a clean trajectory; last failure: {}",
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn try_seed(
    sys: &SymbolSystem,
    compiled: &CompiledField,
    lead: &LeadingConstants,
    t0: f64,
    cfg: &TangentConfig,
) -> Result<Trajectory> {
    let seed = seed_point(sys, lead, t0)?;
    let s0 = 1.0 / t0;

    // away from the base point: contaminating modes of the rescaled system
    // decay in this direction, so the long measuring leg goes outward
    let s_outer = 1.0 / cfg.t_outer;
    let mut flow = cfg.flow.clone();
    flow.h_max = (s0 - s_outer).abs() / 600.0;
    let outward = integrate_compiled(compiled, &seed, s0, s_outer - s0, &flow)?;

    // short inward leg toward the base point
    let s_inner = 1.0 / (t0 / cfg.inward_factor);
    flow.h_max = (s_inner - s0).abs() / 150.0;
    let inward = integrate_compiled(compiled, &seed, s0, s_inner - s0, &flow)?;

    // merge, ordered by s ascending (inward has growing s)
    let mut samples = outward.samples;
    samples.reverse();
    samples.extend(inward.samples.into_iter().skip(1));
    let drift = outward.p_drift.max(inward.p_drift);
    Ok(Trajectory {
        param: ParamTag::STime,
        samples,
        p_initial: 0.0,
        p_drift: drift,
    })
}

/// Solve for a phase point matching the leading-order targets at rescaled
/// time `t0` by a minimum-norm Gauss-Newton iteration from the base point.
fn seed_point(sys: &SymbolSystem, lead: &LeadingConstants, t0: f64) -> Result<PhasePoint> {
    let n = sys.n;
    let scaled_phi1 = Expr::mul(&Expr::sqrt(&sys.one_plus_theta()), &sys.phis[0]);
    let mut funcs: Vec<Expr> = vec![Expr::x(0), scaled_phi1.clone()];
    let mut targets: Vec<f64> = vec![lead.x0 * t0, lead.b * t0 * t0];
    if sys.d() >= 2 {
        funcs.push(sys.phis[1].clone());
        targets.push(lead.phi2 * t0 * t0 * t0);
    }
    for j in 2..sys.d() {
        funcs.push(sys.phis[j].clone());
        targets.push(0.0);
    }
    funcs.push(Expr::sub(&Expr::xi(0), &scaled_phi1));
    targets.push(lead.xi0 * t0 * t0 * t0 * t0);

    let mut z = sys.base_point.normalized();
    for _ in 0..80 {
        let res: Vec<f64> = funcs
            .iter()
            .zip(&targets)
            .map(|(f, t)| f.eval(&z).map(|v| v - t))
            .collect::<Result<_>>()?;
        if linalg::norm(&res) <= 1e-14 * (1.0 + linalg::norm(&targets)) {
            break;
        }
        let dim = 2 * (n + 1);
        let mut jac = Mat::zeros(funcs.len(), dim);
        for (i, f) in funcs.iter().enumerate() {
            for v in 0..=n {
                jac[(i, v)] = f.diff(Var::X(v)).eval(&z)?;
                jac[(i, n + 1 + v)] = f.diff(Var::Xi(v)).eval(&z)?;
            }
        }
        let jjt = jac.matmul(&jac.transpose());
        let y = linalg::solve(&jjt, &res)
            .map_err(|_| Error::Seed("seeding Jacobian is rank-deficient".into()))?;
        let step = jac.transpose().matvec(&y);
        let state = z.to_state();
        let new_state: Vec<f64> = state.iter().zip(&step).map(|(a, b)| a - b).collect();
        z = PhasePoint::from_state(&new_state);
    }
    let res: Vec<f64> = funcs
        .iter()
        .zip(&targets)
        .map(|(f, t)| f.eval(&z).map(|v| v - t))
        .collect::<Result<_>>()?;
    if linalg::norm(&res) > 1e-12 * (1.0 + linalg::norm(&targets)) {
        return Err(Error::Seed(format!(
            "seed constraints unresolved, residual {:.3e}",
            linalg::norm(&res)
        )));
    }
    Ok(z)
}

fn measure_orders(
    sys: &SymbolSystem,
    traj: &Trajectory,
    lead: &LeadingConstants,
    t0: f64,
    cfg: &TangentConfig,
    extra: &[(String, Expr)],
) -> Result<Vec<(String, OrderFit)>> {
    // fit window in |x0|, inside the outward leg away from both ends
    let x0_scale = lead.x0.abs();
    let lo = x0_scale * t0 * 1.5;
    let hi = x0_scale * cfg.t_outer / 1.5;
    let mut orders = Vec::new();
    for (j, phi) in sys.phis.iter().enumerate() {
        let fit = vanishing_order(traj, phi, (lo, hi), Some(1 + j as i32 + 1))?;
        orders.push((format!("phi{}", j + 1), fit));
    }
    let theta = sys.theta_expr();
    if sys.theta.is_some() {
        let fit = vanishing_order(traj, &theta, (lo, hi), Some(2))?;
        orders.push(("theta".into(), fit));
    }
    let fit = vanishing_order(traj, &Expr::xi(0), (lo, hi), Some(2))?;
    orders.push(("xi0".into(), fit));
    for (name, f) in extra {
        let fit = vanishing_order(traj, f, (lo, hi), None)?;
        orders.push((name.clone(), fit));
    }
    Ok(orders)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use crate::expr::parse;
    use std::collections::BTreeMap;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn straight_line_flow() {
        // p = -xi0^2 + xi1^2 on n = 2: x0(s) = -2s, p conserved exactly
        let phi1 = parse("xi1", &no_params()).unwrap();
        let base = PhasePoint::new(vec![0.0; 3], vec![0.0, 0.0, 1.0]).unwrap();
        let sys = SymbolSystem::new(2, vec![phi1], None, None, base, None, "plane").unwrap();
        let rho0 = PhasePoint::new(vec![0.0; 3], vec![1.0, 1.0, 1.0]).unwrap();
        let traj = integrate(&sys, &rho0, 0.5, &FlowConfig::default()).unwrap();
        let end = traj.last_point();
        assert!((end.x[0] + 1.0).abs() < 1e-9, "x0 = {}", end.x[0]);
        assert!((end.x[1] - 1.0).abs() < 1e-9);
        assert!(traj.p_drift < 1e-12);
    }

    #[test]
    fn harmonic_block_period() {
        // p = -xi0^2 + x1^2 + xi1^2: the (x1, xi1) block rotates with
        // period pi in s (2 pi in the doubled time)
        let phi1 = parse("x1", &no_params()).unwrap();
        let phi2 = parse("xi1", &no_params()).unwrap();
        let base = PhasePoint::new(vec![0.0; 3], vec![0.0, 0.0, 1.0]).unwrap();
        let sys = SymbolSystem::new(2, vec![phi1, phi2], None, None, base, None, "osc").unwrap();
        let rho0 = PhasePoint::new(vec![0.0, 0.3, 0.0], vec![0.5, 0.4, 1.0]).unwrap();
        let traj = integrate(&sys, &rho0, std::f64::consts::PI, &FlowConfig::default()).unwrap();
        let end = traj.last_point();
        assert!((end.x[1] - rho0.x[1]).abs() < 1e-8, "x1 = {}", end.x[1]);
        assert!((end.xi[1] - rho0.xi[1]).abs() < 1e-8);
    }

    #[test]
    fn time_reversal_roundtrip() {
        let sys = builtins::model3(1, None).unwrap();
        let rho0 = {
            // characteristic data: xi0 = sqrt(sum of squares part)
            let p = PhasePoint::new(vec![0.05, 0.08, 0.0, 0.0], vec![0.0, 0.1, 0.0, 1.0]).unwrap();
            let rest: f64 = sys
                .principal_symbol()
                .eval(&p)
                .unwrap()
                + p.xi[0] * p.xi[0];
            let mut xi = p.xi.clone();
            xi[0] = rest.max(0.0).sqrt();
            PhasePoint::new(p.x.clone(), xi).unwrap()
        };
        let cfg = FlowConfig::default();
        let fwd = integrate(&sys, &rho0, 0.4, &cfg).unwrap();
        let back = integrate(&sys, fwd.last_point(), -0.4, &cfg).unwrap();
        let dist = back.last_point().dist(&rho0);
        assert!(dist < 1e-7, "roundtrip error {dist}");
        assert!(fwd.p_drift < 1e-9 * (1.0 + fwd.p_initial.abs()));
    }

    #[test]
    fn vanishing_order_of_x0_itself() {
        let phi1 = parse("xi1", &no_params()).unwrap();
        let base = PhasePoint::new(vec![0.0; 3], vec![0.0, 0.0, 1.0]).unwrap();
        let sys = SymbolSystem::new(2, vec![phi1], None, None, base, None, "plane").unwrap();
        let rho0 = PhasePoint::new(vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]).unwrap();
        // x0(s) = 1 - 2s crosses zero at s = 1/2; stop before it
        let cfg = FlowConfig { h_max: 2e-3, ..FlowConfig::default() };
        let traj = integrate(&sys, &rho0, 0.49, &cfg).unwrap();
        let fit = vanishing_order(&traj, &Expr::x(0), (0.03, 0.9), None).unwrap();
        assert!((fit.order - 1.0).abs() < 0.05, "order {}", fit.order);
    }

    #[test]
    fn b_roots_cases() {
        // linear case
        let r = b_roots(1.0, 0.0, 1.0).unwrap();
        assert_eq!(r.roots, vec![1.0]);
        assert_eq!(r.selected, 1.0);
        // quadratic with selection: nu=3, kappa=4, delta=1 -> roots 1/3, 1
        let r = b_roots(4.0, 3.0, 1.0).unwrap();
        assert!((r.roots[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.roots[1] - 1.0).abs() < 1e-12);
        assert!((r.selected - 1.0 / 3.0).abs() < 1e-12);
        // no real root
        assert!(matches!(b_roots(1.0, 0.5, 1.0), Err(Error::NoRealRoot(_))));
        // kappa = nu = 0
        assert!(matches!(b_roots(0.0, 0.0, 2.0), Err(Error::NoRealRoot(_))));
    }

    #[test]
    fn leading_constants_satisfy_stationary_equations() {
        let (kappa, nu, delta) = (1.0, 0.0, 1.0);
        let b = b_roots(kappa, nu, delta).unwrap().selected;
        let lead = LeadingConstants::from_root(b, kappa, nu, delta);
        assert_eq!(lead.x0, 2.0);
        assert_eq!(lead.phi2, 1.0);
        assert_eq!(lead.theta, 0.0);
        assert_eq!(lead.xi0, 0.5);
        assert!(lead.residual(kappa, nu, delta) < 1e-12);

        // dependent-case theta value agrees: -nu x0^2/4 = -nu b^2
        let (kappa, nu, delta) = (4.0, 3.0, 1.0);
        let b = b_roots(kappa, nu, delta).unwrap().selected;
        let lead = LeadingConstants::from_root(b, kappa, nu, delta);
        assert!((lead.theta - (-nu * lead.x0 * lead.x0 / 4.0)).abs() < 1e-12);
        assert!(lead.residual(kappa, nu, delta) < 1e-12);
    }

    #[test]
    fn reduced_matrix_spot_spectrum() {
        // dependent case with kappa delta b = 1, nu = 0: spectrum {1,-1,-4,-6}
        let (kappa, nu, delta) = (1.0, 0.0, 1.0);
        let b = 1.0;
        let rep = reduced_matrix(kappa, nu, delta, b, DependenceCase::Dependent).unwrap();
        let mut reals: Vec<f64> = rep.spectrum.iter().map(|l| l.re).collect();
        reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [-6.0, -4.0, -1.0, 1.0];
        for (got, want) in reals.iter().zip(want) {
            assert!((got - want).abs() < 1e-8, "{reals:?}");
        }
        assert!(rep.charpoly_residual < 1e-12);
        assert!(rep.spectral_gap_ok);

        // independent case gains the extra -2
        let rep = reduced_matrix(kappa, nu, delta, b, DependenceCase::Independent).unwrap();
        let mut reals: Vec<f64> = rep.spectrum.iter().map(|l| l.re).collect();
        reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [-6.0, -4.0, -2.0, -1.0, 1.0];
        for (got, want) in reals.iter().zip(want) {
            assert!((got - want).abs() < 1e-8, "{reals:?}");
        }
        assert!(rep.spectral_gap_ok);
    }

    #[test]
    fn reduced_matrix_rejects_non_root() {
        let err = reduced_matrix(1.0, 0.0, 1.0, 0.7, DependenceCase::Dependent).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn transition_invariants_tangent_example() {
        // kappa = 1, nu = 0 at the base point; tangent predicted
        let sys = builtins::model3(1, None).unwrap();
        let ta = transition_invariants(&sys).unwrap();
        assert!((ta.kappa - 1.0).abs() < 1e-10, "kappa = {}", ta.kappa);
        assert!(ta.nu.abs() < 1e-12, "nu = {}", ta.nu);
        assert!((ta.delta + 1.0).abs() < 1e-10, "delta = {}", ta.delta);
        assert!((ta.discriminant - 1.0).abs() < 1e-10);
        assert!(ta.exists_tangent);
        assert_eq!(ta.case, DependenceCase::Dependent);
        let lead = ta.leading.unwrap();
        assert!((lead.b + 1.0).abs() < 1e-10);
        assert!((lead.x0 + 2.0).abs() < 1e-10);
        // kappa delta b = 1: spot spectrum {1,-1,-4,-6}
        let rm = ta.reduced_matrix.unwrap();
        assert!(rm.spectral_gap_ok);
        assert!(rm.charpoly_residual < 1e-10);
    }

    #[test]
    fn transition_invariants_nu_from_second_derivative() {
        // nu(x) = c x0^2 gives nu-invariant 2c (second x0-derivative of nu)
        let nu = parse("0.1*x0^2", &no_params()).unwrap();
        let sys = builtins::model3(1, Some(nu)).unwrap();
        let ta = transition_invariants(&sys).unwrap();
        assert!((ta.nu - 0.2).abs() < 1e-10, "nu = {}", ta.nu);
        assert!((ta.kappa - 1.0).abs() < 1e-10);
        // discriminant 1 - 0.8 > 0: still tangent
        assert!(ta.exists_tangent);
    }

    #[test]
    fn transition_invariants_x2_nu_is_zero() {
        // theta term x2^2 is independent of x0: nu invariant vanishes
        let nu = parse("x2^2", &no_params()).unwrap();
        let sys = builtins::model3(2, Some(nu)).unwrap();
        let ta = transition_invariants(&sys).unwrap();
        assert!(ta.nu.abs() < 1e-12);
        // kappa vanishes for k = 2 at the base point
        assert!(ta.kappa.abs() < 1e-12);
        assert!(!ta.exists_tangent);
    }

    #[test]
    fn tangent_search_measures_orders() {
        let sys = builtins::model3(1, None).unwrap();
        let ta = transition_invariants(&sys).unwrap();
        let report = tangent_search(&sys, &ta, &[], &TangentConfig::default()).unwrap();
        let get = |name: &str| {
            report
                .orders
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, f)| f.order)
                .unwrap()
        };
        let o1 = get("phi1");
        let o2 = get("phi2");
        let ot = get("theta");
        let ox = get("xi0");
        assert!((o1 - 2.0).abs() <= 0.15, "phi1 order {o1}");
        assert!((o2 - 3.0).abs() <= 0.15, "phi2 order {o2}");
        assert!(ot >= 2.0 - 0.15, "theta order {ot}");
        assert!(ox >= 2.0 - 0.15, "xi0 order {ox}");
        assert!(report.p_drift <= 1e-9);
    }

    #[test]
    fn tangent_search_rejected_without_discriminant() {
        let nu = parse("x2^2", &no_params()).unwrap();
        let sys = builtins::model3(2, Some(nu)).unwrap();
        let ta = transition_invariants(&sys).unwrap();
        let err = tangent_search(&sys, &ta, &[], &TangentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn transversal_crossing_has_order_one() {
        // a generic characteristic crosses Sigma transversally: the defining
        // functions vanish to first order in x0 - x0*
        let sys = builtins::model1(None).unwrap();
        // start on the characteristic cone off Sigma; with xi1 < 0 the
        // crossing slope d phi2/ds = 2 xi2 (xi1 - xi0) is safely nonzero
        let x = vec![0.1, 0.0, 0.0];
        let xi = {
            let p = PhasePoint::new(x.clone(), vec![0.0, -0.4, 1.0]).unwrap();
            let rest = sys.principal_symbol().eval(&p).unwrap() + p.xi[0] * p.xi[0];
            vec![rest.sqrt(), -0.4, 1.0]
        };
        let rho0 = PhasePoint::new(x, xi).unwrap();
        let cfg = FlowConfig { h_max: 1e-3, ..FlowConfig::default() };
        let traj = integrate(&sys, &rho0, 0.3, &cfg).unwrap();
        // find the crossing of phi2 = (x0+x1) xi2 and fit against it
        let phi2 = &sys.phis[1];
        let mut crossing = None;
        for w in traj.samples.windows(2) {
            let a = phi2.eval(&w[0].point).unwrap();
            let b = phi2.eval(&w[1].point).unwrap();
            if a.signum() != b.signum() {
                crossing = Some((w[0].point.x[0], a, w[1].point.x[0], b));
                break;
            }
        }
        let (xa, fa, xb, fb) = crossing.expect("characteristic crosses the manifold");
        // linear interpolation of the crossing location
        let xstar = xa - fa * (xb - xa) / (fb - fa);
        let mut pairs = Vec::new();
        for s in &traj.samples {
            let h = (s.point.x[0] - xstar).abs();
            if h > 1e-4 && h < 0.05 {
                pairs.push((h, phi2.eval(&s.point).unwrap().abs()));
            }
        }
        let slope = linalg::log_log_slope(&pairs).unwrap();
        assert!((slope - 1.0).abs() < 0.15, "transversal order {slope}");
    }

    #[test]
    fn csv_export_shape() {
        let sys = builtins::model1(None).unwrap();
        let rho0 = PhasePoint::new(vec![0.1, 0.0, 0.0], vec![0.3, 0.2, 1.0]).unwrap();
        let traj = integrate(&sys, &rho0, 0.1, &FlowConfig::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&sys, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "s,t,x0,x1,x2,xi0,xi1,xi2,p,phi1,phi2,theta"
        );
        assert!(lines.count() == traj.samples.len());
    }
}
