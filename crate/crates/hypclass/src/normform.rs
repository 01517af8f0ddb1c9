//! Normal-form machinery: certificate checks for the bracket conditions, the
//! pointwise orthogonal reduction that produces a normal frame and `theta`
//! at a single point, the `(1+nu)` rescaling of the first defining function,
//! and verification of candidate extensions `theta~`.

use crate::error::{Error, Result};
use crate::expr::{poisson, Expr, PhasePoint};
use crate::linalg::{self, ColPivQr, Mat};
use crate::spectral::{bracket_table, theta_from_table, SymbolSystem};

/// Default residual tolerance for "vanishes on Sigma'" checks, relative to
/// the local bracket scale.
pub const NF_TOL: f64 = 1e-8;
/// Default nondegeneracy floor for the pair bracket and the tail block.
pub const NF_FLOOR: f64 = 1e-6;

/// Residual suprema of the normal-form bracket conditions over sampled
/// Sigma' points, plus the nondegeneracy values at the base point.
#[derive(Clone, Debug)]
pub struct NormalFormCertificate {
    /// sup |{phi_i, phi_j}| over i <= d, j >= r+1 (kernel group).
    pub kernel_bracket_sup: f64,
    /// sup |{xi0 - phi_1, phi_j}| over 0 <= j <= d.
    pub central_bracket_sup: f64,
    /// |{phi_1, phi_2}| at the base point.
    pub pair_bracket_at_base: f64,
    /// sup |{phi_2, phi_j}| over 3 <= j <= r.
    pub second_row_bracket_sup: f64,
    /// |det({phi_i, phi_j})_{3..r}| at the base point (1 when empty).
    pub tail_block_det: f64,
    pub rank: usize,
    pub tol: f64,
    pub floor: f64,
    pub verdict: bool,
}

/// Check the normal-form bracket conditions of the raw defining functions
/// on the supplied Sigma' samples.
pub fn verify_normal_form(
    sys: &SymbolSystem,
    samples: &[PhasePoint],
) -> Result<NormalFormCertificate> {
    let d = sys.d();
    let rho0 = sys.base_point.normalized();
    let funcs = sys.phi_raw_full();

    // bracket scale at the base point sets the tolerance
    let mut scale: f64 = 1.0;
    let mut base_brackets = Mat::zeros(d + 1, d + 1);
    for i in 0..=d {
        for j in i + 1..=d {
            let v = poisson(&funcs[i], &funcs[j]).eval(&rho0)?;
            base_brackets[(i, j)] = v;
            base_brackets[(j, i)] = -v;
            scale = scale.max(v.abs());
        }
    }
    let tol = NF_TOL * scale;
    let floor = NF_FLOOR * scale;

    let r = match sys.declared_rank {
        Some(r) => r,
        None => linalg::rank(&base_brackets),
    };
    if r < 2 || r > d {
        return Err(Error::Degenerate(format!(
            "normal-form conditions need 2 <= r <= d, got r = {r}, d = {d}"
        )));
    }

    let projected: Vec<PhasePoint> = samples
        .iter()
        .map(|p| sys.project_to_sigma_prime(p))
        .collect::<Result<_>>()?;

    let central = Expr::sub(&Expr::xi(0), &sys.phis[0]);
    let mut kernel_sup: f64 = 0.0;
    let mut central_sup: f64 = 0.0;
    let mut second_sup: f64 = 0.0;
    for p in projected.iter().chain(std::iter::once(&rho0)) {
        for j in r + 1..=d {
            for i in 0..=d {
                kernel_sup = kernel_sup.max(poisson(&funcs[i], &funcs[j]).eval(p)?.abs());
            }
        }
        for j in 0..=d {
            central_sup = central_sup.max(poisson(&central, &funcs[j]).eval(p)?.abs());
        }
        for j in 3..=r {
            second_sup = second_sup.max(poisson(&funcs[2], &funcs[j]).eval(p)?.abs());
        }
    }

    let pair = base_brackets[(1, 2)].abs();
    let tail_det = if r >= 4 {
        det_block(&base_brackets, 3, r)
    } else {
        1.0
    };

    let verdict = kernel_sup <= tol
        && central_sup <= tol
        && second_sup <= tol
        && pair > floor
        && tail_det.abs() > floor;

    Ok(NormalFormCertificate {
        kernel_bracket_sup: kernel_sup,
        central_bracket_sup: central_sup,
        pair_bracket_at_base: pair,
        second_row_bracket_sup: second_sup,
        tail_block_det: tail_det.abs(),
        rank: r,
        tol,
        floor,
        verdict,
    })
}

fn det_block(m: &Mat, lo: usize, hi: usize) -> f64 {
    let k = hi + 1 - lo;
    let mut b = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            b[(i, j)] = m[(lo + i, lo + j)];
        }
    }
    linalg::det(&b)
}

// ---------------------------------------------------------------------------
// Rescaling of phi_1
// ---------------------------------------------------------------------------

/// Rescale `phi_1 -> (1+nu) phi_1` and return the pair
/// `(1+nu, (theta - nu^2 - 2 nu)/(1+nu)^2)`; the second component replaces
/// `theta` so the symbol is unchanged.
pub fn rescale_first_function(theta: &Expr, nu: &Expr) -> (Expr, Expr) {
    let one = Expr::one();
    let scale = Expr::add(&one, nu);
    let num = Expr::sub(
        theta,
        &Expr::add(&Expr::pow(nu, 2), &Expr::mul(&Expr::constant(2.0), nu)),
    );
    let theta_new = Expr::div(&num, &Expr::pow(&scale, 2));
    (scale, theta_new)
}

/// Pointwise residual of the rescaling identity
/// `-(xi0+phi)(xi0-phi) + theta phi^2 = -(xi0+s phi)(xi0-s phi) + theta_new (s phi)^2`
/// over the given samples. Errors where `1 + nu` vanishes.
pub fn rescale_identity_residual(
    theta: &Expr,
    nu: &Expr,
    phi1: &Expr,
    samples: &[PhasePoint],
) -> Result<f64> {
    let (scale, theta_new) = rescale_first_function(theta, nu);
    let xi0 = Expr::xi(0);
    let lhs = quad_form(&xi0, phi1, theta);
    let scaled = Expr::mul(&scale, phi1);
    let rhs = quad_form(&xi0, &scaled, &theta_new);
    let mut sup: f64 = 0.0;
    for p in samples {
        let sv = scale.eval(p)?;
        if sv.abs() < 1e-12 {
            return Err(Error::Domain("1 + nu vanishes in the sample region".into()));
        }
        let a = lhs.eval(p)?;
        let b = rhs.eval(p)?;
        sup = sup.max((a - b).abs() / (1.0 + a.abs()));
    }
    Ok(sup)
}

fn quad_form(xi0: &Expr, phi: &Expr, theta: &Expr) -> Expr {
    let prod = Expr::mul(&Expr::add(xi0, phi), &Expr::sub(xi0, phi));
    Expr::add(&Expr::neg(&prod), &Expr::mul(theta, &Expr::pow(phi, 2)))
}

/// Value of the coefficient left in the bracket relations after
/// `sqrt(1+theta)` is absorbed into the first defining function:
/// `-theta / (sqrt(1+theta) + 1 + theta)`. Sign-reversing, fixes 0.
pub fn theta_absorbed(theta: f64) -> Result<f64> {
    if 1.0 + theta <= 0.0 {
        return Err(Error::Domain(format!("1 + theta = {} <= 0", 1.0 + theta)));
    }
    Ok(-theta / ((1.0 + theta).sqrt() + 1.0 + theta))
}

// ---------------------------------------------------------------------------
// Pointwise normal form
// ---------------------------------------------------------------------------

/// Orthogonal frame at a single point realizing the normal-form bracket
/// pattern. Rows of `rotation` express the new functions in terms of the
/// plain-form functions; the first new function additionally carries the
/// scale `phi1_scale`.
#[derive(Clone, Debug)]
pub struct PointwiseFrame {
    /// Orthonormal d x d matrix; row j holds the coefficients of the j-th
    /// transformed function over the plain-form functions.
    pub rotation: Mat,
    /// Scale applied to the first row to produce the normal-form `phi_1`.
    pub phi1_scale: f64,
    /// Solution of the reduced bracket system on the active subspace.
    pub alpha: Vec<f64>,
    /// Transition invariant at the point.
    pub theta0: f64,
    /// Realized bracket residuals at the point, for the record:
    /// (central sup over all j, second-row sup over 2..r).
    pub residuals: (f64, f64),
    /// |{phi~_1, phi~_2}| at the point.
    pub pair_bracket: f64,
    /// |det({phi~_i, phi~_j})_{3..r}| at the point (1 when empty).
    pub tail_block_det: f64,
    pub rank: usize,
}

impl PointwiseFrame {
    /// Transformed functions (orthonormal rows applied to the plain-form
    /// functions); sums of squares agree with the originals pointwise.
    pub fn transformed_functions(&self, sys: &SymbolSystem) -> Vec<Expr> {
        let hat = sys.phi_hat();
        let d = hat.len();
        (0..d)
            .map(|i| {
                let mut acc = Expr::zero();
                for (k, phi) in hat.iter().enumerate() {
                    let c = self.rotation[(i, k)];
                    if c != 0.0 {
                        acc = Expr::add(&acc, &Expr::mul(&Expr::constant(c), phi));
                    }
                }
                acc
            })
            .collect()
    }

    /// Max relative mismatch of `sum phi~_j^2` against `sum phi_j^2` over
    /// the samples.
    pub fn congruence_residual(
        &self,
        sys: &SymbolSystem,
        samples: &[PhasePoint],
    ) -> Result<f64> {
        let hat = sys.phi_hat();
        let new = self.transformed_functions(sys);
        let mut sup: f64 = 0.0;
        for p in samples {
            let mut orig = 0.0;
            for phi in &hat {
                orig += phi.eval(p)?.powi(2);
            }
            let mut transformed = 0.0;
            for phi in &new {
                transformed += phi.eval(p)?.powi(2);
            }
            sup = sup.max((orig - transformed).abs() / (1.0 + orig.abs()));
        }
        Ok(sup)
    }
}

/// Carry out the orthogonal reduction at a single point: split off the
/// kernel directions, solve the reduced system for `alpha`, align the first
/// row with the central combination, then rotate the second row onto the
/// kernel of the remaining bracket block.
pub fn pointwise_normal_form(sys: &SymbolSystem, rho: &PhasePoint) -> Result<PointwiseFrame> {
    let rho = rho.normalized();
    let d = sys.d();
    let table = bracket_table(sys, &rho).map_err(|e| match e {
        Error::Degenerate(msg) => Error::NotTransitionPoint(msg),
        other => other,
    })?;
    let r = table.r;
    let b = table.a_full.submatrix(1, d + 1, 1, d + 1);

    // active orthonormal basis: complement of the kernel part
    let kdim = table.kernel_part.cols();
    let mut ext = Mat::zeros(d, kdim + d);
    for c in 0..kdim {
        for i in 0..d {
            ext[(i, c)] = table.kernel_part[(i, c)];
        }
    }
    for j in 0..d {
        ext[(j, kdim + j)] = 1.0;
    }
    let full = linalg::orthonormalize_columns(&ext);
    let active = full.submatrix(0, d, kdim, full.cols());

    let alpha = table.alpha.clone();
    let alpha_norm = table.alpha_norm;
    if alpha_norm < 1e-12 {
        return Err(Error::Degenerate("alpha vanishes; xi0 decouples at the point".into()));
    }

    // first row: -U alpha / |alpha|
    let mut row1 = vec![0.0; d];
    for (j, aj) in alpha.iter().enumerate() {
        for i in 0..d {
            row1[i] -= active[(i, j)] * aj;
        }
    }
    for v in &mut row1 {
        *v /= alpha_norm;
    }

    // completion of row1 inside the active subspace
    let mut with_row1 = Mat::zeros(d, 1 + r);
    for i in 0..d {
        with_row1[(i, 0)] = row1[i];
    }
    for j in 0..r {
        for i in 0..d {
            with_row1[(i, 1 + j)] = active[(i, j)];
        }
    }
    let spanned = linalg::orthonormalize_columns(&with_row1);
    if spanned.cols() != r {
        return Err(Error::Degenerate("active completion lost rank".into()));
    }
    let tail = spanned.submatrix(0, d, 1, r); // d x (r-1), rows 2..r candidates

    // bracket block among the tail candidates; its kernel gives the second row
    let mut a2 = Mat::zeros(r - 1, r - 1);
    for i in 0..r - 1 {
        let bi = b.matvec(&tail.col(i));
        for j in 0..r - 1 {
            a2[(i, j)] = linalg::dot(&tail.col(j), &bi);
        }
    }
    // note a2[(i, j)] = <t_j, B t_i> = {t_i, t_j} transposed; skew either way
    let qr2 = ColPivQr::new(&a2);
    let r2 = qr2.rank(linalg::RANK_TOL);
    if r - 1 - r2 != 1 {
        return Err(Error::NotTransitionPoint(format!(
            "bracket block of the complement has kernel dimension {}, expected 1",
            r - 1 - r2
        )));
    }
    let beta = qr2.kernel(r2).col(0);

    // second row: tail * beta
    let mut row2 = vec![0.0; d];
    for (k, bk) in beta.iter().enumerate() {
        for i in 0..d {
            row2[i] += tail[(i, k)] * bk;
        }
    }

    // complete rows 3..r orthonormally inside the tail span
    let mut rows_rest = Mat::zeros(d, 1 + (r - 1));
    for i in 0..d {
        rows_rest[(i, 0)] = row2[i];
    }
    for j in 0..r - 1 {
        for i in 0..d {
            rows_rest[(i, 1 + j)] = tail[(i, j)];
        }
    }
    let rest = linalg::orthonormalize_columns(&rows_rest);
    if rest.cols() != r - 1 {
        return Err(Error::Degenerate("tail completion lost rank".into()));
    }

    // assemble the rotation: row1, row2, rows 3..r, kernel rows
    let mut rotation = Mat::zeros(d, d);
    for i in 0..d {
        rotation[(0, i)] = row1[i];
    }
    for j in 0..r - 1 {
        for i in 0..d {
            rotation[(j + 1, i)] = rest[(i, j)];
        }
    }
    for c in 0..kdim {
        for i in 0..d {
            rotation[(r + c, i)] = table.kernel_part[(i, c)];
        }
    }

    // realized brackets at the point
    let bracket_of = |u: &[f64], w: &[f64]| -> f64 {
        let bw = b.matvec(w);
        linalg::dot(u, &bw)
    };
    let a_hat: Vec<f64> = (1..=d).map(|j| table.a_full[(0, j)]).collect();
    let row = |j: usize| -> Vec<f64> { (0..d).map(|i| rotation[(j, i)]).collect() };

    // central combination xi0 + sum (U alpha)_i phi_i = xi0 - |alpha| phi~_1
    let mut central_sup: f64 = 0.0;
    for j in 0..d {
        let rj = row(j);
        // {xi0 - |a| phi~_1, phi~_j} = <a_hat, r_j> - |a| {phi~_1, phi~_j}
        let v = linalg::dot(&a_hat, &rj) - alpha_norm * bracket_of(&row(0), &rj);
        central_sup = central_sup.max(v.abs());
    }
    let mut second_sup: f64 = 0.0;
    for j in 1..r {
        second_sup = second_sup.max(bracket_of(&row(1), &row(j)).abs());
    }
    let pair = bracket_of(&row(0), &row(1)).abs();
    let tail_det = if r >= 4 {
        let mut blk = Mat::zeros(r - 2, r - 2);
        for i in 0..r - 2 {
            for j in 0..r - 2 {
                blk[(i, j)] = bracket_of(&row(2 + i), &row(2 + j));
            }
        }
        linalg::det(&blk).abs()
    } else {
        1.0
    };
    let scale: f64 = 1.0f64.max(table.a_full.norm_max());
    if pair <= NF_FLOOR * scale {
        return Err(Error::Degenerate(format!(
            "pair bracket {pair:.3e} below the nondegeneracy floor"
        )));
    }
    if tail_det <= NF_FLOOR * scale {
        return Err(Error::Degenerate(format!(
            "tail block determinant {tail_det:.3e} below the nondegeneracy floor"
        )));
    }

    Ok(PointwiseFrame {
        rotation,
        phi1_scale: alpha_norm,
        alpha,
        theta0: theta_from_table(&table),
        residuals: (central_sup, second_sup),
        pair_bracket: pair,
        tail_block_det: tail_det,
        rank: r,
    })
}

// ---------------------------------------------------------------------------
// Extension verification
// ---------------------------------------------------------------------------

/// Residual report of the extension conditions for a candidate `theta~`.
#[derive(Clone, Debug)]
pub struct ExtensionReport {
    /// Fitted constants (c1, c2) of `{phi_1, theta~} = c1 phi_1 + c2 phi_2`.
    pub c_first: (f64, f64),
    /// Residual sup of the first fit over the samples.
    pub first_residual: f64,
    /// Fitted constant c3 of `{phi_2, theta~} = c3 phi_2`.
    pub c_second: f64,
    /// Residual sup of the second fit.
    pub second_residual: f64,
    /// sup |{phi_j, theta~}| on Sigma' samples, 3 <= j <= r.
    pub tail_residual: f64,
    /// sup |theta~ - theta| on Sigma' samples.
    pub agreement_residual: f64,
    /// Range check: theta~ stays within [inf theta, sup theta] on Sigma'
    /// extended by the tolerance.
    pub range_ok: bool,
    pub theta_range: (f64, f64),
    pub theta_tilde_range: (f64, f64),
}

/// Fit the extension conditions over full-neighborhood samples; Sigma'
/// residuals are evaluated on the projections of the same samples.
pub fn extension_check(
    sys: &SymbolSystem,
    theta_tilde: &Expr,
    samples: &[PhasePoint],
) -> Result<ExtensionReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("extension check needs at least one sample".into()));
    }
    let d = sys.d();
    let b1 = poisson(&sys.phis[0], theta_tilde);
    let phi1 = &sys.phis[0];
    let phi2 = if d >= 2 { Some(&sys.phis[1]) } else { None };

    // least-squares fit {phi_1, theta~} = c1 phi_1 + c2 phi_2
    let mut rows = Vec::with_capacity(samples.len());
    let mut rhs = Vec::with_capacity(samples.len());
    for p in samples {
        let mut row = vec![phi1.eval(p)?];
        if let Some(p2) = phi2 {
            row.push(p2.eval(p)?);
        }
        rows.push(row);
        rhs.push(b1.eval(p)?);
    }
    let a = Mat::from_rows(&rows);
    let c = linalg::least_squares(&a, &rhs);
    let c_first = (c[0], if c.len() > 1 { c[1] } else { 0.0 });
    let mut first_residual: f64 = 0.0;
    for (row, b) in rows.iter().zip(&rhs) {
        let fit: f64 = row.iter().zip(&c).map(|(x, y)| x * y).sum();
        first_residual = first_residual.max((b - fit).abs());
    }

    // {phi_2, theta~} = c3 phi_2
    let (c_second, second_residual) = if let Some(p2) = phi2 {
        let b2 = poisson(p2, theta_tilde);
        let mut num = 0.0;
        let mut den = 0.0;
        let mut vals = Vec::with_capacity(samples.len());
        for p in samples {
            let x = p2.eval(p)?;
            let y = b2.eval(p)?;
            num += x * y;
            den += x * x;
            vals.push((x, y));
        }
        let c3 = if den > 1e-300 { num / den } else { 0.0 };
        let res = vals
            .iter()
            .map(|(x, y)| (y - c3 * x).abs())
            .fold(0.0f64, f64::max);
        (c3, res)
    } else {
        (0.0, 0.0)
    };

    // Sigma' residuals for the remaining active rows and the agreement check
    let rank = match sys.declared_rank {
        Some(r) => r,
        None => bracket_table(sys, &sys.base_point.clone())?.r,
    };
    let theta_expr = sys.theta_expr();
    let mut tail_residual: f64 = 0.0;
    let mut agreement: f64 = 0.0;
    let mut th_lo = f64::INFINITY;
    let mut th_hi = f64::NEG_INFINITY;
    for p in samples {
        let q = sys.project_to_sigma_prime(p)?;
        for j in 2..rank.min(d) {
            tail_residual = tail_residual.max(poisson(&sys.phis[j], theta_tilde).eval(&q)?.abs());
        }
        let tv = theta_expr.eval(&q)?;
        th_lo = th_lo.min(tv);
        th_hi = th_hi.max(tv);
        agreement = agreement.max((theta_tilde.eval(&q)? - tv).abs());
    }
    let mut tt_lo = f64::INFINITY;
    let mut tt_hi = f64::NEG_INFINITY;
    for p in samples {
        let v = theta_tilde.eval(p)?;
        tt_lo = tt_lo.min(v);
        tt_hi = tt_hi.max(v);
    }
    let slack = 1e-9 * (1.0 + th_hi.abs().max(th_lo.abs()));
    let range_ok = tt_lo >= th_lo - slack && tt_hi <= th_hi + slack;

    Ok(ExtensionReport {
        c_first,
        first_residual,
        c_second,
        second_residual,
        tail_residual,
        agreement_residual: agreement,
        range_ok,
        theta_range: (th_lo, th_hi),
        theta_tilde_range: (tt_lo, tt_hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use crate::expr::parse;
    use crate::rng::Rng;
    use std::collections::BTreeMap;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn box_samples(sys: &SymbolSystem, count: usize, h: f64, seed: u64) -> Vec<PhasePoint> {
        let mut rng = Rng::new(seed);
        let rho0 = sys.base_point.normalized();
        (0..count)
            .map(|_| {
                let x = rho0.x.iter().map(|v| v + rng.range(-h, h)).collect();
                let xi = rho0.xi.iter().map(|v| v + rng.range(-h, h)).collect();
                PhasePoint::new(x, xi).unwrap()
            })
            .collect()
    }

    #[test]
    fn model1_certificate_true() {
        let sys = builtins::model1(Some(parse("x2", &no_params()).unwrap())).unwrap();
        let samples = box_samples(&sys, 30, 0.1, 1);
        let cert = verify_normal_form(&sys, &samples).unwrap();
        assert!(cert.verdict, "{cert:?}");
        assert!(cert.central_bracket_sup <= cert.tol);
        assert!((cert.pair_bracket_at_base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model2_normal_frame_certificate_true() {
        for k in [1u32, 2, 3] {
            let sys = builtins::model2_normal_form(k).unwrap();
            let samples = box_samples(&sys, 25, 0.08, 2);
            let cert = verify_normal_form(&sys, &samples).unwrap();
            assert!(cert.verdict, "k={k}: {cert:?}");
        }
    }

    #[test]
    fn broken_pair_bracket_fails() {
        // replace phi_2 by x1 xi2: {xi0 - xi1, x1 xi2} = -xi2 does not vanish
        let phi1 = parse("xi1", &no_params()).unwrap();
        let phi2 = parse("x1*xi2", &no_params()).unwrap();
        let base = PhasePoint::new(vec![0.0; 3], vec![0.0, 0.0, 1.0]).unwrap();
        let sys = crate::spectral::SymbolSystem::new(
            2,
            vec![phi1, phi2],
            None,
            None,
            base,
            Some(2),
            "broken",
        )
        .unwrap();
        let samples = box_samples(&sys, 20, 0.1, 3);
        let cert = verify_normal_form(&sys, &samples).unwrap();
        assert!(!cert.verdict);
        assert!(cert.central_bracket_sup > cert.tol);
    }

    #[test]
    fn rescale_identities() {
        let theta = parse("x2", &no_params()).unwrap();
        // nu = 0: theta unchanged
        let (scale, t0) = rescale_first_function(&theta, &Expr::zero());
        let p = PhasePoint::new(vec![0.1, 0.2, 0.3], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(scale.eval(&p).unwrap(), 1.0);
        assert_eq!(t0.eval(&p).unwrap(), theta.eval(&p).unwrap());

        // theta = nu^2 + 2 nu: rewritten coefficient vanishes
        let nu = parse("x0", &no_params()).unwrap();
        let t = parse("x0^2 + 2*x0", &no_params()).unwrap();
        let (_, tz) = rescale_first_function(&t, &nu);
        assert_eq!(tz.eval(&p).unwrap(), 0.0);

        // pointwise identity on a model symbol
        let sys = builtins::model1(Some(theta.clone())).unwrap();
        let samples = box_samples(&sys, 40, 0.2, 4);
        let resid =
            rescale_identity_residual(&theta, &nu, &sys.phis[0], &samples).unwrap();
        assert!(resid < 1e-12, "residual {resid}");
    }

    #[test]
    fn rescale_remainder_vanishes_to_second_order() {
        // theta = tau + c (x0+x1) with theta vanishing at the base point
        // (tau = 0); choosing 2 nu = c (x0+x1) leaves a remainder of second
        // order along rays into Sigma' = {xi1 = 0, x0+x1 = 0}
        let tau = 0.0;
        let theta = parse("0.8*(x0 + x1)", &no_params()).unwrap();
        let nu = parse("0.4*(x0 + x1)", &no_params()).unwrap();
        let (_, t_new) = rescale_first_function(&theta, &nu);
        let dir = [0.7, 0.3]; // x0, x1 offsets, not tangent to x0+x1=0
        let mut pairs = Vec::new();
        for i in 0..8 {
            let h = 0.1 * 0.5f64.powi(i);
            let p = PhasePoint::new(
                vec![h * dir[0], h * dir[1], 0.0],
                vec![0.0, 0.0, 1.0],
            )
            .unwrap();
            let v = (t_new.eval(&p).unwrap() - tau).abs();
            pairs.push((h * (dir[0] + dir[1]).abs(), v));
        }
        let slope = linalg::log_log_slope(&pairs).unwrap();
        assert!(slope >= 1.8, "fitted order {slope}");
    }

    #[test]
    fn theta_absorbed_values() {
        assert_eq!(theta_absorbed(0.0).unwrap(), 0.0);
        assert!((theta_absorbed(3.0).unwrap() + 0.5).abs() < 1e-15);
        assert!((theta_absorbed(-0.75).unwrap() - 1.0).abs() < 1e-15);
        assert!(theta_absorbed(-1.0).is_err());
        // sign reversal
        for t in [-0.9, -0.3, 0.2, 1.5, 8.0] {
            let h = theta_absorbed(t).unwrap();
            assert!(h * t <= 0.0);
        }
    }

    #[test]
    fn pointwise_frame_on_raw_model2() {
        let sys = builtins::model2(2).unwrap();
        let rho = sys.base_point.clone();
        let frame = pointwise_normal_form(&sys, &rho).unwrap();
        assert_eq!(frame.rank, 2);
        assert!(frame.theta0.abs() < 1e-10);
        assert!(frame.pair_bracket > 0.5);
        assert!(frame.residuals.0 < 1e-8 && frame.residuals.1 < 1e-8);
        // congruence at sampled points
        let samples = {
            let mut rng = Rng::new(5);
            let rho0 = sys.base_point.normalized();
            (0..20)
                .map(|_| {
                    let x = rho0.x.iter().map(|v| v + rng.range(-0.1, 0.1)).collect();
                    let xi = rho0.xi.iter().map(|v| v + rng.range(-0.1, 0.1)).collect();
                    PhasePoint::new(x, xi).unwrap()
                })
                .collect::<Vec<_>>()
        };
        let resid = frame.congruence_residual(&sys, &samples).unwrap();
        assert!(resid < 1e-10, "congruence {resid}");
    }

    #[test]
    fn pointwise_frame_off_base_matches_theta_pipeline() {
        // two independent pipelines agree: frame theta vs bracket-table theta
        let sys = builtins::model2(2).unwrap();
        for (x0, x2) in [(0.05, 0.1), (-0.04, -0.08), (0.1, 0.02)] {
            let rho = builtins::model2_sigma_point(2, x0, x2);
            let frame = pointwise_normal_form(&sys, &rho).unwrap();
            let theta = crate::spectral::theta_at(&sys, &rho).unwrap();
            assert!(
                (frame.theta0 - theta).abs() <= 1e-8 * (1.0 + theta.abs()),
                "{} vs {theta}",
                frame.theta0
            );
        }
    }

    #[test]
    fn pointwise_frame_idempotent_on_normal_input() {
        let sys = builtins::model1(Some(parse("0.25", &no_params()).unwrap())).unwrap();
        let frame = pointwise_normal_form(&sys, &sys.base_point.clone()).unwrap();
        assert!((frame.theta0 - 0.25).abs() < 1e-10);
        // rotation is the identity up to signs
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (frame.rotation[(i, j)].abs() - want).abs() < 1e-9,
                    "{:?}",
                    frame.rotation
                );
            }
        }
    }

    #[test]
    fn pointwise_frame_rejects_symplectic_frame() {
        // p = -xi0^2 + x0^2: bracket matrix nonsingular, no kernel vector
        let phi1 = parse("x0", &no_params()).unwrap();
        let base = PhasePoint::new(vec![0.0, 0.0], vec![0.0, 1.0]).unwrap();
        let sys = crate::spectral::SymbolSystem::new(
            1,
            vec![phi1],
            None,
            None,
            base,
            None,
            "effective-toy",
        )
        .unwrap();
        let err = pointwise_normal_form(&sys, &sys.base_point.clone()).unwrap_err();
        assert!(
            matches!(err, Error::NotTransitionPoint(_) | Error::Degenerate(_)),
            "{err}"
        );
    }

    #[test]
    fn extension_check_shifted_restriction() {
        // theta = x2 + (x0+x1) x2 restricted to x1 = -x0 extends as x2.
        // Needs n = 3 so that the extension variable x2 is not the conic
        // partner of xi_n.
        let theta = parse("x2 + (x0+x1)*x2", &no_params()).unwrap();
        let phi1 = parse("xi1", &no_params()).unwrap();
        let phi2 = parse("(x0+x1)*xi3", &no_params()).unwrap();
        let base = PhasePoint::new(vec![0.0; 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let sys = crate::spectral::SymbolSystem::new(
            3,
            vec![phi1, phi2],
            Some(theta),
            None,
            base,
            Some(2),
            "model1-wide",
        )
        .unwrap();
        let tilde = parse("x2", &no_params()).unwrap();
        let samples = box_samples(&sys, 60, 0.1, 6);
        let rep = extension_check(&sys, &tilde, &samples).unwrap();
        // {phi_2, x2} = 0 exactly and {phi_1, x2} = 0 exactly
        assert!(rep.first_residual < 1e-12, "{rep:?}");
        assert!(rep.second_residual < 1e-12, "{rep:?}");
        assert!(rep.agreement_residual < 1e-12, "{rep:?}");
        assert!(rep.range_ok);
    }

    #[test]
    fn extension_check_flags_violator() {
        // theta = 0 but theta~ = x0: wrong on Sigma' and out of range
        let sys = builtins::model1(Some(Expr::zero())).unwrap();
        let tilde = parse("x0", &no_params()).unwrap();
        let samples = box_samples(&sys, 60, 0.1, 7);
        let rep = extension_check(&sys, &tilde, &samples).unwrap();
        assert!(rep.agreement_residual > 1e-3, "{rep:?}");
        assert!(!rep.range_ok);
    }
}
