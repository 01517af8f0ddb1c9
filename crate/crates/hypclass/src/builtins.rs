//! Built-in symbol families with closed-form structure, used as fixtures by
//! the test suite and addressable from the command line.
//!
//! - `model1`: `-xi0^2 + (1+theta(x)) xi1^2 + (x0+x1)^2 xi2^2`, a minimal
//!   normal form where every transition type is reachable through `theta`;
//! - `model2(k)`: `-xi0^2 + xi1^2 + (x0+x1-x0 x2^k/k)^2 xi3^2 + xi2^2`, raw
//!   frame with a rank drop on Sigma and a closed-form `theta`;
//! - `model2nf(k)`: the same symbol rewritten in a normal-form frame;
//! - `model3(k, nu)`: `-xi0^2 + (xi1+x0 xi3)^2 + x1^2 (1+x1^k+nu(x)) xi3^2`,
//!   the tangent-bicharacteristic example.

use crate::error::{Error, Result};
use crate::expr::{parse, Expr, PhasePoint};
use crate::spectral::SymbolSystem;
use std::collections::BTreeMap;

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `p = -xi0^2 + (1+theta(x)) xi1^2 + (x0+x1)^2 xi2^2` near `(0, e_2)`.
///
/// `theta` defaults to zero (type 2 everywhere on Sigma).
pub fn model1(theta: Option<Expr>) -> Result<SymbolSystem> {
    let none = params(&[]);
    let phi1 = parse("xi1", &none)?;
    let phi2 = parse("(x0 + x1)*xi2", &none)?;
    let base = PhasePoint::new(vec![0.0; 3], vec![0.0, 0.0, 1.0])?;
    SymbolSystem::new(2, vec![phi1, phi2], theta, None, base, Some(2), "model1")
}

/// `p = -xi0^2 + xi1^2 + (x0+x1-x0 x2^k/k)^2 xi3^2 + xi2^2` near `(0, e_3)`,
/// in the raw frame `(xi1, (..) xi3, xi2)`.
pub fn model2(k: u32) -> Result<SymbolSystem> {
    if k == 0 {
        return Err(Error::Invalid("model2 requires k >= 1".into()));
    }
    let ps = params(&[("k", k as f64)]);
    let phi1 = parse("xi1", &ps)?;
    let phi2 = parse("(x0 + x1 - x0*x2^k/k)*xi3", &ps)?;
    let phi3 = parse("xi2", &ps)?;
    let base = PhasePoint::new(vec![0.0; 4], vec![0.0, 0.0, 0.0, 1.0])?;
    SymbolSystem::new(
        3,
        vec![phi1, phi2, phi3],
        None,
        None,
        base,
        Some(2),
        format!("model2(k={k})"),
    )
}

/// Closed-form `theta` of `model2` on Sigma, as a function of `(x0, x2)`:
/// `(2 x2^k/k + x0^2 x2^(2k-2) - x2^(2k)/k^2) / (1 - x2^k/k)^2`.
pub fn model2_theta_closed_form(k: u32) -> Result<Expr> {
    let ps = params(&[
        ("k", k as f64),
        ("km", 2.0 * (k as f64 - 1.0)),
        ("kk", 2.0 * k as f64),
    ]);
    parse(
        "(2*x2^k/k + x0^2*x2^km - x2^kk/k^2)/(1 - x2^k/k)^2",
        &ps,
    )
}

/// A point of Sigma for `model2`: `xi0 = xi1 = xi2 = 0`, `xi3 = 1`, and
/// `x1` balancing `x0 + x1 - x0 x2^k/k = 0`.
pub fn model2_sigma_point(k: u32, x0: f64, x2: f64) -> PhasePoint {
    let x1 = x0 * x2.powi(k as i32) / k as f64 - x0;
    PhasePoint::new(vec![x0, x1, x2, 0.0], vec![0.0, 0.0, 0.0, 1.0]).unwrap()
}

/// `model2` rewritten in a normal-form frame, with the closed-form `theta`
/// declared. The frame mixes `xi1, xi2` pointwise so that the third
/// function has vanishing brackets on Sigma'.
pub fn model2_normal_form(k: u32) -> Result<SymbolSystem> {
    if k == 0 {
        return Err(Error::Invalid("model2nf requires k >= 1".into()));
    }
    let ps = params(&[("k", k as f64), ("km1", k as f64 - 1.0), ("km", 2.0 * (k as f64 - 1.0))]);
    let phi1 = parse(
        "(1 - x2^k/k)*(xi1 - x0*x2^km1*xi2)/(1 + x0^2*x2^km)",
        &ps,
    )?;
    let phi2 = parse("(x0 + x1 - x0*x2^k/k)*xi3", &ps)?;
    let phi3 = parse("(x0*x2^km1*xi1 + xi2)/sqrt(1 + x0^2*x2^km)", &ps)?;
    let theta = model2_theta_closed_form(k)?;
    let base = PhasePoint::new(vec![0.0; 4], vec![0.0, 0.0, 0.0, 1.0])?;
    SymbolSystem::new(
        3,
        vec![phi1, phi2, phi3],
        Some(theta),
        None,
        base,
        Some(2),
        format!("model2nf(k={k})"),
    )
}

/// `p = -xi0^2 + (xi1 + x0 xi3)^2 + x1^2 (1 + x1^k + nu(x)) xi3^2` near
/// `(0, e_3)`, written in the normal-form frame
/// `phi1 = -x1 alpha(x1) xi3`, `phi2 = -(xi1 + x0 xi3)` with
/// `alpha = (1+x1^k)/(1+(1+k/2) x1^k)` and coefficient
/// `theta_k(x1) + nu(x)/alpha^2`.
///
/// The sign of `phi2` is chosen so that the normalized third-order bracket
/// `kappa` equals `+1` at the base point when `k = 1`.
pub fn model3(k: u32, nu: Option<Expr>) -> Result<SymbolSystem> {
    if k == 0 {
        return Err(Error::Invalid("model3 requires k >= 1".into()));
    }
    let kf = k as f64;
    let ps = params(&[("k", kf), ("ck", 1.0 + kf / 2.0), ("kk", 2.0 * kf)]);
    let phi1 = parse("-x1*(1 + x1^k)*xi3/(1 + ck*x1^k)", &ps)?;
    let phi2 = parse("-(xi1 + x0*xi3)", &ps)?;
    let theta_k = parse("(1+k)*x1^k + k^2*x1^kk/(4*(1 + x1^k))", &ps)?;
    let inv_alpha_sq = parse("(1 + ck*x1^k)^2/(1 + x1^k)^2", &ps)?;
    let theta = match &nu {
        Some(nu) => Expr::add(&theta_k, &Expr::mul(nu, &inv_alpha_sq)),
        None => theta_k,
    };
    let base = PhasePoint::new(vec![0.0; 4], vec![0.0, 0.0, 0.0, 1.0])?;
    let label = match &nu {
        Some(nu) => format!("model3(k={k}, nu={nu})"),
        None => format!("model3(k={k})"),
    };
    SymbolSystem::new(3, vec![phi1, phi2], Some(theta), None, base, Some(2), label)
}

/// A point of Sigma for `model3`: `x1 = 0`, `xi1 = -x0 xi3`.
pub fn model3_sigma_point(x0: f64, x2: f64, x3: f64) -> PhasePoint {
    PhasePoint::new(vec![x0, 0.0, x2, x3], vec![0.0, -x0, 0.0, 1.0]).unwrap()
}

/// Look up a built-in by CLI name.
pub fn by_name(
    name: &str,
    k: u32,
    theta: Option<Expr>,
    nu: Option<Expr>,
) -> Result<SymbolSystem> {
    match name {
        "model1" | "rei1" => model1(theta),
        "model2" | "rei2" => model2(k),
        "model2nf" | "rei2nf" => model2_normal_form(k),
        "model3" | "rei3" => model3(k, nu),
        other => Err(Error::Invalid(format!(
            "unknown builtin `{other}` (expected model1, model2, model2nf, model3)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{self, Label};
    use std::collections::BTreeMap;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn model2_theta_pipeline_matches_closed_form() {
        for k in [1u32, 2, 3] {
            let sys = model2(k).unwrap();
            let closed = model2_theta_closed_form(k).unwrap();
            for (x0, x2) in [(0.0, 0.1), (0.05, -0.12), (-0.08, 0.07), (0.1, 0.15)] {
                let rho = model2_sigma_point(k, x0, x2);
                let got = spectral::theta_at(&sys, &rho).unwrap();
                let want = closed.eval(&rho).unwrap();
                assert!(
                    (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
                    "k={k} x0={x0} x2={x2}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn model2_rank_constant_on_sigma() {
        let sys = model2(2).unwrap();
        for (x0, x2) in [(0.0, 0.0), (0.1, 0.1), (-0.1, 0.05), (0.07, -0.1)] {
            let rho = model2_sigma_point(2, x0, x2);
            let table = spectral::bracket_table(&sys, &rho).unwrap();
            assert_eq!(table.r, 2);
        }
    }

    #[test]
    fn model2_bands_odd_k() {
        // k = 3: effective for x2 < 0, type 2 at x2 = 0, type 1 for x2 > 0
        let sys = model2(3).unwrap();
        for x0 in [0.0, 0.08, -0.1] {
            let eff = spectral::classify(&sys, &model2_sigma_point(3, x0, -0.1)).unwrap();
            assert_eq!(eff.label, Label::Effective, "x0={x0}");
            let t2 = spectral::classify(&sys, &model2_sigma_point(3, x0, 0.0)).unwrap();
            assert_eq!(t2.label, Label::Type2, "x0={x0}");
            let t1 = spectral::classify(&sys, &model2_sigma_point(3, x0, 0.1)).unwrap();
            assert_eq!(t1.label, Label::Type1, "x0={x0}");
        }
    }

    #[test]
    fn model2_bands_even_k() {
        // k = 2: type 1 off x2 = 0, type 2 at x2 = 0
        let sys = model2(2).unwrap();
        for x2 in [-0.15, -0.05, 0.05, 0.15] {
            let rep = spectral::classify(&sys, &model2_sigma_point(2, 0.05, x2)).unwrap();
            assert_eq!(rep.label, Label::Type1, "x2={x2}");
        }
        let rep = spectral::classify(&sys, &model2_sigma_point(2, 0.05, 0.0)).unwrap();
        assert_eq!(rep.label, Label::Type2);
    }

    #[test]
    fn model1_type2_everywhere_with_zero_theta() {
        let sys = model1(None).unwrap();
        let mut rng = crate::rng::Rng::new(4);
        for p in sys.sample_sigma(&mut rng, 10, 0.08) {
            let rep = spectral::classify(&sys, &p).unwrap();
            assert_eq!(rep.label, Label::Type2);
            assert_eq!(rep.dim_w, 2);
        }
    }

    #[test]
    fn model3_bracket_leading_order() {
        // {xi0 - phi1, phi2} = -k(k+1)/2 x1^k xi3 + higher order
        for k in [1u32, 2] {
            let sys = model3(k, None).unwrap();
            let f = Expr::sub(&Expr::xi(0), &sys.phis[0]);
            let b = crate::expr::poisson(&f, &sys.phis[1]);
            let x1 = 1e-4;
            let p = PhasePoint::new(vec![0.0, x1, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
            let got = b.eval(&p).unwrap();
            let lead = -(k as f64) * (k as f64 + 1.0) / 2.0 * x1.powi(k as i32);
            assert!(
                (got - lead).abs() < 1e-3 * lead.abs(),
                "k={k}: {got} vs {lead}"
            );
        }
    }

    #[test]
    fn model3_theta_vanishes_on_sigma_without_nu() {
        let sys = model3(1, None).unwrap();
        let theta = sys.theta_expr();
        let rho = model3_sigma_point(0.1, 0.0, 0.0);
        assert_eq!(theta.eval(&rho).unwrap(), 0.0);
        let rep = spectral::classify(&sys, &rho).unwrap();
        assert_eq!(rep.label, Label::Type2);
    }

    #[test]
    fn model3_nu_controls_transition() {
        let nu = parse("x2^2", &no_params()).unwrap();
        let sys = model3(2, Some(nu)).unwrap();
        let off = spectral::classify(&sys, &model3_sigma_point(0.0, 0.1, 0.0)).unwrap();
        assert_eq!(off.label, Label::Type1);
        let on = spectral::classify(&sys, &model3_sigma_point(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(on.label, Label::Type2);
    }

    #[test]
    fn by_name_dispatch() {
        assert!(by_name("model1", 1, None, None).is_ok());
        assert!(by_name("rei2", 2, None, None).is_ok());
        assert!(by_name("nope", 1, None, None).is_err());
    }
}
