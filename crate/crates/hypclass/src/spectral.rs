//! Hamilton map at double points, its spectrum, the bracket linear algebra
//! behind the invariant `theta`, and the effective / type 1 / type 2
//! classification.
//!
//! A symbol is held as `p = -xi0^2 + (1+theta) phi1^2 + sum_{j>=2} phi_j^2 + R`
//! with the defining functions `phi_j` supplied by the user. The plain-form
//! functions (first one rescaled by `sqrt(1+theta)`) drive the bracket
//! pipeline; the raw functions drive normal-form checks.

use crate::error::{Error, Result};
use crate::expr::{poisson, Expr, PhasePoint, Var};
use crate::linalg::{self, ColPivQr, Mat};
use crate::rng::Rng;
use num_complex::Complex64;

/// Membership tolerance for the double manifold, applied after conic
/// normalization.
pub const SIGMA_TOL: f64 = 1e-8;

/// Half width of the `theta = 0` band in the classification.
pub const THETA_TOL: f64 = 1e-7;

/// Relative floor below which an eigenvalue counts as zero.
pub const EIG_FLOOR: f64 = 1e-7;

/// A second-order symbol with double characteristics.
///
/// `phis[0]` is `phi_1`; `phi_0 = xi_0` is implicit. When `theta` is present
/// the symbol is `-(xi0+phi1)(xi0-phi1) + theta phi1^2 + sum_{j>=2} phi_j^2 + R`.
#[derive(Clone, Debug)]
pub struct SymbolSystem {
    pub n: usize,
    pub phis: Vec<Expr>,
    pub theta: Option<Expr>,
    pub remainder: Option<Expr>,
    pub base_point: PhasePoint,
    pub declared_rank: Option<usize>,
    pub label: String,
}

impl SymbolSystem {
    pub fn new(
        n: usize,
        phis: Vec<Expr>,
        theta: Option<Expr>,
        remainder: Option<Expr>,
        base_point: PhasePoint,
        declared_rank: Option<usize>,
        label: impl Into<String>,
    ) -> Result<Self> {
        let sys = SymbolSystem {
            n,
            phis,
            theta,
            remainder,
            base_point,
            declared_rank,
            label: label.into(),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn d(&self) -> usize {
        self.phis.len()
    }

    /// Effective coefficient of `phi_1^2`, i.e. `1 + theta`.
    pub fn one_plus_theta(&self) -> Expr {
        match &self.theta {
            Some(t) => Expr::add(&Expr::one(), t),
            None => Expr::one(),
        }
    }

    pub fn theta_expr(&self) -> Expr {
        self.theta.clone().unwrap_or_else(Expr::zero)
    }

    /// The principal symbol.
    pub fn principal_symbol(&self) -> Expr {
        let xi0 = Expr::xi(0);
        let mut p = Expr::neg(&Expr::pow(&xi0, 2));
        for (j, phi) in self.phis.iter().enumerate() {
            let sq = Expr::pow(phi, 2);
            if j == 0 {
                p = Expr::add(&p, &Expr::mul(&self.one_plus_theta(), &sq));
            } else {
                p = Expr::add(&p, &sq);
            }
        }
        if let Some(r) = &self.remainder {
            p = Expr::add(&p, r);
        }
        p
    }

    /// Plain-form defining functions: `phi_1` rescaled by `sqrt(1+theta)`,
    /// the rest unchanged, so that `p = -xi0^2 + sum phi_hat_j^2 + R`.
    pub fn phi_hat(&self) -> Vec<Expr> {
        let mut out = self.phis.clone();
        if self.theta.is_some() && !out.is_empty() {
            let scale = Expr::sqrt(&self.one_plus_theta());
            out[0] = Expr::mul(&scale, &out[0]);
        }
        out
    }

    /// `phi_0 = xi_0` followed by the plain-form functions.
    pub fn phi_hat_full(&self) -> Vec<Expr> {
        let mut v = vec![Expr::xi(0)];
        v.extend(self.phi_hat());
        v
    }

    /// `phi_0 = xi_0` followed by the raw functions.
    pub fn phi_raw_full(&self) -> Vec<Expr> {
        let mut v = vec![Expr::xi(0)];
        v.extend(self.phis.iter().cloned());
        v
    }

    fn validate(&self) -> Result<()> {
        if self.phis.is_empty() {
            return Err(Error::Invalid("at least one defining function is required".into()));
        }
        if self.base_point.dim() != self.n {
            return Err(Error::Invalid(format!(
                "base point dimension {} does not match n = {}",
                self.base_point.dim(),
                self.n
            )));
        }
        for (j, phi) in self.phis.iter().enumerate() {
            if phi.max_index() > self.n {
                return Err(Error::Invalid(format!(
                    "phi_{} uses a variable beyond dimension {}",
                    j + 1,
                    self.n
                )));
            }
            if phi.uses(Var::Xi(0)) {
                return Err(Error::Invalid(format!("phi_{} must not involve xi0", j + 1)));
            }
        }
        let rho = self.base_point.normalized();

        // d phi_0, ..., d phi_d linearly independent at the base point
        let jac = self.jacobian(&self.phi_raw_full(), &rho)?;
        let rank = linalg::rank(&jac);
        if rank != self.d() + 1 {
            return Err(Error::Degenerate(format!(
                "differentials of the defining functions have rank {rank} (expected {})",
                self.d() + 1
            )));
        }

        // base point on Sigma: p and its gradient vanish
        if self.sigma_residual(&rho)? <= SIGMA_TOL {
            let p = self.principal_symbol();
            let pval = p.eval(&rho)?.abs();
            let mut gmax = 0.0f64;
            for i in 0..=self.n {
                gmax = gmax.max(p.diff(Var::X(i)).eval(&rho)?.abs());
                gmax = gmax.max(p.diff(Var::Xi(i)).eval(&rho)?.abs());
            }
            if pval > 1e-8 || gmax > 1e-8 {
                return Err(Error::Invalid(format!(
                    "base point is on Sigma but p = {pval:.3e}, |grad p| = {gmax:.3e}"
                )));
            }
        }

        // 1 + theta > 0 on a sampled neighborhood
        if self.theta.is_some() {
            let opt = self.one_plus_theta();
            let mut rng = Rng::new(0x1517);
            for _ in 0..64 {
                let q = self.perturb(&rho, &mut rng, 0.05);
                if let Ok(v) = opt.eval(&q) {
                    if v <= 0.0 {
                        return Err(Error::Invalid(format!(
                            "1 + theta = {v:.3e} <= 0 near the base point"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn perturb(&self, rho: &PhasePoint, rng: &mut Rng, h: f64) -> PhasePoint {
        let x = rho.x.iter().map(|v| v + rng.range(-h, h)).collect();
        let xi = rho.xi.iter().map(|v| v + rng.range(-h, h)).collect();
        PhasePoint::unchecked(x, xi)
    }

    /// Jacobian of a list of functions with respect to all phase variables.
    fn jacobian(&self, funcs: &[Expr], rho: &PhasePoint) -> Result<Mat> {
        let n = self.n;
        let mut jac = Mat::zeros(funcs.len(), 2 * (n + 1));
        for (i, f) in funcs.iter().enumerate() {
            for j in 0..=n {
                jac[(i, j)] = f.diff(Var::X(j)).eval(rho)?;
                jac[(i, n + 1 + j)] = f.diff(Var::Xi(j)).eval(rho)?;
            }
        }
        Ok(jac)
    }

    /// Max of |xi0| and |phi_j| at the normalized point.
    pub fn sigma_residual(&self, rho: &PhasePoint) -> Result<f64> {
        let rho = rho.normalized();
        let mut r = rho.xi[0].abs();
        for phi in &self.phis {
            r = r.max(phi.eval(&rho)?.abs());
        }
        Ok(r)
    }

    /// Max of |phi_j| at the normalized point (xi0 unrestricted).
    pub fn sigma_prime_residual(&self, rho: &PhasePoint) -> Result<f64> {
        let rho = rho.normalized();
        let mut r: f64 = 0.0;
        for phi in &self.phis {
            r = r.max(phi.eval(&rho)?.abs());
        }
        Ok(r)
    }

    pub fn on_sigma(&self, rho: &PhasePoint) -> bool {
        matches!(self.sigma_residual(rho), Ok(r) if r <= SIGMA_TOL)
    }

    fn require_on_sigma(&self, rho: &PhasePoint) -> Result<()> {
        let r = self.sigma_residual(rho)?;
        if r > SIGMA_TOL {
            return Err(Error::NotOnSigma { residual: r, tol: SIGMA_TOL });
        }
        Ok(())
    }

    /// Gauss-Newton projection onto the zero set of `funcs`, followed by
    /// conic normalization. Two projection/normalization rounds keep
    /// homogeneous and inhomogeneous inputs alike on the manifold.
    fn project(&self, funcs: &[Expr], start: &PhasePoint) -> Result<PhasePoint> {
        let mut z = start.normalized();
        for round in 0..2 {
            for _ in 0..60 {
                let res: Vec<f64> =
                    funcs.iter().map(|f| f.eval(&z)).collect::<Result<_>>()?;
                let rnorm = linalg::norm(&res);
                if rnorm <= 1e-13 {
                    break;
                }
                let jac = self.jacobian(funcs, &z)?;
                // minimum-norm step: J^T (J J^T)^{-1} res
                let jjt = jac.matmul(&jac.transpose());
                let y = linalg::solve(&jjt, &res).map_err(|_| {
                    Error::Degenerate("projection Jacobian is rank-deficient".into())
                })?;
                let step = jac.transpose().matvec(&y);
                let state = z.to_state();
                let new_state: Vec<f64> =
                    state.iter().zip(&step).map(|(a, b)| a - b).collect();
                z = PhasePoint::from_state(&new_state);
            }
            z = z.normalized();
            let res: Vec<f64> = funcs.iter().map(|f| f.eval(&z)).collect::<Result<_>>()?;
            if linalg::norm(&res) <= 1e-11 && round > 0 {
                break;
            }
        }
        let res: Vec<f64> = funcs.iter().map(|f| f.eval(&z)).collect::<Result<_>>()?;
        if linalg::norm(&res) > 1e-9 {
            return Err(Error::Seed(format!(
                "projection failed to converge, residual {:.3e}",
                linalg::norm(&res)
            )));
        }
        Ok(z)
    }

    /// Project a point onto Sigma (xi0 = 0, phi_j = 0) and normalize.
    pub fn project_to_sigma(&self, start: &PhasePoint) -> Result<PhasePoint> {
        let mut funcs = vec![Expr::xi(0)];
        funcs.extend(self.phis.iter().cloned());
        self.project(&funcs, start)
    }

    /// Project a point onto Sigma' (phi_j = 0, xi0 free) and normalize.
    pub fn project_to_sigma_prime(&self, start: &PhasePoint) -> Result<PhasePoint> {
        self.project(&self.phis.clone(), start)
    }

    /// Random points of Sigma in a box of the given half width around the
    /// base point.
    pub fn sample_sigma(&self, rng: &mut Rng, count: usize, half_width: f64) -> Vec<PhasePoint> {
        self.sample_projected(rng, count, half_width, true)
    }

    /// Random points of Sigma' in a box around the base point.
    pub fn sample_sigma_prime(
        &self,
        rng: &mut Rng,
        count: usize,
        half_width: f64,
    ) -> Vec<PhasePoint> {
        self.sample_projected(rng, count, half_width, false)
    }

    fn sample_projected(
        &self,
        rng: &mut Rng,
        count: usize,
        half_width: f64,
        full_sigma: bool,
    ) -> Vec<PhasePoint> {
        let rho0 = self.base_point.normalized();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count && attempts < 50 * count + 100 {
            attempts += 1;
            let cand = self.perturb(&rho0, rng, half_width);
            let projected = if full_sigma {
                self.project_to_sigma(&cand)
            } else {
                self.project_to_sigma_prime(&cand)
            };
            if let Ok(p) = projected {
                out.push(p);
            }
        }
        out
    }

    /// Points at a prescribed offset from Sigma': project onto Sigma', then
    /// step away by `dist` along a random unit direction in `(x, xi')` and
    /// set `xi0 = 0`. Used by the shell sweeps.
    pub fn sample_shell(
        &self,
        rng: &mut Rng,
        count: usize,
        half_width: f64,
        dist: f64,
    ) -> Vec<PhasePoint> {
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count && attempts < 50 * count + 100 {
            attempts += 1;
            let cand = self.perturb(&self.base_point.normalized(), rng, half_width);
            let Ok(base) = self.project_to_sigma_prime(&cand) else {
                continue;
            };
            let dir = rng.unit_vector(2 * self.n + 1);
            let mut x = base.x.clone();
            let mut xi = base.xi.clone();
            for i in 0..=self.n {
                x[i] += dist * dir[i];
            }
            for i in 1..=self.n {
                xi[i] += dist * dir[self.n + i];
            }
            xi[0] = 0.0;
            let p = PhasePoint::unchecked(x, xi);
            if p.xi_prime_norm() > 0.5 {
                out.push(p.normalized());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Fundamental matrix and spectrum
// ---------------------------------------------------------------------------

/// Fundamental (Hamilton) map `F = J (Hess p / 2)` at a double point,
/// with state ordering `[x, xi]` and `J` the matrix of the symplectic form
/// `sum dxi_j ^ dx_j`.
pub fn fundamental_matrix(sys: &SymbolSystem, rho: &PhasePoint) -> Result<Mat> {
    sys.require_on_sigma(rho)?;
    let rho = rho.normalized();
    let n = sys.n;
    let dim = 2 * (n + 1);
    let p = sys.principal_symbol();

    let vars: Vec<Var> = (0..=n).map(Var::X).chain((0..=n).map(Var::Xi)).collect();
    let grads: Vec<Expr> = vars.iter().map(|v| p.diff(*v)).collect();
    let mut hess = Mat::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let val = grads[i].diff(vars[j]).eval(&rho)?;
            hess[(i, j)] = val;
            hess[(j, i)] = val;
        }
    }
    // F = J (H/2): x-rows read the xi-rows of H/2, xi-rows read -x-rows
    let mut f = Mat::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..=n {
            f[(i, j)] = hess[(n + 1 + i, j)] / 2.0;
            f[(n + 1 + i, j)] = -hess[(i, j)] / 2.0;
        }
    }
    Ok(f)
}

/// Eigenvalues of `f` with the pairing sanity check: the spectrum of a
/// Hamilton map is closed under `lambda -> -lambda` and conjugation.
pub fn spectrum(f: &Mat) -> Result<Vec<Complex64>> {
    let eig = linalg::eigenvalues(f)?;
    let scale = f.norm_fro().max(1e-300);
    let tol = 1e-8 * scale;
    for l in &eig {
        if l.norm() <= tol {
            continue;
        }
        let neg = eig.iter().any(|m| (m + l).norm() <= tol.max(1e-7 * l.norm()));
        let conj = eig.iter().any(|m| (m - l.conj()).norm() <= tol.max(1e-7 * l.norm()));
        if !neg || !conj {
            return Err(Error::Inconsistent(format!(
                "spectrum not closed under negation/conjugation near {l}"
            )));
        }
    }
    Ok(eig)
}

/// Dimension of `W = Ker F^2 /\ Im F^2` by rank-revealing QR.
pub fn w_dim(f: &Mat) -> Result<usize> {
    let b = f.matmul(f);
    let qr = ColPivQr::new(&b);
    let k = qr.rank(linalg::RANK_TOL);
    if k == 0 {
        return Ok(0);
    }
    // column space basis from the pivot columns
    let n = b.rows();
    let mut pivots = Mat::zeros(n, k);
    for c in 0..k {
        let src = qr.perm[c];
        for i in 0..n {
            pivots[(i, c)] = b[(i, src)];
        }
    }
    let u = linalg::orthonormalize_columns(&pivots);
    // W = Ker(B restricted to Im B)
    let bu = b.matmul(&u);
    let inner = ColPivQr::new(&bu);
    let rank_bu = inner.rank(linalg::RANK_TOL);
    Ok(u.cols() - rank_bu)
}

/// Sum of the positive imaginary parts of a spectrum.
pub fn trace_plus_of(eigs: &[Complex64], floor: f64) -> f64 {
    eigs.iter().filter(|l| l.im > floor).map(|l| l.im).sum()
}

/// `Tr^+` of a fundamental matrix: the sum mu_1 + ... over eigenvalues
/// `i mu_j` with `mu_j > 0`.
pub fn trace_plus(f: &Mat) -> Result<f64> {
    let eigs = spectrum(f)?;
    let scale = f.norm_fro().max(1e-300);
    Ok(trace_plus_of(&eigs, 1e-8 * scale))
}

// ---------------------------------------------------------------------------
// Bracket table
// ---------------------------------------------------------------------------

/// Evaluated Poisson-bracket data at a point of Sigma.
#[derive(Clone, Debug)]
pub struct BracketTable {
    /// Full (d+1) x (d+1) matrix of plain-form brackets `{phi_i, phi_j}`.
    pub a_full: Mat,
    /// Numeric rank of `a_full`.
    pub r: usize,
    /// Orthonormal basis (columns) of the subspace of R^d spanned by
    /// directions `w` with `(0, w)` in the kernel of `a_full`.
    pub kernel_part: Mat,
    /// Reduced r x r bracket matrix on the active subspace.
    pub m: Mat,
    /// Right-hand side `({xi0, phi_1}, ..., {xi0, phi_r})` on the active
    /// subspace.
    pub a: Vec<f64>,
    /// Solution of `M alpha = a`.
    pub alpha: Vec<f64>,
    pub alpha_norm: f64,
    /// `{phi_1, phi_2}` of the raw functions at the point (when d >= 2).
    pub delta: Option<f64>,
    pub warnings: Vec<String>,
}

/// Pairwise plain-form brackets as expressions (built once per system).
pub struct BracketExprs {
    pub exprs: Vec<Vec<Expr>>,
}

impl BracketExprs {
    pub fn new(sys: &SymbolSystem) -> Self {
        let funcs = sys.phi_hat_full();
        let k = funcs.len();
        let mut exprs = vec![vec![Expr::zero(); k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let b = poisson(&funcs[i], &funcs[j]);
                exprs[i][j] = b.clone();
                exprs[j][i] = Expr::neg(&b);
            }
        }
        BracketExprs { exprs }
    }

    pub fn eval_matrix(&self, rho: &PhasePoint) -> Result<Mat> {
        let k = self.exprs.len();
        let mut m = Mat::zeros(k, k);
        for i in 0..k {
            for j in i + 1..k {
                let v = self.exprs[i][j].eval(rho)?;
                m[(i, j)] = v;
                m[(j, i)] = -v;
            }
        }
        Ok(m)
    }
}

/// Assemble the bracket table at a point of Sigma.
pub fn bracket_table(sys: &SymbolSystem, rho: &PhasePoint) -> Result<BracketTable> {
    sys.require_on_sigma(rho)?;
    let rho = rho.normalized();
    let brackets = BracketExprs::new(sys);
    bracket_table_with(sys, &brackets, &rho)
}

/// Same as [`bracket_table`], reusing precomputed bracket expressions
/// (sweeps evaluate the table at many points).
pub fn bracket_table_with(
    sys: &SymbolSystem,
    brackets: &BracketExprs,
    rho: &PhasePoint,
) -> Result<BracketTable> {
    let rho = rho.normalized();
    let d = sys.d();
    let a_full = brackets.eval_matrix(&rho)?;
    let mut warnings = Vec::new();

    let qr = ColPivQr::new(&a_full);
    let r = qr.rank(linalg::RANK_TOL);
    if qr.rank_ambiguous(linalg::RANK_AMBIG_LO, linalg::RANK_AMBIG_HI) {
        warnings.push(format!(
            "rank of the bracket matrix is ambiguous near cutoff (rank {r})"
        ));
    }
    if r % 2 != 0 {
        return Err(Error::Inconsistent(format!(
            "bracket matrix has odd numeric rank {r}"
        )));
    }
    if let Some(declared) = sys.declared_rank {
        if declared != r {
            return Err(Error::RankMismatch { declared, computed: r });
        }
    }

    let delta = if d >= 2 {
        Some(poisson(&sys.phis[0], &sys.phis[1]).eval(&rho)?)
    } else {
        None
    };

    if r == 0 {
        return Err(Error::Degenerate(
            "all brackets vanish: the symplectic form is zero on the span".into(),
        ));
    }

    // kernel vectors of a_full with zero first component, dropped to R^d
    let kernel = qr.kernel(r); // (d+1) x (d+1-r), orthonormal columns
    let kdim = kernel.cols();
    let first_row: Vec<f64> = (0..kdim).map(|c| kernel[(0, c)]).collect();
    let fr_norm = linalg::norm(&first_row);
    let mut zero_first: Vec<Vec<f64>> = Vec::new();
    if kdim > 0 {
        // combinations c with <first_row, c> = 0
        let mut tmat = Mat::zeros(1, kdim);
        for c in 0..kdim {
            tmat[(0, c)] = first_row[c];
        }
        let tqr = ColPivQr::new(&tmat);
        let trank = if fr_norm > 1e-10 { 1 } else { 0 };
        let combos = tqr.kernel(trank);
        for c in 0..combos.cols() {
            let coef = combos.col(c);
            let mut v = vec![0.0; d];
            for (k, ck) in coef.iter().enumerate() {
                for i in 0..d {
                    v[i] += ck * kernel[(i + 1, k)];
                }
            }
            zero_first.push(v);
        }
    }
    let mut kmat = Mat::zeros(d, zero_first.len());
    for (c, v) in zero_first.iter().enumerate() {
        for i in 0..d {
            kmat[(i, c)] = v[i];
        }
    }
    let kernel_part = linalg::orthonormalize_columns(&kmat);

    if fr_norm <= 1e-10 {
        return Err(Error::Degenerate(
            "no kernel direction of the bracket matrix has a xi0 component; \
             the reduced system M alpha = a is singular"
                .into(),
        ));
    }

    // active subspace: orthonormal complement of kernel_part in R^d
    let mut ext = Mat::zeros(d, kernel_part.cols() + d);
    for c in 0..kernel_part.cols() {
        for i in 0..d {
            ext[(i, c)] = kernel_part[(i, c)];
        }
    }
    for j in 0..d {
        ext[(j, kernel_part.cols() + j)] = 1.0;
    }
    let full = linalg::orthonormalize_columns(&ext);
    let active_dim = full.cols() - kernel_part.cols();
    let active = full.submatrix(0, d, kernel_part.cols(), full.cols());
    if active_dim != r {
        return Err(Error::Degenerate(format!(
            "active subspace has dimension {active_dim}, expected rank {r}"
        )));
    }

    // reduced M and a on the active subspace
    let b = a_full.submatrix(1, d + 1, 1, d + 1);
    let a_hat: Vec<f64> = (1..=d).map(|j| a_full[(0, j)]).collect();
    let mut m = Mat::zeros(r, r);
    for i in 0..r {
        let ui = active.col(i);
        let bu: Vec<f64> = b.matvec(&active.col(i));
        let _ = ui;
        for j in 0..r {
            m[(i, j)] = dot(&active.col(i), &b.matvec(&active.col(j)));
        }
        let _ = bu;
    }
    let a: Vec<f64> = (0..r).map(|j| dot(&a_hat, &active.col(j))).collect();

    let alpha = linalg::solve(&m, &a)
        .map_err(|_| Error::Degenerate("reduced bracket matrix M is singular".into()))?;
    let resid: Vec<f64> = m
        .matvec(&alpha)
        .iter()
        .zip(&a)
        .map(|(x, y)| x - y)
        .collect();
    let anorm = linalg::norm(&a).max(1e-300);
    if linalg::norm(&resid) > 1e-10 * anorm {
        return Err(Error::Singular(format!(
            "M alpha = a solve residual {:.3e} too large",
            linalg::norm(&resid)
        )));
    }
    let alpha_norm = linalg::norm(&alpha);

    Ok(BracketTable {
        a_full,
        r,
        kernel_part,
        m,
        a,
        alpha,
        alpha_norm,
        delta,
        warnings,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    linalg::dot(a, b)
}

/// The transition invariant `theta = (1 - |alpha|^2)/|alpha|^2`, with
/// `|alpha| = 1` detection snapping to exactly zero.
pub fn theta_at(sys: &SymbolSystem, rho: &PhasePoint) -> Result<f64> {
    let table = bracket_table(sys, rho)?;
    Ok(theta_from_table(&table))
}

pub fn theta_from_table(table: &BracketTable) -> f64 {
    let a2 = table.alpha_norm * table.alpha_norm;
    if (table.alpha_norm - 1.0).abs() <= 1e-8 {
        return 0.0;
    }
    (1.0 - a2) / a2
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Label {
    Effective,
    Type1,
    Type2,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Effective => write!(f, "effective"),
            Label::Type1 => write!(f, "type1"),
            Label::Type2 => write!(f, "type2"),
        }
    }
}

/// Spectral facts about a point of Sigma.
#[derive(Clone, Debug)]
pub struct SpectralReport {
    pub eigenvalues: Vec<Complex64>,
    pub dim_w: usize,
    pub theta: f64,
    pub trace_plus: f64,
    pub label: Label,
    pub warnings: Vec<String>,
}

/// Classify a point by the sign of theta, cross-checked against the
/// spectrum (a real pair means effective) and against `dim W`.
pub fn classify(sys: &SymbolSystem, rho: &PhasePoint) -> Result<SpectralReport> {
    classify_with_tol(sys, rho, THETA_TOL)
}

pub fn classify_with_tol(
    sys: &SymbolSystem,
    rho: &PhasePoint,
    theta_tol: f64,
) -> Result<SpectralReport> {
    let table = bracket_table(sys, rho)?;
    let theta = theta_from_table(&table);
    let f = fundamental_matrix(sys, rho)?;
    let eigs = spectrum(&f)?;
    let dimw = w_dim(&f)?;
    let scale = f.norm_fro().max(1e-300);
    let floor = EIG_FLOOR * scale;
    let has_real_pair = eigs
        .iter()
        .any(|l| l.im.abs() <= floor && l.re.abs() > floor);
    let tp = trace_plus_of(&eigs, floor);

    let label = if theta > theta_tol {
        Label::Type1
    } else if theta < -theta_tol {
        Label::Effective
    } else {
        Label::Type2
    };

    let mut warnings = table.warnings.clone();
    // strong-disagreement guard band: within 10x of the band edge the
    // numeric rank of F^2 is genuinely ambiguous, report a warning instead
    let strong = theta.abs() > 10.0 * theta_tol;
    match label {
        Label::Effective => {
            if strong && !has_real_pair {
                return Err(Error::Inconsistent(format!(
                    "theta = {theta:.3e} < 0 but the spectrum has no real pair"
                )));
            }
            if !has_real_pair {
                warnings.push("borderline: effective by theta, no resolved real pair".into());
            }
        }
        Label::Type1 => {
            if strong && (has_real_pair || dimw > 0) {
                return Err(Error::Inconsistent(format!(
                    "theta = {theta:.3e} > 0 but spectrum/W disagree (real pair: {has_real_pair}, dim W = {dimw})"
                )));
            }
        }
        Label::Type2 => {
            if dimw == 0 {
                warnings.push(format!(
                    "borderline: |theta| = {:.3e} within tolerance but dim W = 0",
                    theta.abs()
                ));
            }
        }
    }

    Ok(SpectralReport {
        eigenvalues: eigs,
        dim_w: dimw,
        theta,
        trace_plus: tp,
        label,
        warnings,
    })
}

/// Residual of the product identity
/// `(1 - |alpha|^2) det M = prod of nonzero eigenvalues of F`.
pub fn product_identity_check(sys: &SymbolSystem, rho: &PhasePoint) -> Result<f64> {
    let f = fundamental_matrix(sys, rho)?;
    if w_dim(&f)? != 0 {
        return Err(Error::Precondition(
            "product identity requires W = {0} at the point".into(),
        ));
    }
    let table = bracket_table(sys, rho)?;
    let lhs = (1.0 - table.alpha_norm * table.alpha_norm) * linalg::det(&table.m);

    let eigs = spectrum(&f)?;
    let scale = f.norm_fro().max(1e-300);
    let floor = EIG_FLOOR * scale;
    let mut prod = Complex64::new(1.0, 0.0);
    for l in eigs.iter().filter(|l| l.norm() > floor) {
        prod *= l;
    }
    if prod.im.abs() > 1e-6 * prod.norm().max(1.0) {
        return Err(Error::Inconsistent(format!(
            "product of nonzero eigenvalues is not real: {prod}"
        )));
    }
    let rhs = prod.re;
    Ok((lhs - rhs).abs() / rhs.abs().max(1.0))
}

/// Hausdorff distance between the nonzero spectrum of the fundamental
/// matrix and the nonzero spectrum of the sign-weighted bracket matrix
/// `(eps_i {phi_j, phi_i})` of the plain-form functions.
pub fn reduced_bracket_check(sys: &SymbolSystem, rho: &PhasePoint) -> Result<f64> {
    sys.require_on_sigma(rho)?;
    let rho = rho.normalized();
    let d = sys.d();
    let brackets = BracketExprs::new(sys);
    let plain = brackets.eval_matrix(&rho)?;
    // entry (i, j) = eps_i {phi_j, phi_i} = -eps_i {phi_i, phi_j}
    let mut curly = Mat::zeros(d + 1, d + 1);
    for i in 0..=d {
        let eps = if i == 0 { -1.0 } else { 1.0 };
        for j in 0..=d {
            curly[(i, j)] = -eps * plain[(i, j)];
        }
    }
    let f = fundamental_matrix(sys, &rho)?;
    let f_eigs = spectrum(&f)?;
    let c_eigs = linalg::eigenvalues(&curly)?;
    let scale = f.norm_fro().max(curly.norm_fro()).max(1e-300);
    let floor = EIG_FLOOR * scale;
    let fnz: Vec<Complex64> = f_eigs.into_iter().filter(|l| l.norm() > floor).collect();
    let cnz: Vec<Complex64> = c_eigs.into_iter().filter(|l| l.norm() > floor).collect();
    if fnz.is_empty() && cnz.is_empty() {
        return Ok(0.0);
    }
    Ok(linalg::hausdorff(&fnz, &cnz))
}
