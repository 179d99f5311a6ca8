//! Scalar-block testbed for randomized block coordinate descent under the
//! constraint `sum_i x_i = 0`: explicit projection operators, enumeration
//! checks of their statistical identities, a KKT oracle, and the inexact and
//! accelerated solvers with Monte-Carlo rate checks.
//!
//! Blocks are `h_i(x) = (c_i/2) x^2 - b_i x`, so `L_i = mu_i = c_i`. Each block
//! is the conjugate of the client objective `f_i(w) = (w^2)/(2 c_i) + (b_i/c_i) w`,
//! which is how the testbed maps onto the federated solver.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dual::{inexact_conjugate_grad, LocalSolver, OracleConfig};
use crate::error::{Error, Result};
use crate::model::QuadraticObjective;
use crate::sim::{sample_participants, AccCoefficients};

/// Largest `n` accepted by the enumeration suites.
pub const MAX_ENUMERATION_N: usize = 10;

/// Tolerance of the operator identities.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadInstance {
    pub c: Vec<f64>,
    pub b: Vec<f64>,
}

impl QuadInstance {
    pub fn new(c: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if c.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: c.len(),
                got: b.len(),
            });
        }
        if c.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 blocks".into()));
        }
        if !c.iter().all(|&ci| ci > 0.0 && ci.is_finite()) || !b.iter().all(|bi| bi.is_finite()) {
            return Err(Error::InvalidArgument("curvatures must be positive and finite".into()));
        }
        Ok(QuadInstance { c, b })
    }

    /// Curvatures log-uniform in `[c_lo, c_hi]`, shifts uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n: usize, c_lo: f64, c_hi: f64, rng: &mut R) -> Result<Self> {
        let (lo, hi) = (c_lo.ln(), c_hi.ln());
        let c = (0..n).map(|_| if hi > lo { rng.gen_range(lo..=hi).exp() } else { c_lo }).collect();
        let b = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self::new(c, b)
    }

    /// Curvatures log-spaced over `[c_lo, c_hi]` (endpoints included).
    pub fn log_spaced<R: Rng + ?Sized>(n: usize, c_lo: f64, c_hi: f64, rng: &mut R) -> Result<Self> {
        let c = (0..n)
            .map(|i| c_lo * (c_hi / c_lo).powf(i as f64 / (n - 1).max(1) as f64))
            .collect();
        let b = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self::new(c, b)
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn l_max(&self) -> f64 {
        self.c.iter().copied().fold(0.0, f64::max)
    }

    pub fn l_min(&self) -> f64 {
        self.c.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mu_min(&self) -> f64 {
        self.l_min()
    }

    pub fn is_scalar(&self) -> bool {
        self.c.iter().all(|&ci| ci == self.c[0])
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.c)
            .zip(&self.b)
            .map(|((xi, ci), bi)| 0.5 * ci * xi * xi - bi * xi)
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.c).zip(&self.b).map(|((xi, ci), bi)| ci * xi - bi).collect()
    }

    /// `h(x) - h*` for feasible `x`, computed as `sum_i c_i (x_i - x*_i)^2 / 2`
    /// so it does not cancel near the optimum.
    pub fn gap(&self, x: &[f64], x_star: &[f64]) -> f64 {
        x.iter()
            .zip(x_star)
            .zip(&self.c)
            .map(|((xi, si), ci)| 0.5 * ci * (xi - si) * (xi - si))
            .sum()
    }

    pub fn l_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.c.clone()))
    }

    /// The client objective whose conjugate is block `i`.
    pub fn client(&self, i: usize) -> QuadraticObjective {
        QuadraticObjective::new(1.0 / self.c[i], vec![-self.b[i] / self.c[i]]).expect("positive curvature")
    }
}

/// Stationarity `c_i x_i - b_i + nu = 0` with `sum x = 0` gives
/// `nu = (sum b_i/c_i) / (sum 1/c_i)`.
pub fn kkt_solve(inst: &QuadInstance) -> (Vec<f64>, f64) {
    let inv: f64 = inst.c.iter().map(|c| 1.0 / c).sum();
    let nu = inst.b.iter().zip(&inst.c).map(|(b, c)| b / c).sum::<f64>() / inv;
    let x: Vec<f64> = inst.b.iter().zip(&inst.c).map(|(b, c)| (b - nu) / c).collect();
    let h = inst.value(&x);
    (x, h)
}

/// All `tau`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, tau: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..tau).collect();
    if tau == 0 || tau > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut k = tau;
        while k > 0 && cur[k - 1] == n - tau + k - 1 {
            k -= 1;
        }
        if k == 0 {
            return out;
        }
        cur[k - 1] += 1;
        for j in k..tau {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// `e_I^T L^{-1} e_I`.
fn inv_weight(inst: &QuadInstance, subset: &[usize]) -> f64 {
    subset.iter().map(|&i| 1.0 / inst.c[i]).sum()
}

/// Every `tau`-subset with its probability under `P(I) ~ e_I^T L^{-1} e_I`.
pub fn subset_distribution(inst: &QuadInstance, tau: usize) -> Vec<(Vec<usize>, f64)> {
    let sets = subsets(inst.n(), tau);
    let weights: Vec<f64> = sets.iter().map(|s| inv_weight(inst, s)).collect();
    let total: f64 = weights.iter().sum();
    sets.into_iter().zip(weights).map(|(s, w)| (s, w / total)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOperators {
    pub subset: Vec<usize>,
    /// `L`-weighted projection onto `{sum_{i in I} x_i = 0}` composed with the mask `I_I`.
    pub p: DMatrix<f64>,
    /// `P_I L^{-1}`.
    pub g: DMatrix<f64>,
}

/// `P_I = I_I - L^{-1} e_I e_I^T / (e_I^T L^{-1} e_I)` and `G_I = P_I L^{-1}`.
pub fn build_operators(inst: &QuadInstance, subset: &[usize]) -> Result<BlockOperators> {
    let n = inst.n();
    if subset.len() < 2 {
        return Err(Error::InvalidArgument("subset needs at least 2 blocks".into()));
    }
    let mut mask = vec![false; n];
    for &i in subset {
        if i >= n || mask[i] {
            return Err(Error::InvalidArgument(format!("bad subset {subset:?}")));
        }
        mask[i] = true;
    }
    let s = inv_weight(inst, subset);
    let p = DMatrix::from_fn(n, n, |j, k| {
        let diag = if j == k && mask[j] { 1.0 } else { 0.0 };
        let rank1 = if mask[j] && mask[k] { 1.0 / (inst.c[j] * s) } else { 0.0 };
        diag - rank1
    });
    let g = DMatrix::from_fn(n, n, |j, k| p[(j, k)] / inst.c[k]);
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    Ok(BlockOperators { subset: sorted, p, g })
}

/// `G_I v` without forming the matrix.
pub fn apply_g(inst: &QuadInstance, subset: &[usize], v: &[f64]) -> Vec<f64> {
    let s = inv_weight(inst, subset);
    let m: f64 = subset.iter().map(|&i| v[i] / inst.c[i]).sum::<f64>() / s;
    let mut out = vec![0.0; v.len()];
    for &i in subset {
        out[i] = (v[i] - m) / inst.c[i];
    }
    out
}

/// One named identity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub lemma_id: String,
    pub max_abs_error: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(id: &str, err: f64, tol: f64) -> Self {
        CheckReport {
            lemma_id: id.to_string(),
            max_abs_error: err,
            pass: err <= tol,
        }
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn random_feasible<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let mut x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let mean = x.sum() / n as f64;
    x.add_scalar_mut(-mean);
    x
}

/// Symmetry of `G_I`, idempotence of `P_I`, `G_I = G_I^T L G_I`, and that
/// `P_I` fixes vectors supported on `I` with zero sum, over every `tau`-subset.
pub fn operator_checks<R: Rng + ?Sized>(inst: &QuadInstance, tau: usize, rng: &mut R) -> Result<Vec<CheckReport>> {
    let l = inst.l_matrix();
    let (mut sym, mut idem, mut gtlg, mut fix) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for s in subsets(inst.n(), tau) {
        let ops = build_operators(inst, &s)?;
        sym = sym.max(max_abs(&(&ops.g - ops.g.transpose())));
        idem = idem.max(max_abs(&(&ops.p * &ops.p - &ops.p)));
        gtlg = gtlg.max(max_abs(&(ops.g.transpose() * &l * &ops.g - &ops.g)));
        let mut x = DVector::zeros(inst.n());
        for &i in &s {
            x[i] = rng.gen_range(-1.0..1.0);
        }
        let mean = x.sum() / s.len() as f64;
        for &i in &s {
            x[i] -= mean;
        }
        fix = fix.max((&ops.p * &x - &x).amax());
    }
    Ok(vec![
        CheckReport::new("symmetric", sym, IDENTITY_TOL),
        CheckReport::new("idempotent", idem, IDENTITY_TOL),
        CheckReport::new("g_equals_gt_l_g", gtlg, IDENTITY_TOL),
        CheckReport::new("projection_fixes_feasible", fix, IDENTITY_TOL),
    ])
}

/// Exact expectations over the weighted subset distribution, compared with
/// `r P_[n]`, `r G_[n]`, the `L`-norm identity on random `x` and the inner
/// product identity on random feasible `x, y`, where `r = (tau-1)/(n-1)`.
pub fn enumerate_expectations<R: Rng + ?Sized>(inst: &QuadInstance, tau: usize, rng: &mut R) -> Result<Vec<CheckReport>> {
    let n = inst.n();
    if n > MAX_ENUMERATION_N {
        return Err(Error::InvalidArgument(format!(
            "enumeration needs n <= {MAX_ENUMERATION_N}, got {n}"
        )));
    }
    if tau < 2 || tau > n {
        return Err(Error::InvalidArgument(format!("need 2 <= tau <= n, got {tau}")));
    }
    let r = (tau - 1) as f64 / (n - 1) as f64;
    let l = inst.l_matrix();
    let full = build_operators(inst, &(0..n).collect::<Vec<_>>())?;
    let dist: Vec<(BlockOperators, f64)> = subset_distribution(inst, tau)
        .into_iter()
        .map(|(s, p)| build_operators(inst, &s).map(|o| (o, p)))
        .collect::<Result<_>>()?;
    let mut ep = DMatrix::zeros(n, n);
    let mut eg = DMatrix::zeros(n, n);
    for (ops, p) in &dist {
        ep += &ops.p * *p;
        eg += &ops.g * *p;
    }
    let p_err = max_abs(&(ep - &full.p * r));
    let g_err = max_abs(&(eg - &full.g * r));

    let mut norm_err = 0.0f64;
    let mut ip_err = 0.0f64;
    for _ in 0..50 {
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let gx = &full.g * &x;
        let rhs = r * gx.dot(&(&l * &gx));
        let lhs: f64 = dist
            .iter()
            .map(|(ops, p)| {
                let v = &ops.g * &x;
                p * v.dot(&(&l * &v))
            })
            .sum();
        norm_err = norm_err.max((lhs - rhs).abs());

        let xf = random_feasible(n, rng);
        let yf = random_feasible(n, rng);
        let lhs: f64 = dist.iter().map(|(ops, p)| p * (&ops.g * &xf).dot(&(&l * &yf))).sum();
        ip_err = ip_err.max((lhs - r * xf.dot(&yf)).abs());
    }
    Ok(vec![
        CheckReport::new("p_expectation", p_err, IDENTITY_TOL),
        CheckReport::new("g_expectation", g_err, IDENTITY_TOL),
        CheckReport::new("g_norm_expectation", norm_err, IDENTITY_TOL),
        CheckReport::new("g_inner_product_expectation", ip_err, IDENTITY_TOL),
    ])
}

/// Spectrum of `G_[n]`, the projected gradient at the optimum, and the
/// sandwich bounds on `||G_[n] grad h(x)||` at 100 random feasible points.
pub fn eigen_and_gradient_checks<R: Rng + ?Sized>(inst: &QuadInstance, rng: &mut R) -> Result<Vec<CheckReport>> {
    let n = inst.n();
    let full = build_operators(inst, &(0..n).collect::<Vec<_>>())?;
    let eig = SymmetricEigen::new(full.g.clone()).eigenvalues;
    let top = eig.max();
    let bottom = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let (x_star, _) = kkt_solve(inst);
    let grad_star = DVector::from_vec(inst.gradient(&x_star));
    let proj = full.p.transpose() * &grad_star;

    let (mu, lmax, lmin) = (inst.mu_min(), inst.l_max(), inst.l_min());
    let l = inst.l_matrix();
    let mut plain_violation = 0.0f64;
    let mut lnorm_violation = 0.0f64;
    for _ in 0..100 {
        let x = random_feasible(n, rng);
        let gap = inst.gap(x.as_slice(), &x_star);
        let v = &full.g * DVector::from_vec(inst.gradient(x.as_slice()));
        let plain = v.norm_squared();
        let lnorm = v.dot(&(&l * &v));
        plain_violation = plain_violation
            .max(2.0 * mu / (lmax * lmax) * gap - plain)
            .max(plain - 2.0 * lmax / (lmin * lmin) * gap);
        lnorm_violation = lnorm_violation
            .max(2.0 * mu / lmax * gap - lnorm)
            .max(lnorm - 2.0 * lmax / lmin * gap);
    }
    Ok(vec![
        CheckReport::new("eigen_upper", (top - 1.0 / lmin).max(0.0), IDENTITY_TOL),
        CheckReport::new("eigen_lower", bottom, IDENTITY_TOL),
        CheckReport::new("gradient_at_optimum", proj.amax(), IDENTITY_TOL),
        CheckReport::new("gradient_bound", plain_violation.max(0.0), IDENTITY_TOL),
        CheckReport::new("gradient_bound_l_norm", lnorm_violation.max(0.0), IDENTITY_TOL),
    ])
}

/// `E_I[h(x - G_I grad h(x))] <= h(x) - (r/2) ||G_[n] grad h(x)||_L^2` and the
/// contraction `E[h(y)] - h* <= (1 - r mu/L_max)(h(x) - h*)`, by enumeration
/// at 20 random feasible points. Reports the largest violation.
pub fn descent_lemma_check<R: Rng + ?Sized>(inst: &QuadInstance, tau: usize, rng: &mut R) -> Result<Vec<CheckReport>> {
    let n = inst.n();
    let r = (tau - 1) as f64 / (n - 1) as f64;
    let full = build_operators(inst, &(0..n).collect::<Vec<_>>())?;
    let l = inst.l_matrix();
    let (x_star, h_star) = kkt_solve(inst);
    let dist = subset_distribution(inst, tau);
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let x = random_feasible(n, rng);
        let xs = x.as_slice();
        let g = inst.gradient(xs);
        let expected: f64 = dist
            .iter()
            .map(|(s, p)| {
                let step = apply_g(inst, s, &g);
                let y: Vec<f64> = xs.iter().zip(&step).map(|(a, b)| a - b).collect();
                p * inst.value(&y)
            })
            .sum();
        let v = &full.g * DVector::from_vec(g);
        let h = inst.value(xs);
        let scale = 1.0 + h.abs();
        first = first.max((expected - (h - 0.5 * r * v.dot(&(&l * &v)))) / scale);
        let gap = inst.gap(xs, &x_star);
        second = second.max((expected - h_star - (1.0 - r * inst.mu_min() / inst.l_max()) * gap) / scale);
    }
    Ok(vec![
        CheckReport::new("descent", first.max(0.0), IDENTITY_TOL),
        CheckReport::new("descent_contraction", second.max(0.0), IDENTITY_TOL),
    ])
}

/// Every lemma check for one instance and participation level.
pub fn lemma_suite<R: Rng + ?Sized>(inst: &QuadInstance, tau: usize, rng: &mut R) -> Result<Vec<CheckReport>> {
    let mut out = operator_checks(inst, tau, rng)?;
    out.extend(enumerate_expectations(inst, tau, rng)?);
    out.extend(eigen_and_gradient_checks(inst, rng)?);
    out.extend(descent_lemma_check(inst, tau, rng)?);
    Ok(out)
}

/// Draws `tau`-subsets with `P(I) ~ e_I^T L^{-1} e_I` by rejection from the
/// uniform distribution. With scalar `L` it is exactly the federated
/// participant sampler, draw for draw.
#[derive(Debug, Clone)]
pub struct LWeightedSampler {
    tau: usize,
    inv_c: Vec<f64>,
    w_max: f64,
    uniform: bool,
}

impl LWeightedSampler {
    pub fn new(inst: &QuadInstance, tau: usize) -> Result<Self> {
        if tau < 2 || tau > inst.n() {
            return Err(Error::InvalidArgument(format!("need 2 <= tau <= n, got {tau}")));
        }
        let inv_c: Vec<f64> = inst.c.iter().map(|c| 1.0 / c).collect();
        let mut sorted = inv_c.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        Ok(LWeightedSampler {
            tau,
            w_max: sorted[..tau].iter().sum(),
            uniform: inst.is_scalar(),
            inv_c,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.inv_c.len();
        loop {
            let s = sample_participants(n, self.tau, rng);
            if self.uniform {
                return s;
            }
            let w: f64 = s.iter().map(|&i| self.inv_c[i]).sum();
            if rng.gen::<f64>() * self.w_max < w {
                return s;
            }
        }
    }
}

/// How the inexact solver realizes its block gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOracle {
    /// True gradients.
    Exact,
    /// `g = grad + sqrt(delta/2) (g_prev - grad)`: meets the accuracy
    /// requirement with equality, every call.
    Contraction,
    /// The federated solver's inexact oracle on the block's client objective.
    Engine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InexactParams {
    pub eta: f64,
    /// The oracle is called with accuracy `delta / 2`.
    pub delta: f64,
    pub kappa: f64,
}

impl InexactParams {
    /// `kappa = (r mu / (8 L_max)) m`, `delta = (1 - kappa)/2`, `eta = m`
    /// with `m = min{1/4, L_min^{3/2} / (4 r^{1/2} L_max^{3/2})}`.
    pub fn theorem(inst: &QuadInstance, tau: usize) -> Self {
        let r = (tau - 1) as f64 / (inst.n() - 1) as f64;
        let (lmax, lmin) = (inst.l_max(), inst.l_min());
        let m = f64::min(0.25, lmin.powf(1.5) / (4.0 * r.sqrt() * lmax.powf(1.5)));
        let kappa = r * inst.mu_min() / (8.0 * lmax) * m;
        InexactParams {
            eta: m,
            delta: (1.0 - kappa) / 2.0,
            kappa,
        }
    }

    /// The federated inexact setting: `kappa = r mu / (32 L_max)`,
    /// oracle accuracy `(1 - kappa)/4` and `eta = 1/4`.
    pub fn federated(inst: &QuadInstance, tau: usize) -> Self {
        let r = (tau - 1) as f64 / (inst.n() - 1) as f64;
        let kappa = r * inst.mu_min() / (32.0 * inst.l_max());
        InexactParams {
            eta: 0.25,
            delta: (1.0 - kappa) / 2.0,
            kappa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RbcdTrajectory {
    /// `x^(t)` for `t = 0..=T`.
    pub iterates: Vec<Vec<f64>>,
    /// `h(x^(t)) - h*`.
    pub gaps: Vec<f64>,
    /// Subsets drawn per iteration (two per accelerated iteration).
    pub draws: Vec<Vec<usize>>,
    /// Largest `|sum_i x_i| / (1 + ||x||)` over all iterates.
    pub max_infeasibility: f64,
}

fn infeasibility(x: &[f64]) -> f64 {
    x.iter().sum::<f64>().abs() / (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

impl RbcdTrajectory {
    fn start(inst: &QuadInstance, x0: Vec<f64>, x_star: &[f64]) -> Self {
        RbcdTrajectory {
            gaps: vec![inst.gap(&x0, x_star)],
            max_infeasibility: infeasibility(&x0),
            iterates: vec![x0],
            draws: Vec::new(),
        }
    }

    fn push(&mut self, inst: &QuadInstance, x: Vec<f64>, x_star: &[f64]) {
        self.gaps.push(inst.gap(&x, x_star));
        self.max_infeasibility = self.max_infeasibility.max(infeasibility(&x));
        self.iterates.push(x);
    }

    /// `t,gap` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,gap")?;
        for (t, g) in self.gaps.iter().enumerate() {
            writeln!(out, "{t},{g}")?;
        }
        Ok(())
    }
}

fn check_start(inst: &QuadInstance, x0: Option<&[f64]>) -> Result<Vec<f64>> {
    match x0 {
        None => Ok(vec![0.0; inst.n()]),
        Some(x) if x.len() != inst.n() => Err(Error::DimensionMismatch {
            expected: inst.n(),
            got: x.len(),
        }),
        Some(x) if infeasibility(x) > 1e-10 => Err(Error::InvalidArgument("start point is infeasible".into())),
        Some(x) => Ok(x.to_vec()),
    }
}

/// Inexact RBCD: `x+ = x - eta G_I g` where `g_i` for `i in I` comes from a
/// `delta/2`-accurate oracle warm-started at block `i`'s previous estimate.
pub fn inexact_rbcd(
    inst: &QuadInstance,
    tau: usize,
    iterations: usize,
    params: &InexactParams,
    oracle: BlockOracle,
    x0: Option<&[f64]>,
    seed: u64,
) -> Result<RbcdTrajectory> {
    let sampler = LWeightedSampler::new(inst, tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_star, _) = kkt_solve(inst);
    let mut x = check_start(inst, x0)?;
    let mut traj = RbcdTrajectory::start(inst, x.clone(), &x_star);
    let mut estimate = vec![0.0; inst.n()];
    let rho = (params.delta / 2.0).sqrt();
    let cfg = OracleConfig::inexact(params.delta / 2.0, LocalSolver::GradientDescent);
    for _ in 0..iterations {
        let s = sampler.sample(&mut rng);
        let grad = inst.gradient(&x);
        let mut g = vec![0.0; inst.n()];
        for &i in &s {
            g[i] = match oracle {
                BlockOracle::Exact => grad[i],
                BlockOracle::Contraction => grad[i] + rho * (estimate[i] - grad[i]),
                BlockOracle::Engine => {
                    inexact_conjugate_grad(&inst.client(i), &[x[i]], &[estimate[i]], params.delta / 2.0, &cfg, 0)?.w[0]
                }
            };
            estimate[i] = g[i];
        }
        let step = apply_g(inst, &s, &g);
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi -= params.eta * si;
        }
        traj.push(inst, x.clone(), &x_star);
        traj.draws.push(s);
    }
    Ok(traj)
}

/// Accelerated RBCD with exact block gradients, `a, b` built from `mu_min / L_max`:
/// `y = (1-a)x + a z`, `x+ = y - G_{I1} grad h(y)`, `u = mix1 z + mix2 y`,
/// `z+ = u - zstep G_{I2} grad h(y)`.
pub fn accelerated_rbcd(
    inst: &QuadInstance,
    tau: usize,
    iterations: usize,
    x0: Option<&[f64]>,
    z0: Option<&[f64]>,
    seed: u64,
) -> Result<RbcdTrajectory> {
    let n = inst.n();
    let coeffs = AccCoefficients::new(n, tau, inst.mu_min(), inst.l_max())?;
    let sampler = LWeightedSampler::new(inst, tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_star, _) = kkt_solve(inst);
    let mut x = check_start(inst, x0)?;
    let mut z = check_start(inst, z0)?;
    let mut traj = RbcdTrajectory::start(inst, x.clone(), &x_star);
    let a = coeffs.a;
    for _ in 0..iterations {
        let y: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| (1.0 - a) * xi + a * zi).collect();
        let grad = inst.gradient(&y);
        let s1 = sampler.sample(&mut rng);
        let d1 = apply_g(inst, &s1, &grad);
        x = y.iter().zip(&d1).map(|(yi, di)| yi - di).collect();
        let s2 = sampler.sample(&mut rng);
        let d2 = apply_g(inst, &s2, &grad);
        z = z
            .iter()
            .zip(&y)
            .zip(&d2)
            .map(|((zi, yi), di)| coeffs.mix1 * zi + coeffs.mix2 * yi - coeffs.zstep * di)
            .collect();
        traj.max_infeasibility = traj.max_infeasibility.max(infeasibility(&z));
        traj.push(inst, x.clone(), &x_star);
        traj.draws.push(s1);
        traj.draws.push(s2);
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateKind {
    /// Exact RBCD with unit step: factor `1 - r mu / L_max`.
    Exact,
    /// Inexact RBCD with the theorem constants and a worst-case oracle.
    Inexact,
    /// Accelerated RBCD: factor `1 - sqrt(mu/L_max) / (1/r + sqrt(mu/L_max))`.
    Accelerated,
}

impl std::str::FromStr for RateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RateKind::Exact),
            "inexact" => Ok(RateKind::Inexact),
            "accelerated" => Ok(RateKind::Accelerated),
            _ => Err(Error::InvalidArgument(format!("unknown rate check {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub kind: RateKind,
    pub horizon: usize,
    pub seeds: usize,
    pub mean_gap: f64,
    /// `factor^T * gap_0`.
    pub bound: f64,
    pub factor: f64,
    /// `mean_gap <= slack * bound`.
    pub pass: bool,
}

/// Per-iteration contraction factor claimed for `kind`.
pub fn rate_factor(inst: &QuadInstance, tau: usize, kind: RateKind) -> f64 {
    let r = (tau - 1) as f64 / (inst.n() - 1) as f64;
    match kind {
        RateKind::Exact => 1.0 - r * inst.mu_min() / inst.l_max(),
        RateKind::Inexact => 1.0 - InexactParams::theorem(inst, tau).kappa,
        RateKind::Accelerated => {
            let s = (inst.mu_min() / inst.l_max()).sqrt();
            1.0 - s / (1.0 / r + s)
        }
    }
}

/// Mean gap over `seeds` independent runs from `x = 0`, compared with the
/// claimed factor at each horizon.
pub fn rate_check(
    inst: &QuadInstance,
    tau: usize,
    kind: RateKind,
    horizons: &[usize],
    seeds: usize,
    slack: f64,
) -> Result<Vec<RateReport>> {
    let t_max = horizons.iter().copied().max().unwrap_or(0);
    let params = InexactParams::theorem(inst, tau);
    let runs: Vec<RbcdTrajectory> = (0..seeds as u64)
        .into_par_iter()
        .map(|seed| match kind {
            RateKind::Exact => {
                let p = InexactParams { eta: 1.0, ..params };
                inexact_rbcd(inst, tau, t_max, &p, BlockOracle::Exact, None, seed)
            }
            RateKind::Inexact => inexact_rbcd(inst, tau, t_max, &params, BlockOracle::Contraction, None, seed),
            RateKind::Accelerated => accelerated_rbcd(inst, tau, t_max, None, None, seed),
        })
        .collect::<Result<_>>()?;
    let factor = rate_factor(inst, tau, kind);
    let gap0 = runs.first().map_or(0.0, |r| r.gaps[0]);
    Ok(horizons
        .iter()
        .map(|&t| {
            let mean_gap = runs.iter().map(|r| r.gaps[t]).sum::<f64>() / seeds as f64;
            let bound = factor.powi(t as i32) * gap0;
            RateReport {
                kind,
                horizon: t,
                seeds,
                mean_gap,
                bound,
                factor,
                pass: mean_gap <= slack * bound,
            }
        })
        .collect())
}
