//! Per-client dual variables, conjugate-gradient oracles and the server-side
//! direction adjustment.
//!
//! For a client objective `f`, the conjugate gradient at `y` is
//! `argmin_w f(w) - <w, y>`. Every oracle here minimizes that shifted
//! objective and measures accuracy by the residual `||grad f(w) - y||`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm, norm_sq};
use crate::model::{newton_cg, ClientObjective, NewtonOptions};

/// Relative residual target of the exact oracle.
pub const EXACT_RESIDUAL_TOL: f64 = 1e-8;

/// Relative tolerance of the `sum_i y_i = 0` invariant.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccState {
    pub z: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub round: usize,
    pub y: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<AccState>,
    /// Warm starts for the inexact oracle: the last primal model each client produced.
    pub last_w: Vec<Vec<f64>>,
}

impl DualState {
    /// All-zero state for `n` clients in dimension `d`.
    pub fn zeros(n: usize, d: usize, accelerated: bool) -> Self {
        let zero = || vec![vec![0.0; d]; n];
        DualState {
            round: 0,
            y: zero(),
            acc: accelerated.then(|| AccState {
                z: zero(),
                v: zero(),
                u: zero(),
            }),
            last_w: zero(),
        }
    }

    pub fn n_clients(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    /// Checks `sum_i y_i = 0` (and the same for `z`, `v` when present).
    pub fn check_feasible(&self) -> Result<()> {
        let mut families = vec![("y", &self.y)];
        if let Some(acc) = &self.acc {
            families.push(("z", &acc.z));
            families.push(("v", &acc.v));
        }
        for (name, vs) in families {
            let r = feasibility_residual(vs);
            let scale = 1.0 + vs.iter().map(|v| norm(v)).fold(0.0, f64::max);
            if !(r <= FEASIBILITY_TOL * scale) {
                return Err(Error::InvalidArgument(format!(
                    "{name} infeasible: ||sum|| = {r:.3e}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let st: DualState = serde_json::from_str(s)?;
        let (n, d) = (st.n_clients(), st.dim());
        let shape_ok = |vs: &Vec<Vec<f64>>| vs.len() == n && vs.iter().all(|v| v.len() == d);
        let mut ok = shape_ok(&st.y) && shape_ok(&st.last_w);
        if let Some(acc) = &st.acc {
            ok &= shape_ok(&acc.z) && shape_ok(&acc.v) && shape_ok(&acc.u);
        }
        if !ok {
            return Err(Error::Serde("checkpoint vectors have inconsistent shapes".into()));
        }
        Ok(st)
    }
}

/// `||sum_i v_i||`.
pub fn feasibility_residual(vs: &[Vec<f64>]) -> f64 {
    let d = vs.first().map_or(0, Vec::len);
    norm(&crate::linalg::sum_vectors(d, vs))
}

/// Diagonal of the scaling matrix, one positive weight per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingWeights {
    lambda: Vec<f64>,
}

impl ScalingWeights {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if let Some(l) = lambda.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!("scaling weight must be positive, got {l}")));
        }
        Ok(ScalingWeights { lambda })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    /// `lambda_i = 1/alpha` for every client.
    pub fn from_alpha(n: usize, alpha: f64) -> Result<Self> {
        Self::uniform(n, 1.0 / alpha)
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum OracleMode {
    Exact,
    Inexact { delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalSolver {
    Newton,
    GradientDescent,
    Svrg,
}

impl std::str::FromStr for LocalSolver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton" => Ok(LocalSolver::Newton),
            "gd" | "gradient-descent" => Ok(LocalSolver::GradientDescent),
            "svrg" => Ok(LocalSolver::Svrg),
            _ => Err(Error::InvalidArgument(format!("unknown local solver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub local_solver: LocalSolver,
    /// Cap on Newton iterations, gradient steps or stochastic steps.
    pub max_local_steps: usize,
    /// Cap on CG iterations inside one Newton step.
    pub max_cg_iterations: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mode: OracleMode::Exact,
            local_solver: LocalSolver::Newton,
            max_local_steps: 50,
            max_cg_iterations: 500,
        }
    }
}

impl OracleConfig {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn inexact(delta: f64, local_solver: LocalSolver) -> Self {
        OracleConfig {
            mode: OracleMode::Inexact { delta },
            local_solver,
            max_local_steps: match local_solver {
                LocalSolver::Newton => 10,
                _ => 1_000_000,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let OracleMode::Inexact { delta } = self.mode {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::Config(format!("delta must lie in (0,1), got {delta}")));
            }
        }
        if self.max_local_steps == 0 {
            return Err(Error::Config("max_local_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub w: Vec<f64>,
    /// Local steps spent (Newton iterations, gradient steps or stochastic steps).
    pub steps: usize,
    /// Final residual `||grad f(w) - y||`.
    pub residual: f64,
    /// Whether the residual target was met.
    pub converged: bool,
}

fn residual_vec(f: &dyn ClientObjective, w: &[f64], y: &[f64]) -> Vec<f64> {
    let mut g = f.gradient(w);
    axpy(-1.0, y, &mut g);
    g
}

fn check_inputs(f: &dyn ClientObjective, y: &[f64], warm: &[f64]) -> Result<()> {
    for v in [y, warm] {
        if v.len() != f.dim() {
            return Err(Error::DimensionMismatch {
                expected: f.dim(),
                got: v.len(),
            });
        }
    }
    if !all_finite(y) || !all_finite(warm) {
        return Err(Error::NonFinite("oracle input".into()));
    }
    Ok(())
}

/// Runs the configured local solver on `f(w) - <w, y>` from `warm` until the
/// residual drops to `target` or the step cap is hit.
fn local_solve(
    f: &dyn ClientObjective,
    y: &[f64],
    warm: &[f64],
    target: f64,
    cfg: &OracleConfig,
    seed: u64,
) -> OracleOutput {
    match cfg.local_solver {
        LocalSolver::Newton => {
            let res = newton_cg(
                f,
                Some(y),
                warm,
                target,
                NewtonOptions {
                    max_iterations: cfg.max_local_steps,
                    max_cg_iterations: cfg.max_cg_iterations,
                },
            );
            OracleOutput {
                w: res.w,
                steps: res.iterations,
                residual: res.grad_norm,
                converged: res.converged,
            }
        }
        LocalSolver::GradientDescent => {
            let step = 1.0 / f.smoothness();
            let mut w = warm.to_vec();
            let mut g = residual_vec(f, &w, y);
            let mut r = norm(&g);
            let mut steps = 0;
            while r > target && steps < cfg.max_local_steps {
                axpy(-step, &g, &mut w);
                g = residual_vec(f, &w, y);
                r = norm(&g);
                steps += 1;
            }
            OracleOutput {
                w,
                steps,
                residual: r,
                converged: r <= target,
            }
        }
        LocalSolver::Svrg => svrg(f, y, warm, target, cfg.max_local_steps, seed),
    }
}

fn svrg(f: &dyn ClientObjective, y: &[f64], warm: &[f64], target: f64, cap: usize, seed: u64) -> OracleOutput {
    let m = f.num_components();
    let mf = m as f64;
    // Each sampled term m * grad c_j is (m * L_comp)-smooth.
    let step = 1.0 / (4.0 * mf * f.component_smoothness());
    let epoch_len = (2 * m).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = warm.to_vec();
    let mut full = residual_vec(f, &w, y);
    let mut r = norm(&full);
    let mut steps = 0;
    while r > target && steps < cap {
        let snapshot = w.clone();
        for _ in 0..epoch_len.min(cap - steps) {
            let j = rng.gen_range(0..m);
            let gw = f.components_gradient(&[j], &w);
            let gs = f.components_gradient(&[j], &snapshot);
            let mut d = full.clone();
            for ((di, a), b) in d.iter_mut().zip(&gw).zip(&gs) {
                *di += mf * (a - b);
            }
            axpy(-step, &d, &mut w);
            steps += 1;
        }
        full = residual_vec(f, &w, y);
        r = norm(&full);
    }
    OracleOutput {
        w,
        steps,
        residual: r,
        converged: r <= target,
    }
}

/// `grad f*(y)`: the closed form when the objective has one (one local step),
/// otherwise the local solver run to residual `1e-8 * (1 + ||y||)`. Failing to
/// reach the target is reported through `converged`, not as an error.
pub fn exact_conjugate_grad(
    f: &dyn ClientObjective,
    y: &[f64],
    warm: &[f64],
    cfg: &OracleConfig,
) -> Result<OracleOutput> {
    check_inputs(f, y, warm)?;
    if let Some(w) = f.closed_form_conjugate(y) {
        let residual = norm(&residual_vec(f, &w, y));
        return Ok(OracleOutput {
            w,
            steps: 1,
            residual,
            converged: true,
        });
    }
    let target = EXACT_RESIDUAL_TOL * (1.0 + norm(y));
    let cfg = OracleConfig {
        local_solver: match cfg.local_solver {
            // Stochastic solvers cannot certify a tight residual cheaply.
            LocalSolver::Svrg => LocalSolver::Newton,
            s => s,
        },
        ..*cfg
    };
    let out = local_solve(f, y, warm, target, &cfg, 0);
    if !all_finite(&out.w) {
        return Err(Error::NonFinite("exact oracle output".into()));
    }
    Ok(out)
}

/// delta-inexact conjugate gradient warm-started at `warm`. Stops once
/// `||grad f(w) - y|| <= sqrt(delta) * (alpha/beta) * ||grad f(warm) - y||`,
/// which guarantees `||w - grad f*(y)||^2 <= delta * ||warm - grad f*(y)||^2`.
pub fn inexact_conjugate_grad(
    f: &dyn ClientObjective,
    y: &[f64],
    warm: &[f64],
    delta: f64,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<OracleOutput> {
    check_inputs(f, y, warm)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {delta}")));
    }
    let r0 = norm(&residual_vec(f, warm, y));
    if r0 == 0.0 {
        return Ok(OracleOutput {
            w: warm.to_vec(),
            steps: 0,
            residual: 0.0,
            converged: true,
        });
    }
    let target = delta.sqrt() * (f.strong_convexity() / f.smoothness()) * r0;
    let out = local_solve(f, y, warm, target, cfg, seed);
    if !all_finite(&out.w) {
        return Err(Error::NonFinite("inexact oracle output".into()));
    }
    Ok(out)
}

/// Dispatches on `cfg.mode`.
pub fn conjugate_grad(
    f: &dyn ClientObjective,
    y: &[f64],
    warm: &[f64],
    cfg: &OracleConfig,
    seed: u64,
) -> Result<OracleOutput> {
    match cfg.mode {
        OracleMode::Exact => exact_conjugate_grad(f, y, warm, cfg),
        OracleMode::Inexact { delta } => inexact_conjugate_grad(f, y, warm, delta, cfg, seed),
    }
}

/// Scaled projection of the uploaded models onto the zero-sum subspace of
/// the participant set:
/// `w_hat_i = w_i/lambda_i - (1/lambda_i) / (sum_j 1/lambda_j) * sum_j w_j/lambda_j`.
pub fn adjust_directions(
    uploaded: &BTreeMap<usize, Vec<f64>>,
    weights: &ScalingWeights,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    if uploaded.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "direction adjustment needs at least 2 participants, got {}",
            uploaded.len()
        )));
    }
    let d = uploaded.values().next().map_or(0, Vec::len);
    let mut inv_sum = 0.0;
    let mut weighted = vec![0.0; d];
    for (&i, w) in uploaded {
        let lam = *weights
            .lambda()
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no scaling weight for client {i}")))?;
        if w.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: w.len() });
        }
        if !all_finite(w) {
            return Err(Error::NonFinite(format!("model uploaded by client {i}")));
        }
        inv_sum += 1.0 / lam;
        axpy(1.0 / lam, w, &mut weighted);
    }
    Ok(uploaded
        .iter()
        .map(|(&i, w)| {
            let inv = 1.0 / weights.lambda()[i];
            let shift = inv / inv_sum;
            let out = w.iter().zip(&weighted).map(|(wi, m)| inv * wi - shift * m).collect();
            (i, out)
        })
        .collect())
}

/// `v_i -= eta * d_i` for every client in `directions`.
pub fn apply_dual_step(vs: &mut [Vec<f64>], directions: &BTreeMap<usize, Vec<f64>>, eta: f64) -> Result<()> {
    for (&i, d) in directions {
        if !all_finite(d) {
            return Err(Error::NonFinite(format!("direction for client {i}")));
        }
        let vi = vs
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("client {i} out of range")))?;
        if vi.len() != d.len() {
            return Err(Error::DimensionMismatch {
                expected: vi.len(),
                got: d.len(),
            });
        }
    }
    for (&i, d) in directions {
        axpy(-eta, d, &mut vs[i]);
    }
    Ok(())
}

/// `f*(y) = <y, w> - f(w)` at `w = grad f*(y)`.
pub fn conjugate_value(f: &dyn ClientObjective, y: &[f64], w: &[f64]) -> f64 {
    dot(y, w) - f.value(w)
}

/// Dual objective `G(y) = sum_i f_i*(y_i)` with the conjugate gradients used.
pub fn dual_objective(
    clients: &[&dyn ClientObjective],
    y: &[Vec<f64>],
    warm: &[Vec<f64>],
    cfg: &OracleConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut ws = Vec::with_capacity(clients.len());
    for ((f, yi), wi) in clients.iter().zip(y).zip(warm) {
        let out = exact_conjugate_grad(*f, yi, wi, cfg)?;
        total += conjugate_value(*f, yi, &out.w);
        ws.push(out.w);
    }
    Ok((total, ws))
}

/// Squared Euclidean size of a family of vectors.
pub fn family_norm_sq(vs: &[Vec<f64>]) -> f64 {
    vs.iter().map(|v| norm_sq(v)).sum()
}
