//! Client objectives: L2-regularized multinomial logistic regression and a
//! scalar-curvature quadratic used by the synthetic testbeds.
//!
//! MLR weights are a `num_classes x num_features` matrix stored row-major,
//! so entry `(k, j)` lives at `w[k * num_features + j]`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// Rows per parallel work item. Partial sums are combined in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 128;

/// A smooth, strongly convex client objective `f_i`.
pub trait ClientObjective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, w: &[f64]) -> f64;

    fn gradient(&self, w: &[f64]) -> Vec<f64>;

    fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        (self.value(w), self.gradient(w))
    }

    /// Hessian operator frozen at `w`.
    fn hessian(&self, w: &[f64]) -> Box<dyn HessianOp + '_>;

    fn hvp(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        self.hessian(w).apply(v)
    }

    /// `grad f*(y)` in closed form, when the objective has one.
    fn closed_form_conjugate(&self, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Strong convexity modulus.
    fn strong_convexity(&self) -> f64;

    /// Upper bound on the Hessian spectrum.
    fn smoothness(&self) -> f64;

    /// Number of finite-sum components; their gradients sum to `gradient`.
    fn num_components(&self) -> usize {
        1
    }

    /// Sum of the gradients of the listed components.
    fn components_gradient(&self, components: &[usize], w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for &c in components {
            assert_eq!(c, 0, "single-component objective");
            axpy(1.0, &self.gradient(w), &mut g);
        }
        g
    }

    /// Smoothness bound of a single component.
    fn component_smoothness(&self) -> f64 {
        self.smoothness()
    }
}

pub trait HessianOp {
    fn apply(&self, v: &[f64]) -> Vec<f64>;

    /// Diagonal of the Hessian, if cheaply available (used as a CG preconditioner).
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

/// `f(w) = (p/2)||w||^2 - <q, w>`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub p: f64,
    pub q: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(p: f64, q: Vec<f64>) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("curvature must be positive, got {p}")));
        }
        Ok(QuadraticObjective { p, q })
    }

    /// Exact minimizer of `f(w) - <y, w>`.
    pub fn conjugate_grad(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.q).map(|(yi, qi)| (yi + qi) / self.p).collect()
    }

    /// `f*(y) = ||y + q||^2 / (2p)`.
    pub fn conjugate_value(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.q).map(|(yi, qi)| (yi + qi) * (yi + qi)).sum::<f64>() / (2.0 * self.p)
    }
}

struct ScaledIdentity(f64);

impl HessianOp for ScaledIdentity {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| self.0 * x).collect()
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

impl ClientObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        0.5 * self.p * dot(w, w) - dot(&self.q, w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.q).map(|(wi, qi)| self.p * wi - qi).collect()
    }

    fn hessian(&self, _w: &[f64]) -> Box<dyn HessianOp + '_> {
        Box::new(ScaledIdentity(self.p))
    }

    fn closed_form_conjugate(&self, y: &[f64]) -> Option<Vec<f64>> {
        Some(self.conjugate_grad(y))
    }

    fn strong_convexity(&self) -> f64 {
        self.p
    }

    fn smoothness(&self) -> f64 {
        self.p
    }
}

/// Dense weight matrix with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub num_classes: usize,
    pub num_features: usize,
    pub weights: Vec<f64>,
}

const PARAMS_MAGIC: &[u8; 8] = b"FDCDW001";

impl ModelParams {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        ModelParams {
            num_classes,
            num_features,
            weights: vec![0.0; num_classes * num_features],
        }
    }

    pub fn from_vec(num_classes: usize, num_features: usize, weights: Vec<f64>) -> Result<Self> {
        let p = ModelParams {
            num_classes,
            num_features,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.num_classes * self.num_features
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: self.weights.len(),
            });
        }
        if !crate::linalg::all_finite(&self.weights) {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    /// Little-endian binary: magic, two u64 shape fields, then the weights.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(PARAMS_MAGIC)?;
        out.write_all(&(self.num_classes as u64).to_le_bytes())?;
        out.write_all(&(self.num_features as u64).to_le_bytes())?;
        for w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Serde("bad model file header".into()));
        }
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let num_classes = u64::from_le_bytes(buf) as usize;
        input.read_exact(&mut buf)?;
        let num_features = u64::from_le_bytes(buf) as usize;
        let dim = num_classes
            .checked_mul(num_features)
            .ok_or_else(|| Error::Serde("model shape overflows".into()))?;
        let mut weights = Vec::with_capacity(dim);
        for _ in 0..dim {
            input.read_exact(&mut buf)?;
            weights.push(f64::from_le_bytes(buf));
        }
        Self::from_vec(num_classes, num_features, weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub alpha: f64,
    pub beta: f64,
}

/// `sum_{r in rows} CE(softmax(W x_r), y_r) + (ridge/2)||w||^2`.
pub struct MlrObjective {
    data: Arc<Dataset>,
    rows: Vec<usize>,
    ridge: f64,
    smoothness: f64,
}

impl MlrObjective {
    pub fn new(data: Arc<Dataset>, rows: Vec<usize>, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge weight must be positive, got {ridge}")));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= data.len()) {
            return Err(Error::InvalidArgument(format!("row {r} out of range")));
        }
        let smoothness = ridge + 0.5 * gram_lambda_max(&data, &rows);
        Ok(MlrObjective {
            data,
            rows,
            ridge,
            smoothness,
        })
    }

    pub fn for_shard(data: Arc<Dataset>, shard: &ClientShard, gamma: f64) -> Result<Self> {
        Self::new(data, shard.indices.clone(), gamma)
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    pub fn num_features(&self) -> usize {
        self.data.num_features()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    fn scores(&self, w: &[f64], row: usize, out: &mut [f64]) {
        let p = self.num_features();
        let ex = self.data.example(row);
        for (k, s) in out.iter_mut().enumerate() {
            let wk = &w[k * p..(k + 1) * p];
            *s = ex.features().map(|(j, x)| wk[j] * x).sum();
        }
    }

    /// Loss-only sum over a set of rows, without the ridge term.
    fn loss_rows(&self, w: &[f64], rows: &[usize]) -> f64 {
        let mut s = vec![0.0; self.num_classes()];
        rows.iter()
            .map(|&r| {
                self.scores(w, r, &mut s);
                log_sum_exp(&s) - s[self.data.example(r).label]
            })
            .sum()
    }

    /// Adds the loss gradient of `rows` into `g` and returns their loss.
    fn loss_grad_rows(&self, w: &[f64], rows: &[usize], g: &mut [f64]) -> f64 {
        let p = self.num_features();
        let mut s = vec![0.0; self.num_classes()];
        let mut loss = 0.0;
        for &r in rows {
            self.scores(w, r, &mut s);
            let label = self.data.example(r).label;
            let lse = log_sum_exp(&s);
            loss += lse - s[label];
            let ex = self.data.example(r);
            for (k, &sk) in s.iter().enumerate() {
                let coef = (sk - lse).exp() - if k == label { 1.0 } else { 0.0 };
                if coef != 0.0 {
                    let gk = &mut g[k * p..(k + 1) * p];
                    for (j, x) in ex.features() {
                        gk[j] += coef * x;
                    }
                }
            }
        }
        loss
    }

    fn check_dim(&self, w: &[f64]) {
        assert_eq!(w.len(), self.dim(), "weight vector has wrong dimension");
    }

    /// Fraction of `rows` whose argmax prediction (ties to the lowest class)
    /// matches the label.
    pub fn accuracy(data: &Dataset, w: &[f64], rows: Option<&[usize]>) -> f64 {
        let k = data.num_classes();
        let p = data.num_features();
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..data.len()).collect();
                &all
            }
        };
        if rows.is_empty() {
            return 0.0;
        }
        let correct: usize = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .filter(|&&r| {
                        let ex = data.example(r);
                        let mut best = 0;
                        let mut best_score = f64::NEG_INFINITY;
                        for c in 0..k {
                            let wc = &w[c * p..(c + 1) * p];
                            let s: f64 = ex.features().filter(|&(j, _)| j < p).map(|(j, x)| wc[j] * x).sum();
                            if s > best_score {
                                best_score = s;
                                best = c;
                            }
                        }
                        best == ex.label
                    })
                    .count()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        correct as f64 / rows.len() as f64
    }
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(s: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(s);
    for (o, x) in out.iter_mut().zip(s) {
        *o = (x - lse).exp();
    }
}

/// Ordered reduction of per-chunk `(scalar, vector)` partial sums.
fn reduce_chunks<F>(rows: &[usize], dim: usize, f: F) -> (f64, Vec<f64>)
where
    F: Fn(&[usize], &mut [f64]) -> f64 + Sync,
{
    let parts: Vec<(f64, Vec<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; dim];
            let v = f(chunk, &mut g);
            (v, g)
        })
        .collect();
    let mut total = 0.0;
    let mut acc = vec![0.0; dim];
    for (v, g) in &parts {
        total += v;
        axpy(1.0, g, &mut acc);
    }
    (total, acc)
}

impl ClientObjective for MlrObjective {
    fn dim(&self) -> usize {
        self.num_classes() * self.num_features()
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.check_dim(w);
        let parts: Vec<f64> = self
            .rows
            .par_chunks(CHUNK)
            .map(|c| self.loss_rows(w, c))
            .collect();
        parts.iter().sum::<f64>() + 0.5 * self.ridge * dot(w, w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        self.value_and_gradient(w).1
    }

    fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        self.check_dim(w);
        let (loss, mut g) = reduce_chunks(&self.rows, self.dim(), |c, g| self.loss_grad_rows(w, c, g));
        axpy(self.ridge, w, &mut g);
        (loss + 0.5 * self.ridge * dot(w, w), g)
    }

    fn hessian(&self, w: &[f64]) -> Box<dyn HessianOp + '_> {
        self.check_dim(w);
        let k = self.num_classes();
        let probs: Vec<f64> = self
            .rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut s = vec![0.0; k];
                let mut out = vec![0.0; chunk.len() * k];
                for (i, &r) in chunk.iter().enumerate() {
                    self.scores(w, r, &mut s);
                    softmax_into(&s, &mut out[i * k..(i + 1) * k]);
                }
                out
            })
            .collect::<Vec<_>>()
            .concat();
        Box::new(MlrHessian { obj: self, probs })
    }

    fn strong_convexity(&self) -> f64 {
        self.ridge
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn num_components(&self) -> usize {
        self.rows.len().max(1)
    }

    fn components_gradient(&self, components: &[usize], w: &[f64]) -> Vec<f64> {
        self.check_dim(w);
        let m = self.num_components() as f64;
        let rows: Vec<usize> = components
            .iter()
            .filter(|&&c| c < self.rows.len())
            .map(|&c| self.rows[c])
            .collect();
        let (_, mut g) = reduce_chunks(&rows, self.dim(), |c, g| self.loss_grad_rows(w, c, g));
        axpy(self.ridge * components.len() as f64 / m, w, &mut g);
        g
    }

    fn component_smoothness(&self) -> f64 {
        let max_sq = self
            .rows
            .iter()
            .map(|&r| self.data.example(r).norm_sq())
            .fold(0.0, f64::max);
        0.5 * max_sq + self.ridge / self.num_components() as f64
    }
}

struct MlrHessian<'a> {
    obj: &'a MlrObjective,
    /// Softmax probabilities, one row of `num_classes` per objective row.
    probs: Vec<f64>,
}

impl HessianOp for MlrHessian<'_> {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let obj = self.obj;
        let k = obj.num_classes();
        let p = obj.num_features();
        let indexed: Vec<(usize, usize)> = obj.rows.iter().copied().enumerate().collect();
        let parts: Vec<Vec<f64>> = indexed
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut out = vec![0.0; k * p];
                let mut u = vec![0.0; k];
                for &(i, r) in chunk {
                    let ex = obj.data.example(r);
                    let pr = &self.probs[i * k..(i + 1) * k];
                    for (c, uc) in u.iter_mut().enumerate() {
                        let vc = &v[c * p..(c + 1) * p];
                        *uc = ex.features().map(|(j, x)| vc[j] * x).sum();
                    }
                    let pu = dot(pr, &u);
                    for c in 0..k {
                        let t = pr[c] * (u[c] - pu);
                        if t != 0.0 {
                            let oc = &mut out[c * p..(c + 1) * p];
                            for (j, x) in ex.features() {
                                oc[j] += t * x;
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let mut acc = vec![0.0; k * p];
        for part in &parts {
            axpy(1.0, part, &mut acc);
        }
        axpy(obj.ridge, v, &mut acc);
        acc
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        let obj = self.obj;
        let k = obj.num_classes();
        let p = obj.num_features();
        let mut d = vec![obj.ridge; k * p];
        for (i, &r) in obj.rows.iter().enumerate() {
            let pr = &self.probs[i * k..(i + 1) * k];
            for (c, &pc) in pr.iter().enumerate() {
                let h = pc * (1.0 - pc);
                for (j, x) in obj.data.example(r).features() {
                    d[c * p + j] += h * x * x;
                }
            }
        }
        Some(d)
    }
}

/// Largest eigenvalue of `X^T X` over the given rows, by power iteration
/// (at least 50 steps, then until the Rayleigh quotient settles).
pub fn gram_lambda_max(data: &Dataset, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let p = data.num_features();
    let gram = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; p];
        for &r in rows {
            let ex = data.example(r);
            let t: f64 = ex.features().map(|(j, x)| v[j] * x).sum();
            for (j, x) in ex.features() {
                out[j] += t * x;
            }
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..p).map(|_| rng.gen_range(0.5..1.5)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for it in 0..1000 {
        let av = gram(&v);
        let next = dot(&v, &av);
        let nv = norm(&av);
        if nv == 0.0 {
            return 0.0;
        }
        v = av.into_iter().map(|x| x / nv).collect();
        let settled = (next - lambda).abs() <= 1e-12 * next.abs();
        lambda = next;
        if it >= 50 && settled {
            break;
        }
    }
    // One more application of the converged vector gives ||A v|| >= v^T A v.
    norm(&gram(&v)).max(lambda)
}

/// `alpha = gamma`, `beta = gamma + max_i lambda_max(X_i^T X_i) / 2`.
pub fn estimate_curvature(data: &Dataset, shards: &[ClientShard], gamma: f64) -> CurvatureEstimate {
    let lam = shards
        .iter()
        .map(|s| gram_lambda_max(data, &s.indices))
        .fold(0.0, f64::max);
    let beta = (gamma + 0.5 * lam).max(gamma);
    CurvatureEstimate { alpha: gamma, beta }
}

fn shard_objective(data: &Arc<Dataset>, shard: &ClientShard, gamma: f64, w: &ModelParams) -> Result<MlrObjective> {
    if w.num_classes != data.num_classes() || w.num_features != data.num_features() {
        return Err(Error::DimensionMismatch {
            expected: data.num_classes() * data.num_features(),
            got: w.dim(),
        });
    }
    w.validate()?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument("gamma must be positive".into()));
    }
    // The smoothness estimate is not needed here; skip the power iteration.
    if let Some(&r) = shard.indices.iter().find(|&&r| r >= data.len()) {
        return Err(Error::InvalidArgument(format!("row {r} out of range")));
    }
    Ok(MlrObjective {
        data: Arc::clone(data),
        rows: shard.indices.clone(),
        ridge: gamma,
        smoothness: f64::NAN,
    })
}

pub fn local_loss(w: &ModelParams, data: &Arc<Dataset>, shard: &ClientShard, gamma: f64) -> Result<f64> {
    Ok(shard_objective(data, shard, gamma, w)?.value(&w.weights))
}

pub fn local_grad(w: &ModelParams, data: &Arc<Dataset>, shard: &ClientShard, gamma: f64) -> Result<Vec<f64>> {
    Ok(shard_objective(data, shard, gamma, w)?.gradient(&w.weights))
}

pub fn local_hvp(
    w: &ModelParams,
    v: &[f64],
    data: &Arc<Dataset>,
    shard: &ClientShard,
    gamma: f64,
) -> Result<Vec<f64>> {
    if v.len() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: w.dim(),
            got: v.len(),
        });
    }
    Ok(shard_objective(data, shard, gamma, w)?.hvp(&w.weights, v))
}

/// Settings for the damped Newton-CG minimizer.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    pub max_cg_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iterations: 100,
            max_cg_iterations: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub w: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f(w) - <y, w>` from `w0` until the gradient norm is at most
/// `target`, with Armijo backtracking and truncated preconditioned CG.
pub fn newton_cg(
    f: &dyn ClientObjective,
    y: Option<&[f64]>,
    w0: &[f64],
    target: f64,
    opts: NewtonOptions,
) -> NewtonResult {
    let shifted = |w: &[f64]| -> (f64, Vec<f64>) {
        let (mut v, mut g) = f.value_and_gradient(w);
        if let Some(y) = y {
            v -= dot(y, w);
            axpy(-1.0, y, &mut g);
        }
        (v, g)
    };
    let mut w = w0.to_vec();
    let (mut val, mut g) = shifted(&w);
    let mut gn = norm(&g);
    let mut iterations = 0;
    while gn > target && iterations < opts.max_iterations && gn.is_finite() {
        let h = f.hessian(&w);
        let forcing = gn.sqrt().min(0.1);
        let d = pcg(&*h, &g, forcing * gn, opts.max_cg_iterations);
        let slope = dot(&g, &d);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = w.iter().zip(&d).map(|(wi, di)| wi + t * di).collect();
            let (tv, tg) = shifted(&trial);
            let tgn = norm(&tg);
            let armijo = tv <= val + 1e-4 * t * slope;
            // Near the optimum the objective change drowns in roundoff;
            // then accept on gradient decrease.
            let flat = (tv - val).abs() <= 1e-12 * val.abs().max(1.0) && tgn < gn;
            if tv.is_finite() && (armijo || flat) {
                accepted = Some((trial, tv, tg, tgn));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((nw, nv, ng, ngn)) => {
                w = nw;
                val = nv;
                g = ng;
                gn = ngn;
            }
            None => break,
        }
    }
    NewtonResult {
        w,
        value: val,
        grad_norm: gn,
        iterations,
        converged: gn <= target,
    }
}

/// Solves `H d = -g` to residual `tol` with Jacobi preconditioning when
/// the operator exposes its diagonal.
fn pcg(h: &dyn HessianOp, g: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let n = g.len();
    let inv_diag = h.diagonal().map(|d| d.into_iter().map(|x| 1.0 / x).collect::<Vec<_>>());
    let precond = |r: &[f64]| -> Vec<f64> {
        match &inv_diag {
            Some(m) => r.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => r.to_vec(),
        }
    };
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        if norm(&r) <= tol {
            break;
        }
        let hp = h.apply(&p);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            break;
        }
        let step = rz / php;
        axpy(step, &p, &mut x);
        axpy(-step, &hp, &mut r);
        z = precond(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    if x.iter().all(|v| *v == 0.0) {
        // No progress (e.g. zero iterations allowed): fall back to steepest descent.
        return r;
    }
    x
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub w_star: ModelParams,
    /// `F(w*)` for `F = sum_i f_i` with global ridge `n_clients * gamma`.
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Centralized minimizer of `F(w) = sum_i f_i(w)`. With every client carrying
/// `(gamma/2)||w||^2`, the global ridge weight is `n_clients * gamma`.
/// Stops at `||grad F|| <= tol * max(1, ||grad F(0)||)`.
pub fn solve_reference(data: Arc<Dataset>, n_clients: usize, gamma: f64, tol: f64) -> Result<Reference> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let k = data.num_classes();
    let p = data.num_features();
    let obj = MlrObjective {
        data,
        rows,
        ridge: n_clients as f64 * gamma,
        smoothness: f64::NAN,
    };
    let w0 = vec![0.0; k * p];
    let g0 = norm(&obj.gradient(&w0));
    let target = tol * g0.max(1.0);
    let res = newton_cg(&obj, None, &w0, target, NewtonOptions::default());
    if !res.converged {
        return Err(Error::NonConvergence {
            iterations: res.iterations,
            grad_norm: res.grad_norm,
            best: res.w,
        });
    }
    Ok(Reference {
        f_star: res.value,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
        w_star: ModelParams::from_vec(k, p, res.w)?,
    })
}
