use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{axpy, norm};
use crate::model::{solve_reference, ClientObjective, MlrObjective, QuadraticObjective};

pub type AccuracyFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Optimum of `F = sum_i f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoint {
    pub w_star: Vec<f64>,
    pub f_star: f64,
}

/// A federated problem: one objective per client plus what the metrics need.
#[derive(Clone)]
pub struct FedProblem {
    pub clients: Vec<Arc<dyn ClientObjective>>,
    /// Strong convexity shared by all clients.
    pub alpha: f64,
    /// Smoothness bound shared by all clients.
    pub beta: f64,
    /// Local sample counts (FedAvg weights, minibatch sizes).
    pub shard_sizes: Vec<usize>,
    /// Divisor turning `F` into the averaged risk reported as the primal gap.
    pub normalizer: f64,
    pub reference: Option<ReferencePoint>,
    pub test_accuracy: Option<AccuracyFn>,
}

impl FedProblem {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients.first().map_or(0, |c| c.dim())
    }

    /// `F(w) = sum_i f_i(w)`, summed in client order.
    pub fn primal_value(&self, w: &[f64]) -> f64 {
        let parts: Vec<f64> = self.clients.par_iter().map(|c| c.value(w)).collect();
        parts.iter().sum()
    }

    pub fn primal_gradient(&self, w: &[f64]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self.clients.par_iter().map(|c| c.gradient(w)).collect();
        crate::linalg::sum_vectors(self.dim(), &parts)
    }

    /// `max_i ||grad f_i(w*)||`.
    pub fn heterogeneity(&self) -> Option<f64> {
        let r = self.reference.as_ref()?;
        Some(
            self.clients
                .iter()
                .map(|c| norm(&c.gradient(&r.w_star)))
                .fold(0.0, f64::max),
        )
    }

    /// Quadratic clients `f_i(w) = (p_i/2)||w||^2 - <q_i, w>` with the exact optimum.
    pub fn quadratic(p: Vec<f64>, q: Vec<Vec<f64>>) -> Result<Self> {
        if p.len() != q.len() || p.len() < 2 {
            return Err(Error::InvalidArgument("need matching p, q for at least 2 clients".into()));
        }
        let d = q[0].len();
        let mut clients: Vec<Arc<dyn ClientObjective>> = Vec::new();
        for (pi, qi) in p.iter().zip(&q) {
            if qi.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: qi.len() });
            }
            clients.push(Arc::new(QuadraticObjective::new(*pi, qi.clone())?));
        }
        let psum: f64 = p.iter().sum();
        let mut w_star = vec![0.0; d];
        for qi in &q {
            axpy(1.0 / psum, qi, &mut w_star);
        }
        let alpha = p.iter().copied().fold(f64::INFINITY, f64::min);
        let beta = p.iter().copied().fold(0.0, f64::max);
        let n = p.len();
        let mut problem = FedProblem {
            clients,
            alpha,
            beta,
            shard_sizes: vec![1; n],
            normalizer: 1.0,
            reference: None,
            test_accuracy: None,
        };
        let f_star = problem.primal_value(&w_star);
        problem.reference = Some(ReferencePoint { w_star, f_star });
        Ok(problem)
    }

    /// MLR clients over `shards` with per-client ridge `gamma`. The averaged
    /// risk divides `F` by the number of training examples.
    pub fn mlr(data: Arc<Dataset>, shards: &[ClientShard], gamma: f64) -> Result<Self> {
        if shards.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 clients".into()));
        }
        let objs: Vec<MlrObjective> = shards
            .par_iter()
            .map(|s| MlrObjective::for_shard(Arc::clone(&data), s, gamma))
            .collect::<Result<_>>()?;
        let beta = objs.iter().map(|o| o.smoothness()).fold(gamma, f64::max);
        Ok(FedProblem {
            shard_sizes: shards.iter().map(|s| s.len()).collect(),
            clients: objs.into_iter().map(|o| Arc::new(o) as Arc<dyn ClientObjective>).collect(),
            alpha: gamma,
            beta,
            normalizer: shards.iter().map(|s| s.len()).sum::<usize>() as f64,
            reference: None,
            test_accuracy: None,
        })
    }

    /// Solves for the reference optimum of an MLR problem built by [`FedProblem::mlr`].
    pub fn with_mlr_reference(mut self, data: Arc<Dataset>, gamma: f64, tol: f64) -> Result<Self> {
        let r = solve_reference(data, self.n_clients(), gamma, tol)?;
        self.reference = Some(ReferencePoint {
            w_star: r.w_star.weights,
            f_star: r.f_star,
        });
        Ok(self)
    }

    pub fn with_test_set(mut self, test: Arc<Dataset>) -> Self {
        self.test_accuracy = Some(Arc::new(move |w: &[f64]| MlrObjective::accuracy(&test, w, None)));
        self
    }
}
