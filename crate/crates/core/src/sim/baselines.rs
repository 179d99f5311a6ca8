//! Primal baselines: FedAvg, FedProx and SCAFFOLD (option II control variates).
//!
//! Local training minimizes the per-sample mean `f_i / m_i` with minibatch
//! SGD, so the FedAvg fixed point (weights `m_i`) is the minimizer of `F`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dual_rounds::split_seed;
use super::problem::FedProblem;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, sub};
use crate::model::ClientObjective;

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalState {
    pub w: Vec<f64>,
    /// Server control variate (SCAFFOLD).
    pub c: Vec<f64>,
    /// Client control variates (SCAFFOLD).
    pub c_i: Vec<Vec<f64>>,
}

impl PrimalState {
    pub fn zeros(n: usize, d: usize) -> Self {
        PrimalState {
            w: vec![0.0; d],
            c: vec![0.0; d],
            c_i: vec![vec![0.0; d]; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    /// `None` trains on the full local batch.
    pub batch_size: Option<usize>,
    /// Proximal weight; zero disables the term entirely.
    pub prox_mu: f64,
}

/// Runs local SGD from `start`. `correction` is added to every stochastic
/// gradient (SCAFFOLD's `c - c_i`). Returns the model and the step count.
pub fn local_sgd(
    f: &dyn ClientObjective,
    start: &[f64],
    opts: &LocalTraining,
    correction: Option<&[f64]>,
    seed: u64,
) -> Option<(Vec<f64>, usize)> {
    let m = f.num_components();
    let batch = opts.batch_size.unwrap_or(m).clamp(1, m);
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = start.to_vec();
    let mut steps = 0;
    for _ in 0..opts.epochs {
        if batch < m {
            order.shuffle(&mut rng);
        }
        for idx in order.chunks(batch) {
            let mut g = f.components_gradient(idx, &w);
            crate::linalg::scale(1.0 / idx.len() as f64, &mut g);
            if opts.prox_mu > 0.0 {
                for ((gi, wi), si) in g.iter_mut().zip(&w).zip(start) {
                    *gi += opts.prox_mu * (wi - si);
                }
            }
            if let Some(c) = correction {
                axpy(1.0, c, &mut g);
            }
            axpy(-opts.lr, &g, &mut w);
            steps += 1;
        }
        if !all_finite(&w) {
            return None;
        }
    }
    Some((w, steps))
}

fn train_all(
    problem: &FedProblem,
    participants: &[usize],
    start: &[f64],
    opts: &LocalTraining,
    corrections: Option<&[Vec<f64>]>,
    seed: u64,
    round: usize,
) -> Result<Vec<(usize, Vec<f64>, usize)>> {
    participants
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let corr = corrections.map(|c| c[k].as_slice());
            local_sgd(&*problem.clients[i], start, opts, corr, split_seed(seed, round as u64, i as u64))
                .map(|(w, s)| (i, w, s))
                .ok_or(Error::Divergence { client: i })
        })
        .collect()
}

/// FedAvg (or FedProx when `opts.prox_mu > 0`): local SGD then a
/// shard-size-weighted average. Returns the local step count.
pub fn fedavg_step(
    problem: &FedProblem,
    state: &mut PrimalState,
    participants: &[usize],
    opts: &LocalTraining,
    seed: u64,
    round: usize,
) -> Result<usize> {
    let trained = train_all(problem, participants, &state.w, opts, None, seed, round)?;
    let total: f64 = participants.iter().map(|&i| problem.shard_sizes[i] as f64).sum();
    let mut next = vec![0.0; state.w.len()];
    let mut steps = 0;
    for (i, w, s) in &trained {
        axpy(problem.shard_sizes[*i] as f64 / total, w, &mut next);
        steps += s;
    }
    state.w = next;
    Ok(steps)
}

/// SCAFFOLD with option-II control variate updates and unit server step.
pub fn scaffold_step(
    problem: &FedProblem,
    state: &mut PrimalState,
    participants: &[usize],
    opts: &LocalTraining,
    seed: u64,
    round: usize,
) -> Result<usize> {
    let n = problem.n_clients() as f64;
    let corrections: Vec<Vec<f64>> = participants.iter().map(|&i| sub(&state.c, &state.c_i[i])).collect();
    let trained = train_all(problem, participants, &state.w, opts, Some(&corrections), seed, round)?;
    let d = state.w.len();
    let mut dw = vec![0.0; d];
    let mut dc = vec![0.0; d];
    let mut steps = 0;
    let s = participants.len() as f64;
    for (i, w, k) in trained {
        steps += k;
        // c_i+ = c_i - c + (x - y_i) / (K lr)
        let scale = 1.0 / (k as f64 * opts.lr);
        let new_ci: Vec<f64> = state.c_i[i]
            .iter()
            .zip(&state.c)
            .zip(state.w.iter().zip(&w))
            .map(|((ci, c), (x, yi))| ci - c + scale * (x - yi))
            .collect();
        axpy(1.0 / s, &sub(&w, &state.w), &mut dw);
        axpy(1.0 / n, &sub(&new_ci, &state.c_i[i]), &mut dc);
        state.c_i[i] = new_ci;
    }
    axpy(1.0, &dw, &mut state.w);
    axpy(1.0, &dc, &mut state.c);
    if !all_finite(&state.w) {
        return Err(Error::NonFinite("server model".into()));
    }
    Ok(steps)
}
