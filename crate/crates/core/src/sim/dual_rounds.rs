//! Round bodies of FedDCD and its accelerated variant, driven by explicit
//! participant sets so they can be replayed against reference solvers.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use super::config::AccCoefficients;
use super::problem::FedProblem;
use crate::dual::{adjust_directions, apply_dual_step, conjugate_grad, DualState, OracleConfig, OracleOutput, ScalingWeights};
use crate::error::{Error, Result};
use crate::linalg::all_finite;

/// Uniform `tau`-subset of `0..n` without replacement, sorted.
pub fn sample_participants<R: Rng + ?Sized>(n: usize, tau: usize, rng: &mut R) -> Vec<usize> {
    assert!(tau >= 2 && tau <= n, "need 2 <= tau <= n");
    let mut ids = rand::seq::index::sample(rng, n, tau).into_vec();
    ids.sort_unstable();
    ids
}

/// Derives an independent stream seed from a base seed and two labels.
pub fn split_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default)]
pub struct StepReport {
    /// Models uploaded in the (first) participant phase.
    pub uploaded: BTreeMap<usize, Vec<f64>>,
    pub local_steps: usize,
    /// Oracle calls that missed their residual target.
    pub unconverged: usize,
}

fn run_oracles(
    problem: &FedProblem,
    points: &[Vec<f64>],
    warm: &[Vec<f64>],
    ids: &[usize],
    oracle: &OracleConfig,
    seed: u64,
) -> Result<Vec<(usize, OracleOutput)>> {
    ids.par_iter()
        .map(|&i| {
            let out = conjugate_grad(
                &*problem.clients[i],
                &points[i],
                &warm[i],
                oracle,
                split_seed(seed, i as u64, 0),
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { client: i },
                e => e,
            })?;
            Ok((i, out))
        })
        .collect()
}

/// One FedDCD round with the given participants.
pub fn feddcd_step(
    problem: &FedProblem,
    state: &mut DualState,
    weights: &ScalingWeights,
    participants: &[usize],
    oracle: &OracleConfig,
    eta: f64,
    seed: u64,
) -> Result<StepReport> {
    let outs = run_oracles(problem, &state.y, &state.last_w, participants, oracle, seed)?;
    let mut report = StepReport::default();
    for (i, out) in outs {
        report.local_steps += out.steps;
        report.unconverged += usize::from(!out.converged);
        state.last_w[i] = out.w.clone();
        report.uploaded.insert(i, out.w);
    }
    let dirs = adjust_directions(&report.uploaded, weights)?;
    apply_dual_step(&mut state.y, &dirs, eta)?;
    state.round += 1;
    Ok(report)
}

/// One accelerated round with participant sets `i1` (for `y`) and `i2` (for `z`).
/// Clients in both sets reuse their first-phase model, computed at the same point.
pub fn accfeddcd_step(
    problem: &FedProblem,
    state: &mut DualState,
    weights: &ScalingWeights,
    coeffs: &AccCoefficients,
    i1: &[usize],
    i2: &[usize],
    oracle: &OracleConfig,
    seed: u64,
) -> Result<StepReport> {
    let z = state
        .acc
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("state has no accelerated fields".into()))?
        .z
        .clone();
    let a = coeffs.a;
    let v: Vec<Vec<f64>> = state
        .y
        .iter()
        .zip(&z)
        .map(|(y, z)| y.iter().zip(z).map(|(yi, zi)| (1.0 - a) * yi + a * zi).collect())
        .collect();

    let mut report = StepReport::default();
    let first = run_oracles(problem, &v, &state.last_w, i1, oracle, seed)?;
    for (i, out) in first {
        report.local_steps += out.steps;
        report.unconverged += usize::from(!out.converged);
        state.last_w[i] = out.w.clone();
        report.uploaded.insert(i, out.w);
    }
    let dirs1 = adjust_directions(&report.uploaded, weights)?;
    let mut y_next = v.clone();
    apply_dual_step(&mut y_next, &dirs1, 1.0)?;

    let u: Vec<Vec<f64>> = z
        .iter()
        .zip(&v)
        .map(|(z, vv)| z.iter().zip(vv).map(|(zi, vi)| coeffs.mix1 * zi + coeffs.mix2 * vi).collect())
        .collect();

    let fresh: Vec<usize> = i2.iter().copied().filter(|i| !report.uploaded.contains_key(i)).collect();
    let second = run_oracles(problem, &v, &state.last_w, &fresh, oracle, seed ^ 0x5A5A_5A5A)?;
    let mut uploaded2: BTreeMap<usize, Vec<f64>> = i2
        .iter()
        .filter_map(|i| report.uploaded.get(i).map(|w| (*i, w.clone())))
        .collect();
    for (i, out) in second {
        report.local_steps += out.steps;
        report.unconverged += usize::from(!out.converged);
        state.last_w[i] = out.w.clone();
        uploaded2.insert(i, out.w);
    }
    let dirs2 = adjust_directions(&uploaded2, weights)?;
    let mut z_next = u.clone();
    apply_dual_step(&mut z_next, &dirs2, coeffs.zstep)?;

    if !y_next.iter().chain(&z_next).all(|x| all_finite(x)) {
        return Err(Error::NonFinite("accelerated iterate".into()));
    }
    state.y = y_next;
    state.acc = Some(crate::dual::AccState { z: z_next, v, u });
    state.round += 1;
    Ok(report)
}
