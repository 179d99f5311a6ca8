//! Round-based simulation of the dual methods and the primal baselines.

pub mod baselines;
pub mod config;
pub mod dual_rounds;
pub mod log;
pub mod problem;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use baselines::{fedavg_step, local_sgd, scaffold_step, LocalTraining, PrimalState};
pub use config::{AccCoefficients, Algorithm, SimConfig};
pub use dual_rounds::{accfeddcd_step, feddcd_step, sample_participants, split_seed, StepReport};
pub use log::{read_csv, CsvLogger, CsvRow, CSV_HEADER, CSV_SCHEMA_VERSION};
pub use problem::{AccuracyFn, FedProblem, ReferencePoint};

use crate::dual::{conjugate_value, exact_conjugate_grad, DualState, OracleConfig, ScalingWeights};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dist_sq};

/// Metrics for one round. Round 0 is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub algo: Algorithm,
    pub tau: usize,
    pub participants: Vec<usize>,
    /// Second participant set of an accelerated round.
    pub participants2: Option<Vec<usize>>,
    /// `G(y) - G(y*)`, dual methods with `dual_metrics` only.
    pub dual_gap: Option<f64>,
    /// Averaged-risk gap of the reported model.
    pub primal_gap: f64,
    /// Averaged-risk gap of the mean of this round's uploaded models.
    pub primal_gap_avg: Option<f64>,
    pub test_acc: Option<f64>,
    /// Test accuracy of the mean of this round's uploaded models.
    pub test_acc_avg: Option<f64>,
    /// Cumulative local solver steps.
    pub local_steps: usize,
    /// Cumulative client round-trips.
    pub communications: usize,
    /// `(1/N) sum_i ||w_i - w*||^2` at the exact conjugate points.
    pub bridge_lhs: Option<f64>,
    /// `2/(N alpha) * dual_gap`.
    pub bridge_rhs: Option<f64>,
    /// Oracle calls that stopped on the step cap instead of the residual target.
    pub oracle_warnings: usize,
    /// Cumulative seconds spent in round updates, metrics excluded.
    pub wall_time: f64,
}

impl RoundLog {
    /// Everything except the timing, for reproducibility checks.
    pub fn same_metrics(&self, other: &RoundLog) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

enum AlgoState {
    Dual(DualState),
    Primal(PrimalState),
}

pub struct Simulator<'a> {
    problem: &'a FedProblem,
    cfg: SimConfig,
    reference: ReferencePoint,
    alpha: f64,
    oracle: OracleConfig,
    metric_oracle: OracleConfig,
    weights: ScalingWeights,
    coeffs: Option<AccCoefficients>,
    eta: f64,
    participation: ChaCha8Rng,
    reporting: ChaCha8Rng,
    state: AlgoState,
    /// Exact conjugate gradients keyed by the dual point they were computed at.
    conj_cache: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    reported: Vec<f64>,
    local_steps: usize,
    communications: usize,
    primal_rounds: usize,
    oracle_warnings: usize,
    wall_time: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(problem: &'a FedProblem, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.n_clients != problem.n_clients() {
            return Err(Error::Config(format!(
                "n_clients = {} but the problem has {} clients",
                cfg.n_clients,
                problem.n_clients()
            )));
        }
        let reference = problem
            .reference
            .clone()
            .ok_or_else(|| Error::InvalidArgument("problem has no reference optimum".into()))?;
        let alpha = cfg.alpha.unwrap_or(problem.alpha);
        let beta = cfg.beta.unwrap_or(problem.beta);
        let oracle = cfg.oracle(alpha, beta);
        oracle.validate()?;
        let metric_oracle = OracleConfig {
            max_cg_iterations: cfg.max_cg_iterations,
            ..OracleConfig::exact()
        };
        let n = problem.n_clients();
        let d = problem.dim();
        let coeffs = match cfg.algorithm {
            Algorithm::Accfeddcd => Some(AccCoefficients::new(n, cfg.tau, alpha, beta)?),
            _ => None,
        };
        let state = if cfg.algorithm.is_dual() {
            AlgoState::Dual(DualState::zeros(n, d, coeffs.is_some()))
        } else {
            AlgoState::Primal(PrimalState::zeros(n, d))
        };
        Ok(Simulator {
            problem,
            reference,
            alpha,
            oracle,
            metric_oracle,
            weights: ScalingWeights::from_alpha(n, alpha)?,
            coeffs,
            eta: cfg.effective_eta(),
            participation: ChaCha8Rng::seed_from_u64(cfg.seed_participation),
            reporting: ChaCha8Rng::seed_from_u64(split_seed(cfg.seed_participation, 0x7265_706f, 0)),
            state,
            conj_cache: vec![None; n],
            reported: vec![0.0; d],
            local_steps: 0,
            communications: 0,
            primal_rounds: 0,
            oracle_warnings: 0,
            wall_time: 0.0,
            cfg,
        })
    }

    pub fn round(&self) -> usize {
        match &self.state {
            AlgoState::Dual(s) => s.round,
            AlgoState::Primal(_) => self.primal_rounds,
        }
    }

    pub fn dual_state(&self) -> Option<&DualState> {
        match &self.state {
            AlgoState::Dual(s) => Some(s),
            AlgoState::Primal(_) => None,
        }
    }

    pub fn primal_state(&self) -> Option<&PrimalState> {
        match &self.state {
            AlgoState::Primal(s) => Some(s),
            AlgoState::Dual(_) => None,
        }
    }

    /// The model the last log reported on.
    pub fn reported_model(&self) -> &[f64] {
        &self.reported
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn gap(&self, w: &[f64]) -> f64 {
        (self.problem.primal_value(w) - self.reference.f_star) / self.problem.normalizer
    }

    /// Exact `grad f_i*(y_i)` for the given clients, reusing cached values
    /// whose dual point has not moved.
    fn exact_models(&mut self, y: &[Vec<f64>], warm: &[Vec<f64>], ids: &[usize]) -> Result<()> {
        let todo: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| !matches!(&self.conj_cache[i], Some((yc, _)) if *yc == y[i]))
            .collect();
        let problem = self.problem;
        let cfg = self.metric_oracle;
        let cache = &self.conj_cache;
        let outs: Vec<(usize, crate::dual::OracleOutput)> = todo
            .par_iter()
            .map(|&i| {
                let start = cache[i].as_ref().map_or(&warm[i], |(_, w)| w);
                exact_conjugate_grad(&*problem.clients[i], &y[i], start, &cfg)
                    .map(|o| (i, o))
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::Divergence { client: i },
                        e => e,
                    })
            })
            .collect::<Result<_>>()?;
        for (i, out) in outs {
            self.oracle_warnings += usize::from(!out.converged);
            self.conj_cache[i] = Some((y[i].clone(), out.w));
        }
        Ok(())
    }

    fn log(&mut self, participants: Vec<usize>, participants2: Option<Vec<usize>>, uploaded_avg: Option<Vec<f64>>) -> Result<RoundLog> {
        let n = self.problem.n_clients();
        let mut dual_gap = None;
        let mut bridge = (None, None);
        match &self.state {
            AlgoState::Dual(s) => {
                let (y, warm) = (s.y.clone(), s.last_w.clone());
                let j = self.reporting.gen_range(0..n);
                let ids: Vec<usize> = if self.cfg.dual_metrics { (0..n).collect() } else { vec![j] };
                self.exact_models(&y, &warm, &ids)?;
                if self.cfg.dual_metrics {
                    let mut g = 0.0;
                    let mut lhs = 0.0;
                    for i in 0..n {
                        let w = &self.conj_cache[i].as_ref().expect("cached").1;
                        g += conjugate_value(&*self.problem.clients[i], &y[i], w);
                        lhs += dist_sq(w, &self.reference.w_star);
                    }
                    let gap = g + self.reference.f_star;
                    dual_gap = Some(gap);
                    bridge = (Some(lhs / n as f64), Some(2.0 / (n as f64 * self.alpha) * gap));
                }
                self.reported = self.conj_cache[j].as_ref().expect("cached").1.clone();
            }
            AlgoState::Primal(s) => self.reported = s.w.clone(),
        }
        let primal_gap = self.gap(&self.reported);
        let primal_gap_avg = uploaded_avg.as_ref().map(|w| self.gap(w));
        let test_acc_avg = match (&self.problem.test_accuracy, &uploaded_avg) {
            (Some(f), Some(w)) => Some(f(w)),
            _ => None,
        };
        Ok(RoundLog {
            round: self.round(),
            algo: self.cfg.algorithm,
            tau: self.cfg.tau,
            participants,
            participants2,
            dual_gap,
            primal_gap,
            primal_gap_avg,
            test_acc: self.problem.test_accuracy.as_ref().map(|f| f(&self.reported)),
            test_acc_avg,
            local_steps: self.local_steps,
            communications: self.communications,
            bridge_lhs: bridge.0,
            bridge_rhs: bridge.1,
            oracle_warnings: self.oracle_warnings,
            wall_time: self.wall_time,
        })
    }

    /// Metrics of the initial state.
    pub fn initial_log(&mut self) -> Result<RoundLog> {
        self.log(Vec::new(), None, None)
    }

    /// Executes one round and logs it.
    pub fn step(&mut self) -> Result<RoundLog> {
        let n = self.problem.n_clients();
        let tau = self.cfg.tau;
        let round = self.round();
        let solver_seed = split_seed(self.cfg.seed_solver, round as u64, 1);
        let started = Instant::now();
        let i1 = sample_participants(n, tau, &mut self.participation);
        let mut i2 = None;
        let uploaded_avg;
        match &mut self.state {
            AlgoState::Dual(s) => {
                let report = match self.cfg.algorithm {
                    Algorithm::Accfeddcd => {
                        let second = sample_participants(n, tau, &mut self.participation);
                        let coeffs = self.coeffs.expect("accelerated coefficients");
                        let r = accfeddcd_step(self.problem, s, &self.weights, &coeffs, &i1, &second, &self.oracle, solver_seed)?;
                        i2 = Some(second);
                        r
                    }
                    _ => feddcd_step(self.problem, s, &self.weights, &i1, &self.oracle, self.eta, solver_seed)?,
                };
                self.local_steps += report.local_steps;
                self.oracle_warnings += report.unconverged;
                let mut avg = vec![0.0; self.problem.dim()];
                for w in report.uploaded.values() {
                    axpy(1.0 / report.uploaded.len() as f64, w, &mut avg);
                }
                uploaded_avg = Some(avg);
            }
            AlgoState::Primal(s) => {
                let opts = LocalTraining {
                    epochs: self.cfg.local_epochs,
                    lr: self.cfg.local_lr,
                    batch_size: self.cfg.batch_size,
                    prox_mu: if self.cfg.algorithm == Algorithm::Fedprox { self.cfg.fedprox_mu } else { 0.0 },
                };
                self.local_steps += match self.cfg.algorithm {
                    Algorithm::Scaffold => scaffold_step(self.problem, s, &i1, &opts, self.cfg.seed_solver, round)?,
                    _ => fedavg_step(self.problem, s, &i1, &opts, self.cfg.seed_solver, round)?,
                };
                uploaded_avg = None;
                self.primal_rounds += 1;
            }
        }
        self.communications += self.cfg.algorithm.communications_per_round();
        self.wall_time += started.elapsed().as_secs_f64();
        self.log(i1, i2, uploaded_avg)
    }
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: RoundLog,
    pub rounds: Vec<RoundLog>,
    /// Reported model after the last round.
    pub final_model: Vec<f64>,
}

/// Runs `cfg.rounds` rounds, handing every log (initial state included) to
/// `on_round` as soon as it is produced.
pub fn run_experiment<F>(problem: &FedProblem, cfg: &SimConfig, mut on_round: F) -> Result<Trajectory>
where
    F: FnMut(&RoundLog) -> Result<()>,
{
    let mut sim = Simulator::new(problem, cfg.clone())?;
    let initial = sim.initial_log()?;
    on_round(&initial)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let log = sim.step()?;
        on_round(&log)?;
        rounds.push(log);
    }
    Ok(Trajectory {
        initial,
        rounds,
        final_model: sim.reported_model().to_vec(),
    })
}
