use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PartitionScheme;
use crate::dual::{LocalSolver, OracleConfig, OracleMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Feddcd,
    FeddcdInexact,
    Accfeddcd,
    Fedavg,
    Fedprox,
    Scaffold,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Feddcd,
        Algorithm::FeddcdInexact,
        Algorithm::Accfeddcd,
        Algorithm::Fedavg,
        Algorithm::Fedprox,
        Algorithm::Scaffold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Feddcd => "feddcd",
            Algorithm::FeddcdInexact => "feddcd-inexact",
            Algorithm::Accfeddcd => "accfeddcd",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::Scaffold => "scaffold",
        }
    }

    pub fn is_dual(self) -> bool {
        matches!(self, Algorithm::Feddcd | Algorithm::FeddcdInexact | Algorithm::Accfeddcd)
    }

    /// Client round-trips per round.
    pub fn communications_per_round(self) -> usize {
        if self == Algorithm::Accfeddcd {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Flat experiment configuration. Every field has a default, so a config
/// file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    pub n_clients: usize,
    /// Participants per round.
    pub tau: usize,
    pub rounds: usize,
    /// Per-client ridge weight.
    pub gamma: f64,
    /// Strong convexity constant; estimated from the problem when absent.
    pub alpha: Option<f64>,
    /// Smoothness constant; estimated from the problem when absent.
    pub beta: Option<f64>,
    /// Dual step size; 1 for exact and 1/4 for inexact when absent.
    pub eta: Option<f64>,
    /// Oracle accuracy for `feddcd-inexact`; `(1 - kappa)/4` when absent.
    pub delta: Option<f64>,
    pub local_solver: LocalSolver,
    pub max_local_steps: Option<usize>,
    pub max_cg_iterations: usize,
    /// Local epochs for primal baselines.
    pub local_epochs: usize,
    pub local_lr: f64,
    /// Minibatch size for primal baselines; full local batch when absent.
    pub batch_size: Option<usize>,
    pub fedprox_mu: f64,
    pub seed_partition: u64,
    pub seed_participation: u64,
    pub seed_solver: u64,
    /// Compute dual gap and primal-dual bridge terms (one exact solve per changed client).
    pub dual_metrics: bool,

    pub dataset: Option<String>,
    pub test_dataset: Option<String>,
    pub partition: PartitionScheme,
    pub shards_per_client: usize,
    /// Max-abs feature scaling; on by default.
    pub scale_features: bool,
    pub num_features: Option<usize>,
    pub reference_tol: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            algorithm: Algorithm::Feddcd,
            n_clients: 100,
            tau: 30,
            rounds: 100,
            gamma: 1e-2,
            alpha: None,
            beta: None,
            eta: None,
            delta: None,
            local_solver: LocalSolver::Newton,
            max_local_steps: None,
            max_cg_iterations: 500,
            local_epochs: 5,
            local_lr: 0.1,
            batch_size: Some(50),
            fedprox_mu: 0.01,
            seed_partition: 0,
            seed_participation: 1,
            seed_solver: 2,
            dual_metrics: true,
            dataset: None,
            test_dataset: None,
            partition: PartitionScheme::Iid,
            shards_per_client: 2,
            scale_features: true,
            num_features: None,
            reference_tol: 1e-10,
        }
    }
}

impl SimConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads JSON or TOML, chosen by file extension (`.json` is JSON, anything else TOML).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_clients < 2 {
            bad.push(format!("n_clients = {} must be at least 2", self.n_clients));
        }
        if self.tau < 2 || self.tau > self.n_clients {
            bad.push(format!("tau = {} must satisfy 2 <= tau <= n_clients = {}", self.tau, self.n_clients));
        }
        let positive = |name: &str, v: f64, bad: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} = {v} must be positive"));
            }
        };
        positive("gamma", self.gamma, &mut bad);
        positive("local_lr", self.local_lr, &mut bad);
        positive("reference_tol", self.reference_tol, &mut bad);
        if let Some(a) = self.alpha {
            positive("alpha", a, &mut bad);
        }
        if let Some(b) = self.beta {
            positive("beta", b, &mut bad);
        }
        if let (Some(a), Some(b)) = (self.alpha, self.beta) {
            if a > b {
                bad.push(format!("alpha = {a} exceeds beta = {b}"));
            }
        }
        if let Some(e) = self.eta {
            positive("eta", e, &mut bad);
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                bad.push(format!("delta = {d} must lie in (0,1)"));
            }
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            bad.push(format!("fedprox_mu = {} must be non-negative", self.fedprox_mu));
        }
        if self.local_epochs == 0 {
            bad.push("local_epochs must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            bad.push("batch_size must be at least 1".into());
        }
        if self.max_local_steps == Some(0) {
            bad.push("max_local_steps must be at least 1".into());
        }
        if self.max_cg_iterations == 0 {
            bad.push("max_cg_iterations must be at least 1".into());
        }
        if self.shards_per_client == 0 {
            bad.push("shards_per_client must be at least 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn participation_ratio(&self) -> f64 {
        (self.tau - 1) as f64 / (self.n_clients - 1) as f64
    }

    /// `kappa = (tau - 1) alpha / (32 (N - 1) beta)`.
    pub fn inexact_kappa(&self, alpha: f64, beta: f64) -> f64 {
        self.participation_ratio() * alpha / (32.0 * beta)
    }

    pub fn effective_eta(&self) -> f64 {
        self.eta.unwrap_or(match self.algorithm {
            Algorithm::FeddcdInexact => 0.25,
            _ => 1.0,
        })
    }

    pub fn effective_delta(&self, alpha: f64, beta: f64) -> f64 {
        self.delta
            .unwrap_or_else(|| (1.0 - self.inexact_kappa(alpha, beta)) / 4.0)
    }

    pub fn oracle(&self, alpha: f64, beta: f64) -> OracleConfig {
        let mut cfg = match self.algorithm {
            Algorithm::FeddcdInexact => OracleConfig::inexact(self.effective_delta(alpha, beta), self.local_solver),
            _ => OracleConfig {
                mode: OracleMode::Exact,
                local_solver: self.local_solver,
                ..OracleConfig::default()
            },
        };
        if let Some(m) = self.max_local_steps {
            cfg.max_local_steps = m;
        }
        cfg.max_cg_iterations = self.max_cg_iterations;
        cfg
    }
}

/// Accelerated-round constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccCoefficients {
    pub r: f64,
    pub a: f64,
    pub b: f64,
    pub mix1: f64,
    pub mix2: f64,
    pub zstep: f64,
}

impl AccCoefficients {
    /// `r = (tau-1)/(N-1)`, `a = sqrt(alpha/beta) / (1/r + sqrt(alpha/beta))`,
    /// `b = alpha a r^2 / beta`.
    pub fn new(n: usize, tau: usize, alpha: f64, beta: f64) -> Result<Self> {
        if n < 2 || tau < 2 || tau > n {
            return Err(Error::Config(format!("need 2 <= tau <= N, got tau={tau}, N={n}")));
        }
        if !(alpha > 0.0 && beta >= alpha) {
            return Err(Error::Config(format!("need 0 < alpha <= beta, got {alpha}, {beta}")));
        }
        let r = (tau - 1) as f64 / (n - 1) as f64;
        let s = (alpha / beta).sqrt();
        let a = s / (1.0 / r + s);
        let b = alpha * a * r * r / beta;
        let denom = a * a + b;
        Ok(AccCoefficients {
            r,
            a,
            b,
            mix1: a * a / denom,
            mix2: b / denom,
            zstep: a * r / denom,
        })
    }

    /// `a^2 <= (1 - a)(a^2 + b)`.
    pub fn lemma_holds(&self) -> bool {
        self.a * self.a <= (1.0 - self.a) * (self.a * self.a + self.b) * (1.0 + 1e-12)
    }

    /// Per-round contraction factor of the accelerated bound.
    pub fn rate(&self) -> f64 {
        1.0 - self.a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfectly_conditioned_full_participation() {
        let c = AccCoefficients::new(5, 5, 2.0, 2.0).unwrap();
        assert_eq!(c.r, 1.0);
        assert!((c.a - 0.5).abs() < 1e-15);
        assert!((c.mix1 + c.mix2 - 1.0).abs() < 1e-15);
        assert!(c.lemma_holds());
    }

    proptest! {
        #[test]
        fn coefficient_invariants(n in 2usize..200, t in 0.0f64..1.0, cond in 1.0f64..1e6) {
            let tau = 2 + ((n - 2) as f64 * t) as usize;
            let c = AccCoefficients::new(n, tau, 1.0, cond).unwrap();
            prop_assert!(c.a > 0.0 && c.a < 1.0);
            prop_assert!(c.b > 0.0);
            prop_assert!((c.mix1 + c.mix2 - 1.0).abs() < 1e-12);
            prop_assert!(c.lemma_holds());
        }
    }

    #[test]
    fn validation_lists_violations() {
        let cfg = SimConfig {
            tau: 1,
            gamma: -1.0,
            ..SimConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("tau") && msg.contains("gamma"));
        let cfg = SimConfig {
            tau: 101,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_and_json_flat_keys() {
        let t = SimConfig::from_toml_str("algorithm = \"accfeddcd\"\ntau = 10\nrounds = 5\n").unwrap();
        assert_eq!(t.algorithm, Algorithm::Accfeddcd);
        assert_eq!(t.tau, 10);
        let j = SimConfig::from_json_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(j, t);
        assert!(SimConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn inexact_defaults_follow_theory() {
        let cfg = SimConfig {
            algorithm: Algorithm::FeddcdInexact,
            n_clients: 11,
            tau: 3,
            ..SimConfig::default()
        };
        let kappa = 0.2 * 0.5 / 32.0;
        assert!((cfg.inexact_kappa(1.0, 2.0) - kappa).abs() < 1e-15);
        assert!((cfg.effective_delta(1.0, 2.0) - (1.0 - kappa) / 4.0).abs() < 1e-15);
        assert_eq!(cfg.effective_eta(), 0.25);
        assert_eq!(SimConfig::default().effective_eta(), 1.0);
    }
}
