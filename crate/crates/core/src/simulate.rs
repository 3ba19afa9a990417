//! Flat Thompson sampling over Bernoulli arms, optionally with scheduled
//! rate changes and the IR reset, for studying the bandit in isolation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{sample_arm, BetaView};
use crate::detect::ir_sweep;
use crate::rng::{derive_rng, Stream};
use crate::tree::{DomainId, KnowledgeTree};
use crate::{IrConfig, PosteriorTable};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("at least one arm is required")]
    NoArms,
    #[error("arm rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("drift names arm {0}, which does not exist")]
    BadArm(usize),
}

/// From `round` on, arm `arm` pays with probability `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateChange {
    pub round: u64,
    pub arm: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Environment {
    pub rates: Vec<f64>,
    #[serde(default)]
    pub drift: Vec<RateChange>,
}

impl Environment {
    pub fn fixed(rates: &[f64]) -> Self {
        Self { rates: rates.to_vec(), drift: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.rates.is_empty() {
            return Err(SimError::NoArms);
        }
        for &p in self.rates.iter().chain(self.drift.iter().map(|d| &d.rate)) {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::BadRate(p));
            }
        }
        if let Some(d) = self.drift.iter().find(|d| d.arm >= self.rates.len()) {
            return Err(SimError::BadArm(d.arm));
        }
        Ok(())
    }

    pub fn rates_at(&self, round: u64) -> Vec<f64> {
        let mut r = self.rates.clone();
        let mut changes: Vec<&RateChange> = self.drift.iter().filter(|d| d.round <= round).collect();
        changes.sort_by_key(|d| d.round);
        for d in changes {
            r[d.arm] = d.rate;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub choices: Vec<usize>,
    pub rewards: Vec<u8>,
    pub counts: Vec<u64>,
    /// Fraction of rounds that picked an arm with the highest current rate.
    pub best_share: f64,
    pub total_reward: u64,
    pub resets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub rounds: u64,
    pub runs: Vec<SeedRun>,
    pub mean_best_share: f64,
    /// Per arm, mean over runs of its selection share.
    pub mean_shares: Vec<f64>,
}

/// Runs one simulation per seed in `seeds`.
pub fn simulate(env: &Environment, rounds: u64, seeds: &[u64], ir: Option<&IrConfig>) -> Result<SimReport, SimError> {
    env.validate()?;
    let runs: Vec<SeedRun> = seeds.iter().map(|&s| simulate_one(env, rounds, s, ir)).collect();
    let k = env.rates.len();
    let n = runs.len().max(1) as f64;
    let mean_shares = (0..k)
        .map(|a| runs.iter().map(|r| r.counts[a] as f64 / rounds.max(1) as f64).sum::<f64>() / n)
        .collect();
    Ok(SimReport {
        rounds,
        mean_best_share: runs.iter().map(|r| r.best_share).sum::<f64>() / n,
        mean_shares,
        runs,
    })
}

fn simulate_one(env: &Environment, rounds: u64, seed: u64, ir: Option<&IrConfig>) -> SeedRun {
    let k = env.rates.len();
    let mut tree = KnowledgeTree::new();
    let arms: Vec<DomainId> = (0..k)
        .map(|i| tree.add_domain(tree.root(), &format!("arm-{i}")).expect("fresh names"))
        .collect();
    let mut post = PosteriorTable::new(ir.map_or(2, |c| c.w));
    for &a in &arms {
        post.entry(&tree, a).expect("arm exists");
    }
    let mut rng = derive_rng(seed, Stream::Simulation, &[]);
    let mut run = SeedRun {
        seed,
        choices: Vec::with_capacity(rounds as usize),
        rewards: Vec::with_capacity(rounds as usize),
        counts: vec![0; k],
        best_share: 0.0,
        total_reward: 0,
        resets: 0,
    };
    let mut best_hits = 0u64;
    for t in 0..rounds {
        let rates = env.rates_at(t);
        let views: Vec<(DomainId, BetaView<f64>)> = arms.iter().map(|&a| (a, post.view(a))).collect();
        let pick = sample_arm(&views, &mut rng).expect("arms nonempty");
        let idx = arms.iter().position(|&a| a == pick).expect("picked from arms");
        let r = u8::from(rng.random::<f64>() < rates[idx]);
        post.get_mut(pick).expect("arm exists").update(r).expect("arms stay active");
        let top = rates.iter().copied().fold(f64::MIN, f64::max);
        best_hits += u64::from(rates[idx] == top);
        run.choices.push(idx);
        run.rewards.push(r);
        run.counts[idx] += 1;
        run.total_reward += u64::from(r);
        if let Some(cfg) = ir {
            run.resets += ir_sweep(&mut post, cfg).iter().filter(|o| o.reset_applied).count() as u64;
        }
    }
    run.best_share = if rounds == 0 { 0.0 } else { best_hits as f64 / rounds as f64 };
    run
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_arm_always_chosen() {
        let rep = simulate(&Environment::fixed(&[0.3]), 100, &[1, 2], None).unwrap();
        assert!(rep.runs.iter().all(|r| r.counts == vec![100]));
        assert_eq!(rep.mean_best_share, 1.0);
    }

    #[test]
    fn validation() {
        assert_eq!(simulate(&Environment::fixed(&[]), 1, &[0], None), Err(SimError::NoArms));
        assert_eq!(simulate(&Environment::fixed(&[1.2]), 1, &[0], None), Err(SimError::BadRate(1.2)));
        let env = Environment { rates: vec![0.5], drift: vec![RateChange { round: 1, arm: 3, rate: 0.1 }] };
        assert_eq!(simulate(&env, 1, &[0], None), Err(SimError::BadArm(3)));
    }

    #[test]
    fn drift_schedule_applies_in_order() {
        let env = Environment {
            rates: vec![0.1, 0.9],
            drift: vec![RateChange { round: 10, arm: 0, rate: 0.95 }, RateChange { round: 5, arm: 0, rate: 0.5 }],
        };
        assert_eq!(env.rates_at(4), vec![0.1, 0.9]);
        assert_eq!(env.rates_at(5), vec![0.5, 0.9]);
        assert_eq!(env.rates_at(12), vec![0.95, 0.9]);
    }

    #[test]
    fn deterministic_per_seed() {
        let env = Environment::fixed(&[0.6, 0.4]);
        let a = simulate(&env, 200, &[7], None).unwrap();
        let b = simulate(&env, 200, &[7], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reset_tracks_swap() {
        // Arm 0 starts best then collapses; with IR the sampler should move
        // to arm 1 for most of the second half.
        let env = Environment { rates: vec![0.9, 0.5], drift: vec![RateChange { round: 500, arm: 0, rate: 0.1 }] };
        let ir = IrConfig::new(20, 0.2).unwrap();
        let rep = simulate(&env, 1000, &(0..10).collect::<Vec<_>>(), Some(&ir)).unwrap();
        for run in &rep.runs {
            let late = run.choices[750..].iter().filter(|&&c| c == 1).count();
            assert!(late > 200, "seed {}: {late}", run.seed);
        }
    }
}
