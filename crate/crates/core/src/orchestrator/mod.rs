//! The round loop: Meditation (sample, sprout, harvest, commit, IR sweep)
//! followed by Enlightenment (sample training data, train).

pub mod checkpoint;
pub mod config;
pub mod export;
mod hook;
pub mod state;

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::CheckpointError;
pub use config::{ConfigError, LiveConfig, Mode, OutputConfig, RunConfig, TrainerHook};
pub use export::{export_dataset, write_metrics};
pub use state::{is_strict_alternation, DataPools, IrRecord, Level1Share, Phase, PhaseEvent, RoundReport, State};

use crate::bandit::{commit_batch, sample_path_meditation, BanditError, EnlightenmentSampler, PathSampleResult};
use crate::detect::{ir_sweep, IrConfig};
use crate::llm::{judge_index_warning, LlmBackend};
use crate::oracle::{harvest, sprout, BackendError, ModelBackend, ModelRef, QaRecord, SyntheticBackend, SyntheticWorld};
use crate::rng::{derive_rng, Stream};
use crate::tree::{KnowledgeTree, TreeError};
use crate::PosteriorTable;

/// Draws per Enlightenment sample before it is skipped: one plus ten redraws.
pub const ENLIGHTENMENT_ATTEMPTS: usize = 11;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("output i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend setup: {0}")]
    Backend(#[from] BackendError),
    #[error("bandit: {0}")]
    Bandit(#[from] BanditError),
    #[error("tree: {0}")]
    Tree(#[from] TreeError),
    #[error("{0:?} phase called out of order")]
    PhaseOrder(Phase),
}

struct LiveEnsemble {
    sources: Vec<LlmBackend>,
    target: LlmBackend,
}

enum Members<'a> {
    Synthetic(Vec<SyntheticBackend<'a>>, SyntheticBackend<'a>),
    Live(&'a LiveEnsemble),
}

impl<'a> Members<'a> {
    fn new(world: Option<&'a SyntheticWorld>, live: Option<&'a LiveEnsemble>) -> Self {
        match (world, live) {
            (_, Some(l)) => Members::Live(l),
            (Some(w), None) => Members::Synthetic(w.source_backends(), w.backend(ModelRef::Target)),
            (None, None) => unreachable!("a run has either a synthetic world or live endpoints"),
        }
    }

    fn sources(&self) -> Vec<&dyn ModelBackend> {
        match self {
            Members::Synthetic(s, _) => s.iter().map(|b| b as &dyn ModelBackend).collect(),
            Members::Live(l) => l.sources.iter().map(|b| b as &dyn ModelBackend).collect(),
        }
    }

    fn target(&self) -> &dyn ModelBackend {
        match self {
            Members::Synthetic(_, t) => t,
            Members::Live(l) => &l.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub rounds: Vec<RoundReport>,
    pub level_counts: [usize; 3],
    pub tree: KnowledgeTree,
    pub posteriors: PosteriorTable,
    pub posterior_digest: String,
    pub records: usize,
    pub dataset_path: Option<PathBuf>,
}

pub struct Orchestrator {
    state: State,
    live: Option<LiveEnsemble>,
    ir: IrConfig<f64>,
    pending: Option<RoundReport>,
}

fn level_counts(tree: &KnowledgeTree) -> [usize; 3] {
    let (a, b, c) = tree.level_counts();
    [a, b, c]
}

impl Orchestrator {
    pub fn new(config: RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mut tree = KnowledgeTree::new();
        for chain in &config.initial_chains {
            let mut cur = tree.root();
            for name in chain {
                let existing = tree
                    .children(cur)?
                    .iter()
                    .copied()
                    .find(|&c| tree.get(c).is_some_and(|d| !d.is_unk && crate::tree::normalize_name(&d.name) == crate::tree::normalize_name(name)));
                cur = match existing {
                    Some(id) => id,
                    None => tree.add_domain(cur, name)?,
                };
            }
        }
        let world = (config.mode == Mode::Synthetic).then(|| SyntheticWorld::new(&config.world, config.sources));
        let state = State {
            posteriors: PosteriorTable::new(config.window),
            config,
            round: 0,
            tree,
            pools: DataPools::default(),
            world,
            events: Vec::new(),
            reports: Vec::new(),
        };
        Self::resume(state)
    }

    /// Continues from a restored state; live endpoints are reconnected.
    pub fn resume(state: State) -> Result<Self, RunError> {
        state.config.validate()?;
        let live = match state.config.mode {
            Mode::Synthetic => None,
            Mode::Live => {
                let cfg = &state.config.live;
                if let Some(w) = judge_index_warning(cfg.sources.len()) {
                    log::warn!("{w}");
                }
                let sources = cfg.sources.iter().cloned().map(LlmBackend::new).collect::<Result<Vec<_>, _>>()?;
                let target = LlmBackend::new(cfg.target.clone().expect("validated"))?;
                Some(LiveEnsemble { sources, target })
            }
        };
        let ir = IrConfig::new(state.config.window, state.config.significance)
            .map_err(|e| ConfigError::Invalid { field: "significance", reason: e.to_string() })?;
        Ok(Self { state, live, ir, pending: None })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn into_state(self) -> State {
        self.state
    }

    /// Raises or lowers the total round count of a resumed run.
    pub fn set_rounds(&mut self, rounds: u32) {
        self.state.config.rounds = rounds;
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.state.config.rounds
    }

    /// Samples B paths (expanding the tree as needed), harvests every valid
    /// one, commits rewards and runs the IR sweep.
    pub fn meditation_round(&mut self) -> Result<RoundReport, RunError> {
        if self.pending.is_some() {
            return Err(RunError::PhaseOrder(Phase::Meditation));
        }
        let round = self.state.round;
        let seed = self.state.config.seed;
        let batch = self.state.config.meditation_batch;
        let State { tree, posteriors, pools, world, events, .. } = &mut self.state;

        if let Some(w) = world.as_mut() {
            w.apply_drift(round, tree);
        }
        let members = Members::new(world.as_ref(), self.live.as_ref());
        let sources = members.sources();
        let target = members.target();

        let mut results: Vec<(u64, PathSampleResult)> = Vec::with_capacity(batch as usize);
        let mut blocked = 0;
        for i in 0..u64::from(batch) {
            let mut path_rng = derive_rng(seed, Stream::MeditationPath, &[u64::from(round), i, 0]);
            let mut sprout_rng = derive_rng(seed, Stream::MeditationPath, &[u64::from(round), i, 1]);
            let res = sample_path_meditation(
                tree,
                posteriors,
                |t, parent| sprout(t, parent, &sources, &mut sprout_rng),
                &mut path_rng,
            );
            match res {
                Ok(r) => results.push((i, r)),
                Err(BanditError::AllDeactivated(_)) => blocked += 1,
                Err(e) => return Err(e.into()),
            }
        }

        let tree_ro: &KnowledgeTree = tree;
        let harvests: Vec<Option<QaRecord>> = results
            .par_iter()
            .filter(|(_, r)| r.is_valid())
            .map(|(i, r)| {
                let mut rng = derive_rng(seed, Stream::Harvest, &[u64::from(round), *i]);
                match harvest(tree_ro, &r.path, &sources, target, round, &mut rng) {
                    Ok(rec) => Some(rec),
                    Err(e) => {
                        log::warn!("round {round} path {i}: harvest discarded: {e}");
                        None
                    }
                }
            })
            .collect();
        drop(members);

        let rewards: Vec<Option<u8>> = harvests.iter().map(|h| h.as_ref().map(|r| r.reward)).collect();
        let just: Vec<PathSampleResult> = results.into_iter().map(|(_, r)| r).collect();
        commit_batch(tree, posteriors, &just, &rewards)?;
        let outcomes = ir_sweep(posteriors, &self.ir);

        let valid: Vec<&PathSampleResult> = just.iter().filter(|r| r.is_valid()).collect();
        let mut level1_shares: Vec<Level1Share> = tree
            .iter()
            .filter(|d| d.level == 1 && !d.is_unk)
            .map(|d| Level1Share { id: d.id, name: d.name.clone(), paths: 0, share: 0.0 })
            .collect();
        for r in &valid {
            let l1 = r.path.domains[1];
            if let Some(s) = level1_shares.iter_mut().find(|s| s.id == l1) {
                s.paths += 1;
            }
        }
        for s in &mut level1_shares {
            s.share = if valid.is_empty() { 0.0 } else { s.paths as f64 / valid.len() as f64 };
        }
        let harvested: Vec<&QaRecord> = harvests.iter().flatten().collect();
        let mean_reward = (!harvested.is_empty())
            .then(|| harvested.iter().map(|r| f64::from(r.reward)).sum::<f64>() / harvested.len() as f64);
        let report = RoundReport {
            round,
            sampled: batch as usize,
            valid: valid.len(),
            invalid: batch as usize - valid.len(),
            blocked,
            sprouts_succeeded: just.iter().map(PathSampleResult::sprout_successes).sum(),
            sprouts_failed: just.iter().map(PathSampleResult::sprout_failures).sum(),
            deactivated: just.iter().filter_map(|r| r.deactivated).collect(),
            harvested: harvested.len(),
            discarded: valid.len() - harvested.len(),
            mean_reward,
            ir_tests: outcomes
                .iter()
                .filter_map(|o| {
                    o.result.map(|r| IrRecord {
                        arm_id: o.arm_id,
                        lambda_win: r.lambda_win,
                        lambda_all: r.lambda_all,
                        statistic: r.statistic,
                        reject: r.reject,
                    })
                })
                .collect(),
            ir_resets: outcomes.iter().filter(|o| o.reset_applied).map(|o| o.arm_id).collect(),
            level_counts: level_counts(tree),
            level1_shares,
            posterior_digest: posteriors.digest(),
            enlightenment_drawn: 0,
            enlightenment_skipped: 0,
            pool_size: 0,
        };
        for rec in harvests.into_iter().flatten() {
            pools.push(rec);
        }
        events.push(PhaseEvent { round, phase: Phase::Meditation });
        self.pending = Some(report.clone());
        Ok(report)
    }

    /// Draws M records along Thompson-sampled complete paths, then trains.
    /// Posteriors and the tree are left untouched.
    pub fn enlightenment_round(&mut self) -> Result<Vec<QaRecord>, RunError> {
        let Some(mut report) = self.pending.take() else {
            return Err(RunError::PhaseOrder(Phase::Enlightenment));
        };
        let round = self.state.round;
        let drawn = self.draw_batch(round);
        let (batch, skipped) = match drawn {
            Ok(v) => v,
            Err(BanditError::NoCompleteChain) => {
                log::info!("round {round}: no complete chain, empty training batch");
                (Vec::new(), self.state.config.enlightenment_batch as usize)
            }
            Err(e) => return Err(e.into()),
        };
        if skipped > 0 {
            log::info!("round {round}: {skipped} enlightenment draws skipped on empty pools");
        }
        match (&mut self.state.world, self.state.config.mode) {
            (Some(w), Mode::Synthetic) => w.apply_training(&batch),
            _ => self.train_live(round, &batch)?,
        }
        report.enlightenment_drawn = batch.len();
        report.enlightenment_skipped = skipped;
        report.pool_size = self.state.pools.len();
        self.state.events.push(PhaseEvent { round, phase: Phase::Enlightenment });
        self.state.reports.push(report);
        self.state.round += 1;
        Ok(batch)
    }

    fn draw_batch(&self, round: u32) -> Result<(Vec<QaRecord>, usize), BanditError> {
        let st = &self.state;
        let mut rng = derive_rng(st.config.seed, Stream::Enlightenment, &[u64::from(round)]);
        let sampler = EnlightenmentSampler::new(&st.tree, &st.posteriors)?;
        let mut batch = Vec::with_capacity(st.config.enlightenment_batch as usize);
        let mut skipped = 0;
        for _ in 0..st.config.enlightenment_batch {
            let mut got = None;
            for _ in 0..ENLIGHTENMENT_ATTEMPTS {
                let path = sampler.sample(&mut rng)?;
                let leaf = path.leaf().expect("complete path");
                let n = st.pools.leaf_len(leaf);
                if n > 0 {
                    got = st.pools.leaf_record(leaf, rng.random_range(0..n)).cloned();
                    break;
                }
            }
            match got {
                Some(r) => batch.push(r),
                None => skipped += 1,
            }
        }
        Ok((batch, skipped))
    }

    fn train_live(&self, round: u32, batch: &[QaRecord]) -> Result<(), RunError> {
        let Some(dir) = &self.state.config.output.dir else {
            log::warn!("round {round}: no output dir, training batch not exported");
            return Ok(());
        };
        let path = dir.join("batches").join(format!("round-{round:04}.jsonl"));
        export::write_records(batch, &path)?;
        if let Some(hook) = &self.state.config.live.trainer {
            if let Err(e) = hook::fire(hook, round, &path) {
                log::error!("round {round}: trainer hook failed: {e}");
            }
        }
        Ok(())
    }

    /// One Meditation plus one Enlightenment phase, then a checkpoint if due.
    pub fn step(&mut self) -> Result<&RoundReport, RunError> {
        self.meditation_round()?;
        self.enlightenment_round()?;
        let out = &self.state.config.output;
        if let Some(dir) = &out.dir {
            if out.checkpoint_every > 0 && self.state.round % out.checkpoint_every == 0 {
                checkpoint::save(&self.state, &dir.join("checkpoints").join(format!("round-{:04}.json", self.state.round)))?;
            }
        }
        Ok(self.state.reports.last().expect("just pushed"))
    }

    pub fn report(&self) -> FusionReport {
        let st = &self.state;
        FusionReport {
            rounds: st.reports.clone(),
            level_counts: level_counts(&st.tree),
            tree: st.tree.clone(),
            posteriors: st.posteriors.clone(),
            posterior_digest: st.posteriors.digest(),
            records: st.pools.len(),
            dataset_path: st.config.output.dir.as_ref().map(|d| d.join("dataset.jsonl")),
        }
    }

    /// Writes dataset, metrics, report and final checkpoint to the output dir.
    pub fn write_outputs(&self) -> Result<(), RunError> {
        let Some(dir) = &self.state.config.output.dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        export_dataset(&self.state.pools, &dir.join("dataset.jsonl"))?;
        write_metrics(&self.state.reports, &dir.join("metrics.jsonl"))?;
        let mut report = serde_json::to_vec_pretty(&self.report()).expect("report serializes");
        report.push(b'\n');
        std::fs::write(dir.join("report.json"), report)?;
        checkpoint::save(&self.state, &dir.join("checkpoints").join("final.json"))?;
        Ok(())
    }

    /// Runs the remaining rounds and writes outputs.
    pub fn run_to_end(&mut self) -> Result<FusionReport, RunError> {
        while !self.is_finished() {
            self.step()?;
            log::debug!("round {} done", self.state.round - 1);
        }
        self.write_outputs()?;
        Ok(self.report())
    }
}

pub fn run(config: RunConfig) -> Result<FusionReport, RunError> {
    Orchestrator::new(config)?.run_to_end()
}
