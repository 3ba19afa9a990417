use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::oracle::{QaRecord, SyntheticWorld};
use crate::tree::{DomainId, KnowledgeTree};
use crate::PosteriorTable;

/// Harvested records, grouped by leaf domain. Append-only.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<QaRecord>", into = "Vec<QaRecord>")]
pub struct DataPools {
    records: Vec<QaRecord>,
    by_leaf: BTreeMap<DomainId, Vec<usize>>,
}

impl From<Vec<QaRecord>> for DataPools {
    fn from(records: Vec<QaRecord>) -> Self {
        let mut pools = DataPools::default();
        for r in records {
            pools.push(r);
        }
        pools
    }
}

impl From<DataPools> for Vec<QaRecord> {
    fn from(p: DataPools) -> Self {
        p.records
    }
}

impl DataPools {
    pub fn push(&mut self, rec: QaRecord) {
        let leaf = rec.leaf().expect("harvested records end at a leaf");
        self.by_leaf.entry(leaf).or_default().push(self.records.len());
        self.records.push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn leaf_len(&self, leaf: DomainId) -> usize {
        self.by_leaf.get(&leaf).map_or(0, Vec::len)
    }

    pub fn leaf_record(&self, leaf: DomainId, i: usize) -> Option<&QaRecord> {
        self.by_leaf.get(&leaf)?.get(i).map(|&j| &self.records[j])
    }

    pub fn leaf_records(&self, leaf: DomainId) -> impl Iterator<Item = &QaRecord> {
        self.by_leaf.get(&leaf).into_iter().flatten().map(|&j| &self.records[j])
    }

    pub fn leaves(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.by_leaf.keys().copied()
    }

    /// All records, by round and then insertion order.
    pub fn records(&self) -> Vec<&QaRecord> {
        let mut v: Vec<&QaRecord> = self.records.iter().collect();
        v.sort_by_key(|r| r.round);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Meditation,
    Enlightenment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub round: u32,
    pub phase: Phase,
}

/// True iff `events` is exactly (Meditation, Enlightenment) for rounds 0..rounds.
pub fn is_strict_alternation(events: &[PhaseEvent], rounds: u32) -> bool {
    events.len() == 2 * rounds as usize
        && events.chunks(2).enumerate().all(|(r, pair)| {
            pair[0] == PhaseEvent { round: r as u32, phase: Phase::Meditation }
                && pair[1] == PhaseEvent { round: r as u32, phase: Phase::Enlightenment }
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level1Share {
    pub id: DomainId,
    pub name: String,
    pub paths: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrRecord {
    pub arm_id: DomainId,
    pub lambda_win: f64,
    pub lambda_all: f64,
    pub statistic: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub sampled: usize,
    pub valid: usize,
    /// Includes `blocked`.
    pub invalid: usize,
    /// Paths that could not start because every root child was deactivated.
    pub blocked: usize,
    pub sprouts_succeeded: u32,
    pub sprouts_failed: u32,
    pub deactivated: Vec<DomainId>,
    pub harvested: usize,
    /// Valid paths whose harvest failed after retries.
    pub discarded: usize,
    /// Sum of rewards over harvested valid paths divided by their count.
    pub mean_reward: Option<f64>,
    pub ir_tests: Vec<IrRecord>,
    pub ir_resets: Vec<DomainId>,
    pub level_counts: [usize; 3],
    pub level1_shares: Vec<Level1Share>,
    pub posterior_digest: String,
    pub enlightenment_drawn: usize,
    pub enlightenment_skipped: usize,
    pub pool_size: usize,
}

impl RoundReport {
    /// Level-1 domain with the most valid paths this round; lowest id wins ties.
    pub fn majority_level1(&self) -> Option<DomainId> {
        self.level1_shares
            .iter()
            .filter(|s| s.paths > 0)
            .max_by(|a, b| a.paths.cmp(&b.paths).then(b.id.cmp(&a.id)))
            .map(|s| s.id)
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub config: RunConfig,
    /// Completed rounds.
    pub round: u32,
    pub tree: KnowledgeTree,
    pub posteriors: PosteriorTable,
    pub pools: DataPools,
    pub world: Option<SyntheticWorld>,
    pub events: Vec<PhaseEvent>,
    pub reports: Vec<RoundReport>,
}
