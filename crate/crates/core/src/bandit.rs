//! Beta-Bernoulli arm posteriors and hierarchical Thompson sampling over the
//! domain tree.
//!
//! Sampling works on a read-only posterior snapshot. Tree growth (new domains,
//! deactivation flags on tree nodes) is visible immediately; every posterior
//! change is carried in a [`PathSampleResult`] and applied by [`commit_batch`].

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tree::{DomainId, KnowledgeTree, Path, LEAF_LEVEL};

/// Invalid sprout attempts tolerated on one path before it is abandoned.
pub const FAIL_BUDGET: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BanditError {
    #[error("no selectable arm under domain {0}")]
    AllDeactivated(DomainId),
    #[error("arm {0} is deactivated")]
    DeactivatedArm(DomainId),
    #[error("posterior is deactivated")]
    Deactivated,
    #[error("no complete chain of active named domains")]
    NoCompleteChain,
    #[error("expected {expected} rewards, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("reward must be 0 or 1, got {0}")]
    InvalidReward(u8),
    #[error("unknown domain {0}")]
    UnknownArm(DomainId),
}

/// Fixed-capacity FIFO of the most recent binary rewards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardWindow {
    capacity: usize,
    rewards: VecDeque<u8>,
}

impl RewardWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rewards: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, r: u8) {
        if self.capacity == 0 {
            return;
        }
        if self.rewards.len() == self.capacity {
            self.rewards.pop_front();
        }
        self.rewards.push_back(r);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rewards.len() == self.capacity
    }

    pub fn successes(&self) -> u64 {
        self.rewards.iter().map(|&r| u64::from(r)).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.rewards.iter().copied()
    }
}

/// Beta posterior over an arm's reward rate plus its current-epoch history.
///
/// `unk` arms carry no window. Deactivation stands in for `Beta(1, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmPosterior<T> {
    pub alpha: T,
    pub beta: T,
    pub window: Option<RewardWindow>,
    pub history_successes: u64,
    pub history_count: u64,
    pub deactivated: bool,
}

/// The parameters Thompson sampling needs from an arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaView<T> {
    pub alpha: T,
    pub beta: T,
    pub deactivated: bool,
}

impl<T: Scalar> ArmPosterior<T> {
    /// The uniform `Beta(1, 1)` prior with an empty history.
    pub fn prior(window: Option<usize>) -> Self {
        Self {
            alpha: T::one(),
            beta: T::one(),
            window: window.map(RewardWindow::new),
            history_successes: 0,
            history_count: 0,
            deactivated: false,
        }
    }

    pub fn mean(&self) -> T {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn view(&self) -> BetaView<T> {
        BetaView {
            alpha: self.alpha,
            beta: self.beta,
            deactivated: self.deactivated,
        }
    }

    /// Conjugate update with one binary reward.
    pub fn update(&mut self, r: u8) -> Result<(), BanditError> {
        if r > 1 {
            return Err(BanditError::InvalidReward(r));
        }
        if self.deactivated {
            return Err(BanditError::Deactivated);
        }
        self.alpha = self.alpha + T::from_count(u64::from(r));
        self.beta = self.beta + T::from_count(u64::from(1 - r));
        if let Some(w) = self.window.as_mut() {
            w.push(r);
        }
        self.history_successes += u64::from(r);
        self.history_count += 1;
        Ok(())
    }

    pub fn deactivate(&mut self) {
        self.deactivated = true;
    }
}

/// Free-function form of [`ArmPosterior::prior`] for an arm without a window.
pub fn init_posterior<T: Scalar>() -> ArmPosterior<T> {
    ArmPosterior::prior(None)
}

/// Thompson draw over `arms`; deactivated arms never take part. Ties go to
/// the earliest arm.
pub fn sample_arm<T: Scalar, R: Rng + ?Sized>(
    arms: &[(DomainId, BetaView<T>)],
    rng: &mut R,
) -> Option<DomainId> {
    let mut best: Option<(DomainId, T)> = None;
    for &(id, v) in arms {
        if v.deactivated {
            continue;
        }
        let draw = T::sample_beta(v.alpha, v.beta, rng);
        match best {
            Some((_, b)) if draw <= b => {}
            _ => best = Some((id, draw)),
        }
    }
    best.map(|(id, _)| id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArmRecord<T> {
    arm_id: DomainId,
    #[serde(flatten)]
    posterior: ArmPosterior<T>,
}

/// Posteriors for every arm the tree has produced. Arms without an entry
/// read as the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
#[serde(from = "PosteriorDoc<T>", into = "PosteriorDoc<T>")]
pub struct PosteriorTable<T> {
    window: usize,
    arms: BTreeMap<DomainId, ArmPosterior<T>>,
}

#[derive(Serialize, Deserialize)]
struct PosteriorDoc<T> {
    window: usize,
    arms: Vec<ArmRecord<T>>,
}

impl<T: Scalar> From<PosteriorDoc<T>> for PosteriorTable<T> {
    fn from(d: PosteriorDoc<T>) -> Self {
        Self {
            window: d.window,
            arms: d.arms.into_iter().map(|r| (r.arm_id, r.posterior)).collect(),
        }
    }
}

impl<T: Scalar> From<PosteriorTable<T>> for PosteriorDoc<T> {
    fn from(t: PosteriorTable<T>) -> Self {
        Self {
            window: t.window,
            arms: t
                .arms
                .into_iter()
                .map(|(arm_id, posterior)| ArmRecord { arm_id, posterior })
                .collect(),
        }
    }
}

impl<T: Scalar> PosteriorTable<T> {
    /// Empty table; named arms get sliding windows of width `window`.
    pub fn new(window: usize) -> Self {
        Self {
            window,
            arms: BTreeMap::new(),
        }
    }

    pub fn window_width(&self) -> usize {
        self.window
    }

    pub fn get(&self, id: DomainId) -> Option<&ArmPosterior<T>> {
        self.arms.get(&id)
    }

    pub fn get_mut(&mut self, id: DomainId) -> Option<&mut ArmPosterior<T>> {
        self.arms.get_mut(&id)
    }

    /// Entry for `id`, created as the prior when missing.
    pub fn entry(&mut self, tree: &KnowledgeTree, id: DomainId) -> Result<&mut ArmPosterior<T>, BanditError> {
        let d = tree.get(id).ok_or(BanditError::UnknownArm(id))?;
        let window = (!d.is_unk).then_some(self.window);
        Ok(self.arms.entry(id).or_insert_with(|| ArmPosterior::prior(window)))
    }

    pub fn view(&self, id: DomainId) -> BetaView<T> {
        self.arms.get(&id).map(ArmPosterior::view).unwrap_or(BetaView {
            alpha: T::one(),
            beta: T::one(),
            deactivated: false,
        })
    }

    pub fn is_deactivated(&self, id: DomainId) -> bool {
        self.arms.get(&id).is_some_and(|a| a.deactivated)
    }

    pub fn iter(&self) -> impl Iterator<Item = (DomainId, &ArmPosterior<T>)> {
        self.arms.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (DomainId, &mut ArmPosterior<T>)> {
        self.arms.iter_mut().map(|(k, v)| (*k, v))
    }
}

impl<T: Scalar + Serialize> PosteriorTable<T> {
    /// SHA-256 over the canonical serialized form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("posterior table serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathStatus {
    Valid,
    Invalid,
}

/// Net pseudo-count change for one `unk` arm produced while sampling a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnkUpdate {
    pub arm: DomainId,
    pub d_alpha: u32,
    pub d_beta: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sprouted {
    pub parent: DomainId,
    pub id: DomainId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSampleResult {
    pub path: Path,
    pub status: PathStatus,
    pub unk_updates: Vec<UnkUpdate>,
    pub sprouted: Vec<Sprouted>,
    pub deactivated: Option<DomainId>,
}

impl PathSampleResult {
    pub fn is_valid(&self) -> bool {
        self.status == PathStatus::Valid
    }

    pub fn sprout_successes(&self) -> u32 {
        self.unk_updates.iter().map(|u| u.d_alpha).sum()
    }

    pub fn sprout_failures(&self) -> u32 {
        self.unk_updates.iter().map(|u| u.d_beta).sum()
    }
}

fn selectable<T: Scalar>(tree: &KnowledgeTree, post: &PosteriorTable<T>, id: DomainId) -> bool {
    tree.get(id).is_some_and(|d| d.active) && !post.is_deactivated(id)
}

/// Samples one root-to-leaf path, expanding the tree through `sprout` when an
/// `unk` arm wins.
///
/// `sprout(tree, parent)` returns a proposed name for a new child of `parent`
/// or `None`. A failed sprout bumps the `unk` arm's beta (visible to the rest of
/// this path only) and the level is resampled. After [`FAIL_BUDGET`] failures
/// the path is invalid and its most recently appended arm, or the root-level
/// `unk` arm when nothing was appended, is deactivated in the tree.
pub fn sample_path_meditation<T, R, F>(
    tree: &mut KnowledgeTree,
    posteriors: &PosteriorTable<T>,
    mut sprout: F,
    rng: &mut R,
) -> Result<PathSampleResult, BanditError>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&KnowledgeTree, DomainId) -> Option<String>,
{
    let root = tree.root();
    let mut domains = vec![root];
    let mut cur = root;
    let mut fails = 0u32;
    let mut deltas: Vec<UnkUpdate> = Vec::new();
    let mut sprouted = Vec::new();

    while domains.len() <= usize::from(LEAF_LEVEL) && fails < FAIL_BUDGET {
        let arms: Vec<(DomainId, BetaView<T>)> = tree
            .children(cur)
            .map_err(|_| BanditError::UnknownArm(cur))?
            .iter()
            .filter(|&&c| selectable(tree, posteriors, c))
            .map(|&c| {
                let mut v = posteriors.view(c);
                if let Some(d) = deltas.iter().find(|u| u.arm == c) {
                    v.alpha = v.alpha + T::from_count(u64::from(d.d_alpha));
                    v.beta = v.beta + T::from_count(u64::from(d.d_beta));
                }
                (c, v)
            })
            .collect();
        let pick = sample_arm(&arms, rng).ok_or(BanditError::AllDeactivated(cur))?;
        if !tree.get(pick).is_some_and(|d| d.is_unk) {
            domains.push(pick);
            cur = pick;
            continue;
        }
        let slot = match deltas.iter().position(|u| u.arm == pick) {
            Some(i) => i,
            None => {
                deltas.push(UnkUpdate {
                    arm: pick,
                    d_alpha: 0,
                    d_beta: 0,
                });
                deltas.len() - 1
            }
        };
        let added = sprout(tree, cur).and_then(|name| {
            let id = tree.add_domain(cur, &name).ok()?;
            Some((id, name))
        });
        match added {
            Some((id, name)) => {
                deltas[slot].d_alpha += 1;
                sprouted.push(Sprouted { parent: cur, id, name });
                domains.push(id);
                cur = id;
            }
            None => {
                deltas[slot].d_beta += 1;
                fails += 1;
            }
        }
    }

    let valid = domains.len() == usize::from(LEAF_LEVEL) + 1;
    let deactivated = if valid {
        None
    } else {
        let target = if domains.len() > 1 {
            *domains.last().expect("nonempty")
        } else {
            tree.unk_child(root).ok_or(BanditError::UnknownArm(root))?
        };
        tree.set_active(target, false)
            .map_err(|_| BanditError::UnknownArm(target))?;
        Some(target)
    };
    Ok(PathSampleResult {
        path: Path { domains, valid },
        status: if valid { PathStatus::Valid } else { PathStatus::Invalid },
        unk_updates: deltas,
        sprouted,
        deactivated,
    })
}

/// Named nodes from which an all-selectable chain reaches a leaf.
fn complete_nodes<T: Scalar>(tree: &KnowledgeTree, post: &PosteriorTable<T>) -> HashSet<DomainId> {
    let mut complete = HashSet::new();
    for level in (0..=LEAF_LEVEL).rev() {
        for d in tree.iter().filter(|d| d.level == level && !d.is_unk) {
            if d.parent_id.is_some() && !selectable(tree, post, d.id) {
                continue;
            }
            let ok = level == LEAF_LEVEL
                || tree
                    .children(d.id)
                    .map(|kids| kids.iter().any(|k| complete.contains(k)))
                    .unwrap_or(false);
            if ok {
                complete.insert(d.id);
            }
        }
    }
    complete
}

/// Thompson sampling restricted to named, active arms that lead to a leaf.
/// Reads posteriors only.
pub fn sample_path_enlightenment<T: Scalar, R: Rng + ?Sized>(
    tree: &KnowledgeTree,
    posteriors: &PosteriorTable<T>,
    rng: &mut R,
) -> Result<Path, BanditError> {
    EnlightenmentSampler::new(tree, posteriors)?.sample(rng)
}

/// [`sample_path_enlightenment`] with the complete-chain set computed once,
/// for drawing many paths from an unchanging tree.
pub struct EnlightenmentSampler<'a, T> {
    tree: &'a KnowledgeTree,
    posteriors: &'a PosteriorTable<T>,
    complete: HashSet<DomainId>,
}

impl<'a, T: Scalar> EnlightenmentSampler<'a, T> {
    pub fn new(tree: &'a KnowledgeTree, posteriors: &'a PosteriorTable<T>) -> Result<Self, BanditError> {
        let complete = complete_nodes(tree, posteriors);
        if !complete.contains(&tree.root()) {
            return Err(BanditError::NoCompleteChain);
        }
        Ok(Self { tree, posteriors, complete })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Path, BanditError> {
        let root = self.tree.root();
        let mut domains = vec![root];
        let mut cur = root;
        while domains.len() <= usize::from(LEAF_LEVEL) {
            let arms: Vec<(DomainId, BetaView<T>)> = self
                .tree
                .children(cur)
                .map_err(|_| BanditError::UnknownArm(cur))?
                .iter()
                .filter(|k| self.complete.contains(k))
                .map(|&k| (k, self.posteriors.view(k)))
                .collect();
            cur = sample_arm(&arms, rng).ok_or(BanditError::NoCompleteChain)?;
            domains.push(cur);
        }
        Ok(Path { domains, valid: true })
    }
}

/// Applies a batch of sampling results in one serialized pass.
///
/// `rewards` is aligned with the valid results; `None` marks a valid path
/// whose harvest was discarded. Order: priors for sprouted domains, `unk`
/// deltas, path rewards, then deactivations.
pub fn commit_batch<T: Scalar>(
    tree: &KnowledgeTree,
    posteriors: &mut PosteriorTable<T>,
    results: &[PathSampleResult],
    rewards: &[Option<u8>],
) -> Result<(), BanditError> {
    let valid = results.iter().filter(|r| r.is_valid()).count();
    if valid != rewards.len() {
        return Err(BanditError::LengthMismatch {
            expected: valid,
            got: rewards.len(),
        });
    }
    if let Some(bad) = rewards.iter().flatten().find(|&&r| r > 1) {
        return Err(BanditError::InvalidReward(*bad));
    }
    for res in results {
        for s in &res.sprouted {
            posteriors.entry(tree, s.id)?;
        }
        for u in &res.unk_updates {
            let arm = posteriors.entry(tree, u.arm)?;
            arm.alpha = arm.alpha + T::from_count(u64::from(u.d_alpha));
            arm.beta = arm.beta + T::from_count(u64::from(u.d_beta));
        }
    }
    for (res, r) in results.iter().filter(|r| r.is_valid()).zip(rewards) {
        let Some(r) = *r else { continue };
        for &arm in res.path.arms() {
            posteriors
                .entry(tree, arm)?
                .update(r)
                .map_err(|_| BanditError::DeactivatedArm(arm))?;
        }
    }
    for res in results {
        if let Some(id) = res.deactivated {
            posteriors.entry(tree, id)?.deactivate();
        }
    }
    Ok(())
}
