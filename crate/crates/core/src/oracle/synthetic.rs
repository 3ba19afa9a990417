//! Synthetic model ensemble: each model has a latent answer-quality
//! probability per domain, and judging picks the best latent quality.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Answer, BackendError, ModelBackend, Question, QaRecord, QuestionStyle};
use crate::tree::{normalize_name, DomainId, KnowledgeTree};

pub const SKILL_MIN: f64 = 0.01;
pub const SKILL_MAX: f64 = 0.99;

fn clamp_skill(s: f64) -> f64 {
    s.clamp(SKILL_MIN, SKILL_MAX)
}

/// A model in the ensemble: the target, or a 1-based source index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelRef {
    Target,
    Source(usize),
}

impl fmt::Display for ModelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelRef::Target => f.write_str("target"),
            ModelRef::Source(i) => write!(f, "source-{i}"),
        }
    }
}

impl From<ModelRef> for String {
    fn from(m: ModelRef) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for ModelRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "target" {
            return Ok(ModelRef::Target);
        }
        s.strip_prefix("source-")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(ModelRef::Source)
            .ok_or_else(|| format!("model must be \"target\" or \"source-<n>\", got {s:?}"))
    }
}

/// Fixed skill for `model` on `domain` and everything below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillOverride {
    pub model: ModelRef,
    pub domain: String,
    pub skill: f64,
}

/// At the start of `round`, set `model`'s skill on `domain` (and its subtree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub round: u32,
    pub model: ModelRef,
    pub domain: String,
    pub skill: f64,
}

/// The `[world]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub sprout_success_rate: f64,
    pub learning_rate: f64,
    pub name_alphabet: Vec<String>,
    pub default_target_skill: f64,
    pub default_source_skill: f64,
    pub skills: Vec<SkillOverride>,
    pub drift: Vec<DriftEvent>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sprout_success_rate: 0.9,
            learning_rate: 0.0,
            name_alphabet: Vec::new(),
            default_target_skill: 0.3,
            default_source_skill: 0.7,
            skills: Vec::new(),
            drift: Vec::new(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("world.{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("sprout_success_rate", self.sprout_success_rate)?;
        unit("default_target_skill", self.default_target_skill)?;
        unit("default_source_skill", self.default_source_skill)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("world.learning_rate must be >= 0, got {}", self.learning_rate));
        }
        for s in &self.skills {
            unit("skills.skill", s.skill)?;
        }
        for d in &self.drift {
            unit("drift.skill", d.skill)?;
        }
        Ok(())
    }
}

/// Latent model capabilities plus the synthetic generators.
///
/// Skill for a leaf resolves from the most specific override on its path
/// (leaf, then secondary, then main domain), falling back to the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub sources: usize,
    pub sprout_success_rate: f64,
    pub learning_rate: f64,
    pub name_alphabet: Vec<String>,
    pub default_target_skill: f64,
    pub default_source_skill: f64,
    #[serde(with = "skill_table")]
    skills: BTreeMap<(ModelRef, String), f64>,
    pub drift_schedule: Vec<DriftEvent>,
}

mod skill_table {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<(ModelRef, String), f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<SkillOverride> = m
            .iter()
            .map(|((model, domain), skill)| SkillOverride {
                model: *model,
                domain: domain.clone(),
                skill: *skill,
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(ModelRef, String), f64>, D::Error> {
        let v = Vec::<SkillOverride>::deserialize(d)?;
        Ok(v.into_iter().map(|o| ((o.model, o.domain), o.skill)).collect())
    }
}

impl SyntheticWorld {
    pub fn new(config: &WorldConfig, sources: usize) -> Self {
        let mut world = SyntheticWorld {
            sources,
            sprout_success_rate: config.sprout_success_rate,
            learning_rate: config.learning_rate,
            name_alphabet: config.name_alphabet.clone(),
            default_target_skill: clamp_skill(config.default_target_skill),
            default_source_skill: clamp_skill(config.default_source_skill),
            skills: BTreeMap::new(),
            drift_schedule: config.drift.clone(),
        };
        for o in &config.skills {
            world.set_skill(o.model, &o.domain, o.skill);
        }
        world
    }

    pub fn set_skill(&mut self, model: ModelRef, domain: &str, skill: f64) {
        self.skills.insert((model, normalize_name(domain)), clamp_skill(skill));
    }

    fn default_skill(&self, model: ModelRef) -> f64 {
        match model {
            ModelRef::Target => self.default_target_skill,
            ModelRef::Source(_) => self.default_source_skill,
        }
    }

    /// Skill of `model` on the leaf whose path names are `names` (top down).
    pub fn skill_for_names(&self, model: ModelRef, names: &[String]) -> f64 {
        names
            .iter()
            .rev()
            .find_map(|n| self.skills.get(&(model, normalize_name(n))).copied())
            .unwrap_or_else(|| self.default_skill(model))
    }

    pub fn skill(&self, model: ModelRef, tree: &KnowledgeTree, leaf: DomainId) -> f64 {
        let names = tree.path_of(leaf).map(|p| tree.path_names(&p)).unwrap_or_default();
        self.skill_for_names(model, &names)
    }

    /// Applies every drift event scheduled for `round`. An event replaces
    /// the model's skill on the named domain and clears overrides beneath it.
    pub fn apply_drift(&mut self, round: u32, tree: &KnowledgeTree) {
        let events: Vec<DriftEvent> = self
            .drift_schedule
            .iter()
            .filter(|e| e.round == round)
            .cloned()
            .collect();
        for e in events {
            let key = normalize_name(&e.domain);
            if let Some(root) = tree.iter().find(|d| !d.is_unk && d.parent_id.is_some() && normalize_name(&d.name) == key) {
                let below: Vec<String> = tree
                    .iter()
                    .filter(|d| !d.is_unk && d.level > root.level)
                    .filter(|d| tree.path_of(d.id).is_ok_and(|p| p.domains.contains(&root.id)))
                    .map(|d| normalize_name(&d.name))
                    .collect();
                for n in below {
                    self.skills.remove(&(e.model, n));
                }
            }
            self.set_skill(e.model, &e.domain, e.skill);
        }
    }

    /// Each record raises the target's skill on its leaf by the learning rate.
    pub fn apply_training(&mut self, batch: &[QaRecord]) {
        if self.learning_rate == 0.0 {
            return;
        }
        for rec in batch {
            let Some(leaf) = rec.domains.last() else { continue };
            let s = self.skill_for_names(ModelRef::Target, &rec.domains) + self.learning_rate;
            self.set_skill(ModelRef::Target, leaf, s.min(SKILL_MAX));
        }
    }

    pub fn backend(&self, model: ModelRef) -> SyntheticBackend<'_> {
        SyntheticBackend { world: self, model }
    }

    pub fn source_backends(&self) -> Vec<SyntheticBackend<'_>> {
        (1..=self.sources).map(|i| self.backend(ModelRef::Source(i))).collect()
    }
}

pub struct SyntheticBackend<'w> {
    world: &'w SyntheticWorld,
    model: ModelRef,
}

impl SyntheticBackend<'_> {
    pub fn model(&self) -> ModelRef {
        self.model
    }
}

impl ModelBackend for SyntheticBackend<'_> {
    fn label(&self) -> String {
        self.model.to_string()
    }

    fn propose_domain(
        &self,
        tree: &KnowledgeTree,
        parent: DomainId,
        rng: &mut dyn RngCore,
    ) -> Result<Option<String>, BackendError> {
        if rng.random::<f64>() >= self.world.sprout_success_rate {
            return Ok(None);
        }
        let alphabet = &self.world.name_alphabet;
        if !alphabet.is_empty() {
            return Ok(Some(alphabet[rng.random_range(0..alphabet.len())].clone()));
        }
        let prefix = match tree.get(parent) {
            Some(d) if d.parent_id.is_some() => d.name.clone(),
            _ => "Field".to_string(),
        };
        Ok(Some(format!("{prefix} {}", rng.random_range(0..1_000_000u32))))
    }

    fn generate_question(
        &self,
        names: &[String],
        _leaf: DomainId,
        style: QuestionStyle,
        _rng: &mut dyn RngCore,
    ) -> Result<String, BackendError> {
        let style = serde_json::to_value(style).expect("style serializes");
        Ok(format!(
            "[{}] Question on {} (asked by {})",
            style.as_str().unwrap_or_default(),
            names.join(" → "),
            self.model
        ))
    }

    fn answer(&self, question: &Question, rng: &mut dyn RngCore) -> Result<Answer, BackendError> {
        let skill = self.world.skill_for_names(self.model, &question.domains);
        let good = rng.random::<f64>() < skill;
        Ok(Answer {
            text: format!("Answer by {} (quality {})", self.model, u8::from(good)),
            quality: Some(good),
        })
    }

    fn select_best(&self, _question: &Question, answers: &[Answer], rng: &mut dyn RngCore) -> Result<usize, BackendError> {
        if answers.is_empty() {
            return Err(BackendError::Parse("no answers to judge".into()));
        }
        let score = |a: &Answer| a.quality.unwrap_or(false);
        let best = answers.iter().map(score).max().expect("nonempty");
        let tied: Vec<usize> = answers
            .iter()
            .enumerate()
            .filter(|(_, a)| score(a) == best)
            .map(|(i, _)| i + 1)
            .collect();
        Ok(tied[rng.random_range(0..tied.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{harvest, sprout};
    use crate::rng::{derive_rng, Stream};
    use crate::tree::Path;

    fn chain(tree: &mut KnowledgeTree, names: [&str; 3]) -> Path {
        let a = tree.add_domain(tree.root(), names[0]).unwrap();
        let b = tree.add_domain(a, names[1]).unwrap();
        let c = tree.add_domain(b, names[2]).unwrap();
        tree.path_of(c).unwrap()
    }

    fn run_harvests(world: &SyntheticWorld, tree: &KnowledgeTree, path: &Path, n: u64, seed: u64) -> Vec<QaRecord> {
        let srcs = world.source_backends();
        let sources: Vec<&dyn ModelBackend> = srcs.iter().map(|b| b as &dyn ModelBackend).collect();
        let target = world.backend(ModelRef::Target);
        (0..n)
            .map(|i| {
                let mut r = derive_rng(seed, Stream::Harvest, &[i]);
                harvest(tree, path, &sources, &target, 0, &mut r).unwrap()
            })
            .collect()
    }

    /// Probability the target wins when its answer is good with probability
    /// `t` and each of `k` sources is good with probability `s`: enumerate the
    /// number of good sources.
    fn exact_target_win(k: u32, t: f64, s: f64) -> f64 {
        let choose = |n: u32, r: u32| -> f64 { (0..r).map(|i| (n - i) as f64 / (i + 1) as f64).product() };
        let mut p = 0.0;
        for g in 0..=k {
            let pg = choose(k, g) * s.powi(g as i32) * (1.0 - s).powi((k - g) as i32);
            // target good: ties among the good ones
            p += pg * t / (g + 1) as f64;
            if g == 0 {
                // everyone bad: uniform over k + 1
                p += pg * (1.0 - t) / (k + 1) as f64;
            }
        }
        p
    }

    fn world(target: f64, source: f64) -> WorldConfig {
        WorldConfig {
            default_target_skill: target,
            default_source_skill: source,
                ..WorldConfig::default()
        }
    }

    #[test]
    fn dominant_target_rarely_loses() {
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        let w = SyntheticWorld::new(&world(0.99, 0.01), 3);
        let recs = run_harvests(&w, &tree, &path, 200, 1);
        let zero = recs.iter().filter(|r| r.reward == 0).count();
        assert!(zero as f64 >= 0.95 * 200.0, "{zero}");
        assert!(exact_target_win(3, 0.99, 0.01) > 0.95);
    }

    #[test]
    fn dominant_source_wins() {
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        let mut cfg = world(0.01, 0.01);
        cfg.skills.push(SkillOverride { model: ModelRef::Source(1), domain: "M".into(), skill: 0.99 });
        let w = SyntheticWorld::new(&cfg, 3);
        let recs = run_harvests(&w, &tree, &path, 200, 2);
        let hits = recs.iter().filter(|r| r.best_index == 1 && r.reward == 1).count();
        assert!(hits as f64 >= 0.95 * 200.0, "{hits}");
    }

    #[test]
    fn strong_target_mean_reward() {
        // K = 2: exact target-win probability 0.840, so mean reward 0.160.
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        let w = SyntheticWorld::new(&world(0.9, 0.1), 2);
        let recs = run_harvests(&w, &tree, &path, 500, 3);
        let mean = recs.iter().map(|r| f64::from(r.reward)).sum::<f64>() / 500.0;
        let expect = 1.0 - exact_target_win(2, 0.9, 0.1);
        assert!((expect - 0.16).abs() < 1e-3);
        assert!(mean <= 0.2, "{mean}");
        // 4 standard errors
        assert!((mean - expect).abs() < 4.0 * (expect * (1.0 - expect) / 500.0).sqrt());
    }

    #[test]
    fn leader_is_uniform() {
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        let w = SyntheticWorld::new(&WorldConfig::default(), 3);
        let recs = run_harvests(&w, &tree, &path, 3000, 4);
        for k in 1..=3 {
            let share = recs.iter().filter(|r| r.leader_id == k).count() as f64 / 3000.0;
            assert!((share - 1.0 / 3.0).abs() <= 0.03, "leader {k}: {share}");
        }
    }

    #[test]
    fn best_index_follows_source_order() {
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        for strong in 1..=3 {
            let mut cfg = world(0.01, 0.01);
            cfg.skills.push(SkillOverride { model: ModelRef::Source(strong), domain: "L".into(), skill: 0.99 });
            let w = SyntheticWorld::new(&cfg, 3);
            let recs = run_harvests(&w, &tree, &path, 200, 5);
            let hits = recs.iter().filter(|r| r.best_index == strong).count();
            assert!(hits >= 180, "source {strong}: {hits}");
        }
    }

    #[test]
    fn zero_sprout_rate_never_proposes() {
        let tree = KnowledgeTree::new();
        let cfg = WorldConfig { sprout_success_rate: 0.0, ..WorldConfig::default() };
        let w = SyntheticWorld::new(&cfg, 3);
        let srcs = w.source_backends();
        let sources: Vec<&dyn ModelBackend> = srcs.iter().map(|b| b as &dyn ModelBackend).collect();
        for i in 0..100 {
            let mut r = derive_rng(0, Stream::MeditationPath, &[i]);
            assert_eq!(sprout(&tree, tree.root(), &sources, &mut r), None);
        }
    }

    #[test]
    fn training_rule() {
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        let rec = |w: &SyntheticWorld| run_harvests(w, &tree, &path, 10, 6);

        let mut w = SyntheticWorld::new(&WorldConfig { learning_rate: 0.0, ..world(0.3, 0.7) }, 3);
        let before = w.clone();
        let batch = rec(&w);
        w.apply_training(&batch);
        assert_eq!(w, before);

        let mut w = SyntheticWorld::new(&WorldConfig { learning_rate: 0.01, ..world(0.3, 0.7) }, 3);
        let batch = rec(&w);
        w.apply_training(&batch);
        let leaf = path.leaf().unwrap();
        assert!((w.skill(ModelRef::Target, &tree, leaf) - 0.4).abs() < 1e-12);
        assert_eq!(w.skill(ModelRef::Source(1), &tree, leaf), 0.7);

        let mut w = SyntheticWorld::new(&WorldConfig { learning_rate: 0.05, ..world(0.99, 0.7) }, 3);
        w.apply_training(&batch);
        assert_eq!(w.skill(ModelRef::Target, &tree, leaf), 0.99);
    }

    #[test]
    fn drift_replaces_subtree_overrides() {
        let mut tree = KnowledgeTree::new();
        let path = chain(&mut tree, ["M", "S", "L"]);
        let leaf = path.leaf().unwrap();
        let mut cfg = world(0.3, 0.7);
        cfg.skills.push(SkillOverride { model: ModelRef::Target, domain: "L".into(), skill: 0.2 });
        cfg.drift.push(DriftEvent { round: 5, model: ModelRef::Target, domain: "M".into(), skill: 1.5 });
        let mut w = SyntheticWorld::new(&cfg, 2);
        assert_eq!(w.skill(ModelRef::Target, &tree, leaf), 0.2);
        w.apply_drift(4, &tree);
        assert_eq!(w.skill(ModelRef::Target, &tree, leaf), 0.2);
        w.apply_drift(5, &tree);
        assert_eq!(w.skill(ModelRef::Target, &tree, leaf), SKILL_MAX);
    }

    #[test]
    fn model_ref_parsing() {
        assert_eq!(ModelRef::try_from("target".to_string()), Ok(ModelRef::Target));
        assert_eq!(ModelRef::try_from("source-2".to_string()), Ok(ModelRef::Source(2)));
        assert!(ModelRef::try_from("source-0".to_string()).is_err());
        assert!(ModelRef::try_from("teacher".to_string()).is_err());
    }

    #[test]
    fn world_serde_round_trip() {
        let mut cfg = WorldConfig::default();
        cfg.skills.push(SkillOverride { model: ModelRef::Source(1), domain: "Algebra".into(), skill: 0.4 });
        let w = SyntheticWorld::new(&cfg, 3);
        let back: SyntheticWorld = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back, w);
    }
}
