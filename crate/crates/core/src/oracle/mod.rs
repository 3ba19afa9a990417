//! Model-ensemble protocols: domain proposal and election (sprout), question
//! generation with leader judging (harvest), and the binary reward derived
//! from the judge's choice.

mod synthetic;

pub use synthetic::{DriftEvent, ModelRef, SkillOverride, SyntheticBackend, SyntheticWorld, WorldConfig};

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{normalize_name, DomainId, KnowledgeTree, Path};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("credential variable {0} is not set")]
    AuthMissing(String),
    #[error("unparseable model output: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarvestError {
    #[error("question generation failed: {0}")]
    QuestionGenFailed(BackendError),
    #[error("answer collection failed for model {model}: {source}")]
    AnswerFailed { model: usize, source: BackendError },
    #[error("judge output unusable: {0}")]
    JudgeParseFailed(BackendError),
    #[error("path is not a complete chain of named domains")]
    InvalidPath,
    #[error("at least one source model is required")]
    NoSources,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("best index {best_index} outside 1..={max}")]
pub struct OutOfRange {
    pub best_index: usize,
    pub max: usize,
}

/// The six question styles a leader is asked to write in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStyle {
    StepByStep,
    OpenEnded,
    Coding,
    ComparativeTable,
    CrossDomain,
    CasualConversation,
}

impl QuestionStyle {
    pub const ALL: [QuestionStyle; 6] = [
        QuestionStyle::StepByStep,
        QuestionStyle::OpenEnded,
        QuestionStyle::Coding,
        QuestionStyle::ComparativeTable,
        QuestionStyle::CrossDomain,
        QuestionStyle::CasualConversation,
    ];

    /// The requirement sentence inserted into the question-generation prompt.
    pub fn instruction(self) -> &'static str {
        match self {
            QuestionStyle::StepByStep => "The question should be a high-difficulty one that requires a step-by-step solution, with the answer numbered accordingly.",
            QuestionStyle::OpenEnded => "The question should be open-ended and require the answer to include at least two different perspectives.",
            QuestionStyle::Coding => "The question should require coding to solve, with the answer presented in Markdown code block format.",
            QuestionStyle::ComparativeTable => "The question should require comparative analysis, with the answer displayed in a table format to show pros and cons.",
            QuestionStyle::CrossDomain => "The question should require association with knowledge from other fields (e.g., math + music).",
            QuestionStyle::CasualConversation => "The question should be styled as casual conversation and Q&A in daily life, with the tone and speaking style of the reply specified (e.g., using metaphors, rhyming).",
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }
}

/// A generated question bound to the leaf domain it was asked about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub text: String,
    pub leaf: DomainId,
    /// Path names from the main domain down to the leaf.
    pub domains: Vec<String>,
}

/// An answer. `quality` is the latent judgement used by synthetic backends;
/// live backends leave it empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answer {
    pub text: String,
    pub quality: Option<bool>,
}

/// The four capabilities the protocols need from a model.
pub trait ModelBackend: Send + Sync {
    fn label(&self) -> String;

    /// Proposes a new child for `parent`; `Ok(None)` when the model declines.
    fn propose_domain(
        &self,
        tree: &KnowledgeTree,
        parent: DomainId,
        rng: &mut dyn RngCore,
    ) -> Result<Option<String>, BackendError>;

    /// `names` are the three named domains of the path, top down.
    fn generate_question(
        &self,
        names: &[String],
        leaf: DomainId,
        style: QuestionStyle,
        rng: &mut dyn RngCore,
    ) -> Result<String, BackendError>;

    fn answer(&self, question: &Question, rng: &mut dyn RngCore) -> Result<Answer, BackendError>;

    /// 1-based index of the best answer.
    fn select_best(
        &self,
        question: &Question,
        answers: &[Answer],
        rng: &mut dyn RngCore,
    ) -> Result<usize, BackendError>;
}

/// One harvested question with its winning answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub path: Path,
    /// Names of the main, secondary and sub domain.
    pub domains: Vec<String>,
    pub question: String,
    pub best_answer: String,
    /// 1-based over the `K + 1` answers; the target answers last.
    pub best_index: usize,
    /// 1-based source index of the leader.
    pub leader_id: usize,
    pub reward: u8,
    pub round: u32,
    pub style: QuestionStyle,
}

impl QaRecord {
    pub fn leaf(&self) -> Option<DomainId> {
        self.path.leaf()
    }
}

/// 1 when a source answer won, 0 when the target's answer (index `K + 1`) won.
pub fn reward(best_index: usize, k: usize) -> Result<u8, OutOfRange> {
    if best_index == 0 || best_index > k + 1 {
        return Err(OutOfRange {
            best_index,
            max: k + 1,
        });
    }
    Ok(u8::from(best_index <= k))
}

/// Elects a name from raw proposals: names already in the tree are dropped,
/// the most frequent remaining name (compared after normalization) wins, and
/// ties are broken uniformly at random. Returns the first spelling seen.
pub fn elect<R: Rng + ?Sized>(tree: &KnowledgeTree, proposals: &[String], rng: &mut R) -> Option<String> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in proposals {
        let key = normalize_name(p);
        if key.is_empty() || tree.contains_name(p) {
            continue;
        }
        let c = counts.entry(key.clone()).or_insert(0);
        if *c == 0 {
            order.push((key, p.trim().to_string()));
        }
        *c += 1;
    }
    let top = counts.values().copied().max()?;
    let tied: Vec<&String> = order
        .iter()
        .filter(|(k, _)| counts[k] == top)
        .map(|(_, name)| name)
        .collect();
    Some(tied[rng.random_range(0..tied.len())].clone())
}

/// Collects one proposal from each source and elects a new child name for
/// `parent`. Backend failures count as missing proposals.
pub fn sprout(
    tree: &KnowledgeTree,
    parent: DomainId,
    sources: &[&dyn ModelBackend],
    rng: &mut dyn RngCore,
) -> Option<String> {
    let proposals: Vec<String> = sources
        .iter()
        .filter_map(|b| match b.propose_domain(tree, parent, rng) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("proposal from {} dropped: {e}", b.label());
                None
            }
        })
        .collect();
    elect(tree, &proposals, rng)
}

fn with_retry<T>(mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
    f().or_else(|_| f())
}

/// Runs one harvest over a complete path: a random leader writes a question
/// in a random style, every source and then the target answer it, and the
/// leader picks the best answer. Question generation, each answer, and the
/// judgement are each retried once.
pub fn harvest(
    tree: &KnowledgeTree,
    path: &Path,
    sources: &[&dyn ModelBackend],
    target: &dyn ModelBackend,
    round: u32,
    rng: &mut dyn RngCore,
) -> Result<QaRecord, HarvestError> {
    let leaf = path.leaf().ok_or(HarvestError::InvalidPath)?;
    if !path.valid || path.domains.iter().any(|d| tree.get(*d).is_none_or(|d| d.is_unk)) {
        return Err(HarvestError::InvalidPath);
    }
    if sources.is_empty() {
        return Err(HarvestError::NoSources);
    }
    let k = sources.len();
    let leader_idx = rng.random_range(0..k);
    let style = QuestionStyle::random(rng);
    let leader = sources[leader_idx];
    let names = tree.path_names(path);

    let text = with_retry(|| leader.generate_question(&names, leaf, style, rng))
        .map_err(HarvestError::QuestionGenFailed)?;
    let question = Question { text, leaf, domains: names.clone() };

    let mut answers = Vec::with_capacity(k + 1);
    for (i, m) in sources.iter().copied().chain(std::iter::once(target)).enumerate() {
        let a = with_retry(|| m.answer(&question, rng))
            .map_err(|source| HarvestError::AnswerFailed { model: i + 1, source })?;
        answers.push(a);
    }

    let best_index = with_retry(|| {
        let i = leader.select_best(&question, &answers, rng)?;
        if (1..=k + 1).contains(&i) {
            Ok(i)
        } else {
            Err(BackendError::Parse(format!("index {i} outside 1..={}", k + 1)))
        }
    })
    .map_err(HarvestError::JudgeParseFailed)?;
    let r = reward(best_index, k).expect("range checked above");

    Ok(QaRecord {
        path: path.clone(),
        domains: names,
        question: question.text,
        best_answer: answers[best_index - 1].text.clone(),
        best_index,
        leader_id: leader_idx + 1,
        reward: r,
        round,
        style,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reward_rule() {
        assert_eq!(reward(2, 3), Ok(1));
        assert_eq!(reward(4, 3), Ok(0));
        assert_eq!(reward(5, 3), Err(OutOfRange { best_index: 5, max: 4 }));
        assert!(reward(0, 3).is_err());
        for k in 1..10 {
            for i in 1..=k + 1 {
                assert_eq!(reward(i, k).unwrap(), 1 - u8::from(i == k + 1));
            }
        }
    }

    #[test]
    fn election_majority_and_existing() {
        let mut t = KnowledgeTree::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            elect(&t, &names(&["Algebra", "Algebra", "Topology"]), &mut r).as_deref(),
            Some("Algebra")
        );
        t.add_domain(t.root(), "Algebra").unwrap();
        t.add_domain(t.root(), "Topology").unwrap();
        assert_eq!(elect(&t, &names(&["Algebra", "topology ", "ALGEBRA"]), &mut r), None);
        assert_eq!(elect(&t, &[], &mut r), None);
        // normalized duplicates count together
        assert_eq!(
            elect(&t, &names(&["Geometry", " geometry", "Logic"]), &mut r).as_deref(),
            Some("Geometry")
        );
    }

    #[test]
    fn election_all_distinct_is_uniform() {
        let t = KnowledgeTree::new();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let props = names(&["A", "B", "C"]);
        let mut counts = HashMap::new();
        let n = 30_000;
        for _ in 0..n {
            *counts.entry(elect(&t, &props, &mut r).unwrap()).or_insert(0usize) += 1;
        }
        // chi-square, 2 dof, 0.001 critical value 13.82
        let e = n as f64 / 3.0;
        let chi: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi < 13.82, "{counts:?}");
    }

    #[test]
    fn election_matches_brute_force_over_small_multisets() {
        // every multiset of size <= 4 over a 3-name alphabet
        let alphabet = ["X", "Y", "Z"];
        let t = KnowledgeTree::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for size in 1..=4u32 {
            for code in 0..3usize.pow(size) {
                let mut c = code;
                let props: Vec<String> = (0..size)
                    .map(|_| {
                        let s = alphabet[c % 3].to_string();
                        c /= 3;
                        s
                    })
                    .collect();
                let mut freq = HashMap::new();
                for p in &props {
                    *freq.entry(p.clone()).or_insert(0) += 1;
                }
                let top = *freq.values().max().unwrap();
                let modes: Vec<&String> = freq.iter().filter(|(_, &v)| v == top).map(|(k, _)| k).collect();
                let trials = if modes.len() == 1 { 20 } else { 3000 };
                let mut seen: HashMap<String, usize> = HashMap::new();
                for _ in 0..trials {
                    *seen.entry(elect(&t, &props, &mut r).unwrap()).or_insert(0) += 1;
                }
                assert!(seen.keys().all(|k| modes.contains(&k)), "{props:?} -> {seen:?}");
                if modes.len() > 1 {
                    let e = trials as f64 / modes.len() as f64;
                    let chi: f64 = modes
                        .iter()
                        .map(|m| (*seen.get(*m).unwrap_or(&0) as f64 - e).powi(2) / e)
                        .sum();
                    // 0.001 critical values for 1 and 2 dof
                    let crit = if modes.len() == 2 { 10.83 } else { 13.82 };
                    assert!(chi < crit, "{props:?} -> {seen:?}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn sprout_never_returns_existing(
            existing in prop::collection::vec(0usize..8, 0..6),
            proposals in prop::collection::vec(0usize..12, 0..6),
            seed in any::<u64>(),
        ) {
            let pool = ["Ant", "Bee", "Cat", "Dog", "Eel", "Fox", "Gnu", "Hen", "Ibis", "Jay", "Kiwi", "Lynx"];
            let mut t = KnowledgeTree::new();
            for e in existing {
                let _ = t.add_domain(t.root(), pool[e]);
            }
            let props: Vec<String> = proposals.iter().map(|&i| pool[i].to_uppercase()).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            match elect(&t, &props, &mut r) {
                Some(name) => {
                    prop_assert!(!t.contains_name(&name));
                    prop_assert!(props.iter().any(|p| normalize_name(p) == normalize_name(&name)));
                }
                None => prop_assert!(props.iter().all(|p| t.contains_name(p))),
            }
        }
    }

    /// Backend with scripted behaviour for protocol tests.
    struct Scripted {
        answer_text: &'static str,
        judge: usize,
        question_failures: AtomicUsize,
        judge_failures: AtomicUsize,
    }

    impl Scripted {
        fn new(answer_text: &'static str, judge: usize) -> Self {
            Self {
                answer_text,
                judge,
                question_failures: AtomicUsize::new(0),
                judge_failures: AtomicUsize::new(0),
            }
        }
    }

    impl ModelBackend for Scripted {
        fn label(&self) -> String {
            self.answer_text.into()
        }
        fn propose_domain(&self, _: &KnowledgeTree, _: DomainId, _: &mut dyn RngCore) -> Result<Option<String>, BackendError> {
            Err(BackendError::Timeout)
        }
        fn generate_question(&self, names: &[String], _: DomainId, _: QuestionStyle, _: &mut dyn RngCore) -> Result<String, BackendError> {
            if self.question_failures.load(Ordering::SeqCst) > 0 {
                self.question_failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Transport("flaky".into()));
            }
            Ok(format!("Q about {}", names.join("/")))
        }
        fn answer(&self, _: &Question, _: &mut dyn RngCore) -> Result<Answer, BackendError> {
            Ok(Answer { text: self.answer_text.into(), quality: None })
        }
        fn select_best(&self, _: &Question, _: &[Answer], _: &mut dyn RngCore) -> Result<usize, BackendError> {
            if self.judge_failures.load(Ordering::SeqCst) > 0 {
                self.judge_failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Parse("no markers".into()));
            }
            Ok(self.judge)
        }
    }

    fn chain_tree() -> (KnowledgeTree, Path) {
        let mut t = KnowledgeTree::new();
        let a = t.add_domain(t.root(), "Mathematics").unwrap();
        let b = t.add_domain(a, "Algebra").unwrap();
        let c = t.add_domain(b, "Linear Algebra").unwrap();
        let p = t.path_of(c).unwrap();
        (t, p)
    }

    #[test]
    fn harvest_orders_answers_and_rewards() {
        let (t, p) = chain_tree();
        let s1 = Scripted::new("s1", 2);
        let s2 = Scripted::new("s2", 2);
        let target = Scripted::new("target", 1);
        let sources: [&dyn ModelBackend; 2] = [&s1, &s2];
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let rec = harvest(&t, &p, &sources, &target, 7, &mut r).unwrap();
        assert_eq!(rec.best_index, 2);
        assert_eq!(rec.best_answer, "s2");
        assert_eq!(rec.reward, 1);
        assert_eq!(rec.round, 7);
        assert_eq!(rec.domains, ["Mathematics", "Algebra", "Linear Algebra"]);

        let s1 = Scripted::new("s1", 3);
        let s2 = Scripted::new("s2", 3);
        let sources: [&dyn ModelBackend; 2] = [&s1, &s2];
        let rec = harvest(&t, &p, &sources, &target, 0, &mut r).unwrap();
        assert_eq!((rec.best_index, rec.best_answer.as_str(), rec.reward), (3, "target", 0));
    }

    #[test]
    fn harvest_retries_once_then_fails() {
        let (t, p) = chain_tree();
        let target = Scripted::new("target", 1);
        let mut r = ChaCha8Rng::seed_from_u64(3);

        let s = Scripted::new("s", 1);
        s.question_failures.store(1, Ordering::SeqCst);
        s.judge_failures.store(1, Ordering::SeqCst);
        assert!(harvest(&t, &p, &[&s], &target, 0, &mut r).is_ok());

        let s = Scripted::new("s", 1);
        s.question_failures.store(2, Ordering::SeqCst);
        assert!(matches!(
            harvest(&t, &p, &[&s], &target, 0, &mut r),
            Err(HarvestError::QuestionGenFailed(_))
        ));

        let s = Scripted::new("s", 1);
        s.judge_failures.store(2, Ordering::SeqCst);
        assert!(matches!(
            harvest(&t, &p, &[&s], &target, 0, &mut r),
            Err(HarvestError::JudgeParseFailed(_))
        ));

        let s = Scripted::new("s", 9);
        assert!(matches!(
            harvest(&t, &p, &[&s], &target, 0, &mut r),
            Err(HarvestError::JudgeParseFailed(_))
        ));
    }

    #[test]
    fn harvest_rejects_partial_path() {
        let (t, _) = chain_tree();
        let s = Scripted::new("s", 1);
        let partial = t.path_of(DomainId(2)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(harvest(&t, &partial, &[&s], &s, 0, &mut r), Err(HarvestError::InvalidPath));
    }

    #[test]
    fn sprout_drops_failing_backends() {
        let t = KnowledgeTree::new();
        let s = Scripted::new("s", 1);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sprout(&t, t.root(), &[&s, &s], &mut r), None);
    }

    #[test]
    fn style_texts_are_distinct() {
        let set: std::collections::HashSet<_> = QuestionStyle::ALL.iter().map(|s| s.instruction()).collect();
        assert_eq!(set.len(), 6);
    }
}
