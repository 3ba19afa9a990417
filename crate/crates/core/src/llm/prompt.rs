//! Instruction templates for domain expansion, question generation and
//! answer selection, plus the bracket-marker response grammar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::QuestionStyle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ExpandMain,
    ExpandSecondary,
    ExpandSub,
    Inquiry,
    Select,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::ExpandMain,
        PromptKind::ExpandSecondary,
        PromptKind::ExpandSub,
        PromptKind::Inquiry,
        PromptKind::Select,
    ];

    /// Expansion prompt for a parent at `level` (0 is the root).
    pub fn expand_for_level(level: u8) -> Option<PromptKind> {
        match level {
            0 => Some(PromptKind::ExpandMain),
            1 => Some(PromptKind::ExpandSecondary),
            2 => Some(PromptKind::ExpandSub),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt {kind:?} requires parameter `{name}`")]
    MissingParam { kind: PromptKind, name: &'static str },
}

#[derive(Debug, Clone, Default)]
pub struct PromptParams {
    pub main: Option<String>,
    pub secondary: Option<String>,
    pub sub: Option<String>,
    pub style: Option<QuestionStyle>,
    pub question: Option<String>,
    pub answers: Option<Vec<String>>,
}

impl PromptParams {
    /// Params for a path given as names from the main domain down.
    pub fn for_path(names: &[String]) -> Self {
        Self {
            main: names.first().cloned(),
            secondary: names.get(1).cloned(),
            sub: names.get(2).cloned(),
            ..Self::default()
        }
    }
}

const REQUIREMENTS: &str = r"**STRICT REQUIREMENTS**:

                    1. Must propose **EXACTLY ONE** new domain name

                    2. The proposed domain must be a clearly defined academic field related to **natural sciences** (such as physics, chemistry), **social sciences** (such as law, philosophy), **humanities** (linguistics, art), **formal sciences** (such as mathematics, computer science), or **interdisciplinary** fields (such as medicine, social psychology, etc.).

**STRICT RESPONSE FORMAT**:
                    The proposed domain must be enclosed between [Proposition Start] and [Proposition End], following the format below:

                    [Proposition Start]proposed domain[Proposition End]

                    Now, please provide your proposed domain according to the requirements mentioned above.";

const EXPAND_MAIN_HEAD: &str = "I need to generate a hierarchical systematic knowledge tree. First, I need to determine a set of main subject domains, please use your world knowledge to propose a **Main Domain** that systematically taught in primary/secondary/higher education (e.g., in exact sciences, computer engineering, or other natural sciences and humanities), which should be as broad as possible to cover a wide range of child domains.";

const EXPAND_SECONDARY_HEAD: &str = "This is a path of a hierarchical systematic knowledge tree: {main}, and now you need to propose a subject domain that logically and structurally follows this path, i.e., the domain you propose must be a secondary domain of {main}.";

const EXPAND_SUB_HEAD: &str = "This is a path of a hierarchical systematic knowledge tree: {main} → {secondary}, and now you need to propose a subject domain that logically and structurally follows this path, i.e., the domain you propose must be a specific sub-domain of {secondary}.";

const INQUIRY: &str = r"Now I need to create high-quality SFT data for LLM training, so I need you to generate such data.

        For now, **you only need to create one question**. I will provide you with a specified main domain, its secondary domain, and a further refined sub-domain in the format [Main Domain]→[Secondary domain]→[Sub-Domain].


        The corresponding topic is:

        {main} → {secondary} → {sub}

        The question must meet these requirements:

        1. Strictly fall within the scope of [Sub-Domain] - neither too broad nor too narrow, and the stem of the question should first contain sufficient background information or relevant conditions

        2. The question you provide should be a relatively challenging, but it must be solvable, and the answer should be definitive

        3. {style}

        4. Must be as original and concise as possible

        5. The expression style of the question should be **as diverse as possible**

        6. Enclose your response strictly between [Question Start] and [Question End] as shown below:

        [Question Start]Question[Question End]

        Now provide **EXACTLY ONE** question for the sub-domain **{sub}** within secondary domain **{secondary}** of main domain **{main}**.";

const SELECT: &str = r"    Please compare and evaluate the quality of the multiple answers to the following question, and return the index of the best one using **Arabic numerals**:

                        **Question**

                        {question}

                        **Answers to be Evaluated**

                        {answers}

    **Evaluation Criteria**
                            1. Accuracy (40%): Whether the answer correctly solves the problem and match the required response style.
                            2. Clarity (30%): The expression is structured clearly and smoothly, and the content is concise without being verbose.
                            3. Completeness (20%): Whether all necessary details are covered.
                            4. Relevance (10%): Whether the answer closely relates to the question.

                            **Additional Constraints**
                            Incoherent and repetitive answers should be directly assigned a low score, regardless of whether they contain the correct answer.

                            **Output Requirements**
                            1. You only need to reply with which answer you consider to be the best answer, and return the index (1-digit) of the best answer enclosed between [Best Answer Start] and [Best Answer End], following the format below:

                            The best answer is [Best Answer Start]index[Best Answer End].

                            2. Only one index for the best answer can be returned.";

/// Candidate answers as `Answer i:` blocks in index order, blank-line separated.
pub fn format_answers(answers: &[String]) -> String {
    answers
        .iter()
        .enumerate()
        .map(|(i, a)| format!("Answer {}:\n{a}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn fill(kind: PromptKind, template: &str, params: &PromptParams) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("template braces are balanced");
        let name = &rest[open + 1..close];
        let missing = |name: &'static str| PromptError::MissingParam { kind, name };
        match name {
            "main" => out.push_str(params.main.as_deref().ok_or(missing("main"))?),
            "secondary" => out.push_str(params.secondary.as_deref().ok_or(missing("secondary"))?),
            "sub" => out.push_str(params.sub.as_deref().ok_or(missing("sub"))?),
            "style" => out.push_str(params.style.ok_or(missing("style"))?.instruction()),
            "question" => out.push_str(params.question.as_deref().ok_or(missing("question"))?),
            "answers" => out.push_str(&format_answers(params.answers.as_deref().ok_or(missing("answers"))?)),
            other => unreachable!("unknown placeholder {other}"),
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_text(kind: PromptKind, params: &PromptParams) -> Result<String, PromptError> {
    let expand = |head: &str| format!("{head}\n\n{REQUIREMENTS}");
    match kind {
        PromptKind::ExpandMain => fill(kind, &expand(EXPAND_MAIN_HEAD), params),
        PromptKind::ExpandSecondary => fill(kind, &expand(EXPAND_SECONDARY_HEAD), params),
        PromptKind::ExpandSub => fill(kind, &expand(EXPAND_SUB_HEAD), params),
        PromptKind::Inquiry => fill(kind, INQUIRY, params),
        PromptKind::Select => fill(kind, SELECT, params),
    }
}

/// Renders `kind` as a one-message user conversation.
pub fn render_prompt(kind: PromptKind, params: &PromptParams) -> Result<Vec<ChatMessage>, PromptError> {
    Ok(vec![ChatMessage::user(render_text(kind, params)?)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    Proposition,
    Question,
    BestAnswer,
}

impl Marker {
    pub const ALL: [Marker; 3] = [Marker::Proposition, Marker::Question, Marker::BestAnswer];

    pub fn start(self) -> &'static str {
        match self {
            Marker::Proposition => "[Proposition Start]",
            Marker::Question => "[Question Start]",
            Marker::BestAnswer => "[Best Answer Start]",
        }
    }

    pub fn end(self) -> &'static str {
        match self {
            Marker::Proposition => "[Proposition End]",
            Marker::Question => "[Question End]",
            Marker::BestAnswer => "[Best Answer End]",
        }
    }

    pub fn wrap(self, content: &str) -> String {
        format!("{}{content}{}", self.start(), self.end())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("no {start} ... {end} pair in response")]
pub struct MarkerNotFound {
    pub start: &'static str,
    pub end: &'static str,
}

/// Trimmed text between the first start marker and the first end marker after it.
pub fn parse_marked<'a>(text: &'a str, marker: Marker) -> Result<&'a str, MarkerNotFound> {
    let err = MarkerNotFound { start: marker.start(), end: marker.end() };
    let from = text.find(marker.start()).ok_or(err.clone())? + marker.start().len();
    let len = text[from..].find(marker.end()).ok_or(err)?;
    Ok(text[from..from + len].trim())
}

/// A judge index: one run of ASCII digits and nothing else.
pub fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

pub const MAX_DOMAIN_NAME: usize = 80;

/// Cleans a proposed domain name: newlines become spaces, at most 80 chars.
pub fn clean_domain_name(raw: &str) -> Option<String> {
    let flat: String = raw.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
    let capped: String = flat.trim().chars().take(MAX_DOMAIN_NAME).collect();
    let capped = capped.trim_end().to_string();
    (!capped.is_empty()).then_some(capped)
}
