#![allow(dead_code)]

use std::path::PathBuf;

use arbor_core::llm::{parse_marked, render_text, Marker, PromptKind, PromptParams};
use arbor_core::oracle::QuestionStyle;
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[derive(Deserialize)]
pub struct FixtureParams {
    pub main: String,
    pub secondary: String,
    pub sub: String,
    pub question: String,
    pub answers: Vec<String>,
}

fn style_key(s: QuestionStyle) -> String {
    serde_json::to_value(s).unwrap().as_str().unwrap().to_string()
}

/// Every (fixture name, rendered, expected) triple: 4 fixed kinds plus one
/// inquiry per style.
pub fn prompt_cases() -> Vec<(String, String, String)> {
    let dir = fixtures().join("prompts");
    let p: FixtureParams =
        serde_json::from_str(&std::fs::read_to_string(dir.join("params.json")).unwrap()).unwrap();
    let base = PromptParams {
        question: Some(p.question.clone()),
        answers: Some(p.answers.clone()),
        ..PromptParams::for_path(&[p.main.clone(), p.secondary.clone(), p.sub.clone()])
    };
    let mut jobs: Vec<(String, PromptKind, PromptParams)> = vec![
        ("expand_main".into(), PromptKind::ExpandMain, base.clone()),
        ("expand_secondary".into(), PromptKind::ExpandSecondary, base.clone()),
        ("expand_sub".into(), PromptKind::ExpandSub, base.clone()),
        ("select".into(), PromptKind::Select, base.clone()),
    ];
    for s in QuestionStyle::ALL {
        jobs.push((format!("inquiry_{}", style_key(s)), PromptKind::Inquiry, PromptParams { style: Some(s), ..base.clone() }));
    }
    jobs.into_iter()
        .map(|(name, kind, params)| {
            let expected = std::fs::read_to_string(dir.join(format!("{name}.txt"))).unwrap();
            (name, render_text(kind, &params).unwrap(), expected)
        })
        .collect()
}

#[derive(Deserialize)]
pub struct MarkerCase {
    pub marker: String,
    pub text: String,
    pub expect: Option<String>,
}

pub fn marker_cases() -> Vec<MarkerCase> {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("markers.json")).unwrap()).unwrap()
}

pub fn marker_of(name: &str) -> Marker {
    match name {
        "proposition" => Marker::Proposition,
        "question" => Marker::Question,
        "best_answer" => Marker::BestAnswer,
        other => panic!("unknown marker {other}"),
    }
}

/// Cases whose parse disagrees with the fixture.
pub fn marker_mismatches() -> Vec<String> {
    marker_cases()
        .iter()
        .filter_map(|c| {
            let got = parse_marked(&c.text, marker_of(&c.marker)).ok().map(str::to_owned);
            (got != c.expect).then(|| format!("{:?}: got {got:?}, want {:?}", c.text, c.expect))
        })
        .collect()
}
