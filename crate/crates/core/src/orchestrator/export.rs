//! Line-delimited dataset and metrics output.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path as FsPath;

use serde::Serialize;

use super::state::{DataPools, RoundReport};
use crate::oracle::{QaRecord, QuestionStyle};
use crate::tree::DomainId;

#[derive(Debug, Serialize)]
pub struct DatasetLine<'a> {
    pub round: u32,
    pub main: &'a str,
    pub secondary: &'a str,
    pub sub: &'a str,
    pub style: QuestionStyle,
    pub question: &'a str,
    pub answer: &'a str,
    pub leader_id: usize,
    pub best_index: usize,
    pub reward: u8,
}

impl<'a> DatasetLine<'a> {
    pub fn new(r: &'a QaRecord) -> Self {
        let name = |i: usize| r.domains.get(i).map_or("", String::as_str);
        Self {
            round: r.round,
            main: name(0),
            secondary: name(1),
            sub: name(2),
            style: r.style,
            question: &r.question,
            answer: &r.best_answer,
            leader_id: r.leader_id,
            best_index: r.best_index,
            reward: r.reward,
        }
    }
}

fn create(path: &FsPath) -> io::Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_records<'a>(records: impl IntoIterator<Item = &'a QaRecord>, path: &FsPath) -> io::Result<usize> {
    let mut out = create(path)?;
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut out, &DatasetLine::new(r))?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Writes every pooled record, ordered by round then insertion.
pub fn export_dataset(pools: &DataPools, path: &FsPath) -> io::Result<usize> {
    write_records(pools.records(), path)
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum MetricLine<'a> {
    Round(&'a RoundReport),
    Ir {
        round: u32,
        arm_id: DomainId,
        lambda_win: f64,
        lambda_all: f64,
        statistic: f64,
        reject: bool,
    },
}

/// One `round` line per report followed by one `ir` line per tested arm.
pub fn write_metrics(reports: &[RoundReport], path: &FsPath) -> io::Result<usize> {
    let mut out = create(path)?;
    let mut n = 0;
    for rep in reports {
        serde_json::to_writer(&mut out, &MetricLine::Round(rep))?;
        out.write_all(b"\n")?;
        n += 1;
        for t in &rep.ir_tests {
            let line = MetricLine::Ir {
                round: rep.round,
                arm_id: t.arm_id,
                lambda_win: t.lambda_win,
                lambda_all: t.lambda_all,
                statistic: t.statistic,
                reject: t.reject,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
            n += 1;
        }
    }
    out.flush()?;
    Ok(n)
}
