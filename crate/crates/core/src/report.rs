//! Induction reports: line-delimited JSON records for scripts and a short
//! human-readable summary.

use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;

use crate::search::{CandidateSummary, Progress, SearchReport};

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Record<'a> {
    Progress(&'a Progress),
    Candidate(&'a CandidateSummary),
    Summary {
        accepted: bool,
        iterations: usize,
        evaluated: usize,
        push_checks: usize,
        e_acc: f64,
        e_max: f64,
    },
}

fn line(r: &Record<'_>) -> String {
    serde_json::to_string(r).expect("report records serialise")
}

pub fn progress_line(p: &Progress) -> String {
    line(&Record::Progress(p))
}

/// Progress records followed by one record per ranked candidate and a
/// final summary. Contains nothing timing-dependent, so equal runs give
/// byte-equal output.
pub fn to_jsonl(progress: &[Progress], report: &SearchReport) -> String {
    let mut out = String::new();
    for p in progress {
        out.push_str(&progress_line(p));
        out.push('\n');
    }
    for c in &report.ranked {
        out.push_str(&line(&Record::Candidate(c)));
        out.push('\n');
    }
    out.push_str(&line(&Record::Summary {
        accepted: report.accepted,
        iterations: report.iterations,
        evaluated: report.evaluated,
        push_checks: report.push_checks,
        e_acc: report.e_acc,
        e_max: report.e_max,
    }));
    out.push('\n');
    out
}

pub fn summary(report: &SearchReport, wall: Duration) -> String {
    let mut s = String::new();
    let verdict = if report.accepted { "accepted" } else { "not accepted" };
    let _ = writeln!(
        s,
        "{verdict} after {} iterations ({} candidates, {:.2}s); e_acc = {:.4e}, e_max = {:.4e}",
        report.iterations,
        report.evaluated,
        wall.as_secs_f64(),
        report.e_acc,
        report.e_max
    );
    for c in &report.ranked {
        let _ = writeln!(
            s,
            "#{} {}  loss {:.6e}  C {}  f {:.6e}  [{}]",
            c.rank, c.inlined, c.loss, c.complexity, c.score, c.status
        );
    }
    s
}
