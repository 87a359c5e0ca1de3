//! Aggregation of existing report files.

use std::fs;
use std::path::Path;

use metadr_core::evalx::{aggregate, render_table, Aggregate, RunReport};

use crate::{Failure, Format};

/// Groups reports by method (first-seen order) and aggregates each group.
/// Reports from different protocols or models are refused.
pub fn aggregate_groups(reports: Vec<RunReport>) -> Result<Vec<Aggregate>, Failure> {
    let mut groups: Vec<(String, Vec<RunReport>)> = Vec::new();
    for r in reports {
        if let Some(first) = groups.first().and_then(|(_, g)| g.first()) {
            for key in ["protocol", "model"] {
                if r.config.get(key) != first.config.get(key) {
                    return Err(Failure::invalid(format!(
                        "mixed configs: {} seed {} uses a different {key} than {} seed {}",
                        r.method, r.seed, first.method, first.seed
                    )));
                }
            }
        }
        match groups.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, g)) => {
                if g.iter().any(|o| o.seed == r.seed) {
                    return Err(Failure::invalid(format!("two reports for {} seed {}", r.method, r.seed)));
                }
                g.push(r);
            }
            None => groups.push((r.method.clone(), vec![r])),
        }
    }
    groups
        .iter()
        .map(|(m, g)| aggregate(g).map_err(|e| Failure::invalid(format!("{m}: mixed configs: {e}"))))
        .collect()
}

/// Per-stage mean curves of every aggregate in one CSV with a method column.
pub fn curves_csv(aggs: &[Aggregate]) -> String {
    let mut out = String::new();
    for (i, a) in aggs.iter().enumerate() {
        for (j, line) in a.curves_csv().lines().enumerate() {
            if j == 0 && i > 0 {
                continue;
            }
            out.push_str(if j == 0 { "method," } else { &a.method });
            if j > 0 {
                out.push(',');
            }
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

pub fn render(aggs: &[Aggregate], format: Format) -> String {
    match format {
        Format::Table => render_table(aggs),
        Format::Csv => curves_csv(aggs),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(aggs).expect("aggregates serialize");
            s.push('\n');
            s
        }
    }
}

pub fn cmd_report(files: &[std::path::PathBuf], format: Format, out: Option<&Path>) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| Failure::invalid(format!("{}: {e}", f.display())))?;
        reports.push(RunReport::from_json(&text).map_err(|e| Failure::invalid(format!("{}: {e}", f.display())))?);
    }
    let text = render(&aggregate_groups(reports)?, format);
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
