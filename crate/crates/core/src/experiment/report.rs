//! Human-readable renderings of command results.

use std::fmt::Write;

use super::commands::{ComparisonReport, SeedSummary};
use crate::model::Evaluation;

fn metric(e: &Evaluation) -> String {
    match (e.accuracy, e.rmse) {
        (Some(a), _) => format!("acc {a:.4}"),
        (None, Some(r)) => format!("rmse {r:.4}"),
        _ => format!("loss {:.4}", e.loss),
    }
}

/// One line per finished seed.
pub fn seed_line(s: &SeedSummary) -> String {
    let eval = |w: &super::commands::WeightsSummary| {
        let e = w.test.as_ref().unwrap_or(&w.train);
        let split = if w.test.is_some() { "test" } else { "train" };
        format!("{split} {}", metric(e))
    };
    let mut line = format!("seed {}: final {}", s.seed, eval(&s.final_weights));
    if let Some(swa) = &s.swa {
        let _ = write!(line, ", swa {} ({} components)", eval(swa), s.swa_components.unwrap_or(0));
    }
    line
}

/// Aligned text table of a schedule comparison.
pub fn comparison_table(r: &ComparisonReport) -> String {
    let header = ["variant", "schedule", "lr_max", "lr_min", "cycle", "swa mean", "swa std", "final mean", "final std"];
    let rows: Vec<Vec<String>> = r
        .variants
        .iter()
        .map(|v| {
            let opt = |x: Option<String>| x.unwrap_or_else(|| "-".into());
            vec![
                v.variant.name.clone(),
                serde_json::to_value(v.variant.swa_schedule)
                    .ok()
                    .and_then(|x| x.as_str().map(String::from))
                    .unwrap_or_default(),
                format!("{}", v.variant.swa_lr_max),
                opt(v.variant.swa_lr_min.map(|x| x.to_string())),
                opt(v.variant.swa_cycle_len.map(|x| x.to_string())),
                format!("{:.4}", v.swa_mean),
                format!("{:.4}", v.swa_std),
                format!("{:.4}", v.final_mean),
                format!("{:.4}", v.final_std),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = format!("{} on {} split, seeds {:?}\n", r.metric, r.split, r.seeds);
    let mut push = |cells: &mut dyn Iterator<Item = &str>| {
        let line: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    push(&mut header.iter().copied());
    for row in &rows {
        push(&mut row.iter().map(String::as_str));
    }
    out
}
