//! Table emission: a compression table and a metric table, tab-separated and
//! aligned-text variants, with best-per-preset marking and significance
//! asterisks.

use crate::error::{Error, Result};
use crate::harness::evaluate::RunReport;
use crate::toystack::Task;
use std::path::Path;

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Rows sorted for deterministic emission: preset name, then adapter name.
fn sorted_indices(reports: &[RunReport]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..reports.len()).collect();
    idx.sort_by_key(|&i| {
        (
            reports[i].sfm_preset.name(),
            reports[i].adapter_kind.name(),
        )
    });
    idx
}

/// Best rows per preset group under the task metric; ties all marked, listed
/// in adapter-name order.
fn best_rows(reports: &[RunReport]) -> Vec<bool> {
    let mut best = vec![false; reports.len()];
    let presets: std::collections::BTreeSet<&str> =
        reports.iter().map(|r| r.sfm_preset.name()).collect();
    for preset in presets {
        let group: Vec<usize> = (0..reports.len())
            .filter(|&i| reports[i].sfm_preset.name() == preset)
            .collect();
        let score = |i: usize| -> Option<f64> {
            match reports[i].task {
                Task::Asr => reports[i].wer,
                Task::St => reports[i].bleu.map(|b| -b),
            }
        };
        let best_score = group
            .iter()
            .filter_map(|&i| score(i))
            .fold(f64::INFINITY, f64::min);
        if best_score.is_finite() {
            for &i in &group {
                if score(i) == Some(best_score) {
                    best[i] = true;
                }
            }
        }
    }
    best
}

/// Writes `compression.tsv`, `metrics.tsv` and `metrics.txt` under `out_dir`.
pub fn emit_report(reports: &[RunReport], out_dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to emit".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let order = sorted_indices(reports);
    let best = best_rows(reports);

    let mut compression = String::from("sfm_preset\tadapter\tcompression_ratio\tsampling_rate_hz\n");
    for &i in &order {
        let r = &reports[i];
        compression.push_str(&format!(
            "{}\t{}\t{:.2}\t{:.2}\n",
            r.sfm_preset, r.adapter_kind, r.mean_compression_ratio, r.out_rate_hz
        ));
    }
    let cpath = out_dir.join("compression.tsv");
    std::fs::write(&cpath, &compression).map_err(|e| Error::io(&cpath, e))?;

    let mut tsv = String::from(
        "sfm_preset\tadapter\ttask\twer\tbleu\tuntrained_wer\ttrainable_params\tref_tokens_per_second\tp_vs_base\tsignificant\tbest\n",
    );
    for &i in &order {
        let r = &reports[i];
        let (p_str, sig) = match r.p_vs_baseline {
            Some(p) => (format!("{p:.4}"), if p < 0.05 { "yes" } else { "no" }),
            None => ("-".into(), "baseline"),
        };
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{}\t{}\t{}\n",
            r.sfm_preset,
            r.adapter_kind,
            r.task.name(),
            fmt_opt(r.wer, 4),
            fmt_opt(r.bleu, 2),
            fmt_opt(r.untrained_wer, 4),
            r.trainable_params,
            r.ref_tokens_per_second,
            p_str,
            sig,
            if best[i] { "yes" } else { "no" }
        ));
    }
    let mpath = out_dir.join("metrics.tsv");
    std::fs::write(&mpath, &tsv).map_err(|e| Error::io(&mpath, e))?;

    let tpath = out_dir.join("metrics.txt");
    std::fs::write(&tpath, render_text_table(reports, &order, &best))
        .map_err(|e| Error::io(&tpath, e))?;
    Ok(())
}

fn render_text_table(reports: &[RunReport], order: &[usize], best: &[bool]) -> String {
    let header = [
        "preset", "adapter", "task", "wer", "bleu", "untr-wer", "ratio", "rate(Hz)", "params",
        "p-vs-base",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for &i in order {
        let r = &reports[i];
        let metric_mark = |v: Option<f64>, digits: usize| -> String {
            let s = fmt_opt(v, digits);
            if best[i] && v.is_some() {
                format!("_{s}_")
            } else {
                s
            }
        };
        // asterisk marks cells NOT significantly different from Base
        let p_str = match r.p_vs_baseline {
            Some(p) if p >= 0.05 => format!("{p:.3}*"),
            Some(p) => format!("{p:.3}"),
            None => "base".into(),
        };
        rows.push(vec![
            r.sfm_preset.to_string(),
            r.adapter_kind.to_string(),
            r.task.name().to_string(),
            metric_mark(r.wer, 3),
            metric_mark(r.bleu, 2),
            fmt_opt(r.untrained_wer, 3),
            format!("{:.2}", r.mean_compression_ratio),
            format!("{:.2}", r.out_rate_hz),
            format!("{}", r.trainable_params),
            p_str,
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if ri == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out.push('\n');
    out.push_str("_x_ best per preset group; * not significant vs the base adapter (p >= 0.05)\n");
    out.push_str("ratio/rate measured on the test split; BLEU stands in for COMET on the toy translation task\n");
    out
}
