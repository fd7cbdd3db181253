//! Markdown report over whatever results exist under the output root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use diffcl_core::text::LengthBucket;
use diffcl_core::EpochRecord;

use crate::artifacts::{ensure_dir, read_csv_rows, write_string, Layout};
use crate::experiments::{DifficultyRow, SettingSummary};
use crate::plots::{bar_chart, line_chart, Bar, Series};
use crate::CliError;

pub struct ReportSummary {
    pub path: PathBuf,
    pub figures: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

fn rel(from: &Path, to: &Path) -> String {
    // The report lives one level below the root.
    match to.strip_prefix(from.parent().unwrap_or(from)) {
        Ok(r) => format!("../{}", r.display()),
        Err(_) => to.display().to_string(),
    }
}

fn summary_table(out: &mut String, rows: &[SettingSummary]) {
    out.push_str("| setting | AUC | RMSE | runs |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} |",
            r.setting, r.mean_auc, r.std_auc, r.mean_rmse, r.std_rmse, r.runs
        );
    }
    out.push('\n');
}

fn summary_bars(rows: &[SettingSummary]) -> Vec<Bar> {
    rows.iter()
        .map(|r| Bar {
            label: r.setting.clone(),
            value: r.mean_auc,
            err: if r.std_auc.is_finite() { r.std_auc } else { 0.0 },
        })
        .collect()
}

/// Regenerate `report/report.md` and its figures. Missing inputs are
/// listed and skipped.
pub fn build_report(layout: &Layout) -> Result<ReportSummary, CliError> {
    let dir = layout.report();
    ensure_dir(&dir)?;
    let root = &layout.root;
    let mut md = String::from("# Experiment report\n\n");
    let mut figures = Vec::new();
    let mut skipped = Vec::new();
    let mut sections = 0;

    // Training curves.
    let mut runs: Vec<PathBuf> = fs::read_dir(layout.runs())
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    runs.sort();
    let mut series = Vec::new();
    for r in &runs {
        let h = r.join("history.csv");
        if !h.exists() {
            skipped.push(h);
            continue;
        }
        let rows: Vec<EpochRecord> = read_csv_rows(&h)?;
        let name = r.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        series.push((name, h, rows));
    }
    if series.is_empty() {
        skipped.push(layout.runs().join("*/history.csv"));
    } else {
        sections += 1;
        let fig = dir.join("training_curves.svg");
        let s: Vec<Series> = series
            .iter()
            .map(|(n, _, rows)| Series {
                name: n.clone(),
                points: rows.iter().map(|r| (r.epoch as f64, r.valid_auc)).collect(),
            })
            .collect();
        line_chart(&fig, "Validation AUC per epoch", "epoch", "AUC", &s)?;
        md.push_str("## Training runs\n\n![training curves](training_curves.svg)\n\n");
        md.push_str("| run | epochs | best valid AUC | history |\n|---|---|---|---|\n");
        for (n, h, rows) in &series {
            let best = rows.iter().map(|r| r.valid_auc).fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(md, "| {n} | {} | {best:.4} | [history.csv]({}) |", rows.len(), rel(&dir, h));
        }
        md.push('\n');
        figures.push(fig);
    }

    let abl = layout.ablations();
    let grids = [
        ("diff_cl", "Difficulty-aware negatives"),
        ("lambda_sweep", "Contrastive loss weight"),
        ("augment_sweep", "Augmentation strategies"),
    ];
    for (stem, title) in grids {
        let csv = abl.join(format!("{stem}.csv"));
        if !csv.exists() {
            skipped.push(csv);
            continue;
        }
        let rows: Vec<SettingSummary> = read_csv_rows(&csv)?;
        sections += 1;
        let fig = dir.join(format!("{stem}.svg"));
        if stem == "lambda_sweep" {
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.setting.parse().ok()?, r.mean_auc))).collect();
            line_chart(&fig, title, "lambda_c", "test AUC", &[Series { name: "AUC".into(), points: pts }])?;
        } else {
            bar_chart(&fig, title, "test AUC", &summary_bars(&rows))?;
        }
        let _ = writeln!(md, "## {title}\n\n![{stem}]({stem}.svg)\n\nSource: [{stem}.csv]({})\n", rel(&dir, &csv));
        summary_table(&mut md, &rows);
        figures.push(fig);
    }

    let csv = abl.join("difficulty_prediction.csv");
    if csv.exists() {
        let rows: Vec<DifficultyRow> = read_csv_rows(&csv)?;
        sections += 1;
        let fig = dir.join("difficulty_prediction.svg");
        let bars: Vec<Bar> = rows
            .iter()
            .map(|r| Bar {
                label: format!("{}:{}", r.kind, r.predictor),
                value: r.rmse,
                err: 0.0,
            })
            .collect();
        bar_chart(&fig, "Difficulty prediction RMSE (0-100)", "RMSE", &bars)?;
        let _ = writeln!(
            md,
            "## Difficulty prediction\n\n![difficulty prediction](difficulty_prediction.svg)\n\nSource: [difficulty_prediction.csv]({})\n\n| kind | predictor | RMSE | held-out items |\n|---|---|---|---|",
            rel(&dir, &csv)
        );
        for r in &rows {
            let _ = writeln!(md, "| {} | {} | {:.3} | {} |", r.kind, r.predictor, r.rmse, r.pairs);
        }
        md.push('\n');
        figures.push(fig);
    } else {
        skipped.push(csv);
    }

    let csv = abl.join("char_length.csv");
    if csv.exists() {
        let rows: Vec<LengthBucket> = read_csv_rows(&csv)?;
        sections += 1;
        let fig = dir.join("char_length.svg");
        let mid = |b: &LengthBucket| (b.lower + b.upper) as f64 / 2.0;
        line_chart(
            &fig,
            "Correctness by question length",
            "characters",
            "correctness",
            &[
                Series {
                    name: "mean".into(),
                    points: rows.iter().map(|b| (mid(b), b.mean_correctness)).collect(),
                },
                Series {
                    name: "median".into(),
                    points: rows.iter().map(|b| (mid(b), b.median_correctness)).collect(),
                },
            ],
        )?;
        let _ = writeln!(
            md,
            "## Correctness by text length\n\n![char length](char_length.svg)\n\nSource: [char_length.csv]({})\n",
            rel(&dir, &csv)
        );
        figures.push(fig);
    } else {
        skipped.push(csv);
    }

    if sections == 0 {
        md.push_str("No results found. Run `train` or `ablate` first, then `report` again.\n\n");
    }
    if !skipped.is_empty() {
        md.push_str("## Missing inputs\n\n");
        for s in &skipped {
            eprintln!("warning: skipping missing {}", s.display());
            let _ = writeln!(md, "- `{}`", s.strip_prefix(root).unwrap_or(s).display());
        }
        md.push('\n');
    }
    let path = dir.join("report.md");
    write_string(&path, &md)?;
    Ok(ReportSummary { path, figures, skipped })
}
