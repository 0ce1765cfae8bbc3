use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{
    read_file, write_file, ABLATION_FILE, BASELINES_FILE, COHORT_TABLE_FILE, CURVE_AFTER_FILE, CURVE_BEFORE_FILE,
    CV_TABLE_FILE, PREPARE_FILE, RECAL_FILE, REPORT_FILE, SUBGROUPS_FILE,
};
use crate::error::Result;

/// Renders CSV text as a markdown table.
fn markdown_table(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.is_empty());
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    let mut out = format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
    for line in lines {
        writeln!(out, "| {} |", line.split(',').collect::<Vec<_>>().join(" | ")).unwrap();
    }
    out
}

fn section(out: &mut String, dir: &Path, title: &str, file: &str, as_table: bool) -> Result<()> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(());
    }
    let text = read_file(&path)?;
    writeln!(out, "## {title}\n").unwrap();
    if as_table {
        out.push_str(&markdown_table(&text));
    } else {
        out.push_str("```\n");
        out.push_str(&text);
        out.push_str("```\n");
    }
    out.push('\n');
    Ok(())
}

/// Collects the artifacts present in `run_dir` into `report.md`. Sections
/// whose artifacts are missing are left out; the output depends only on the
/// files read.
pub fn emit_report(run_dir: &Path) -> Result<PathBuf> {
    let mut out = String::from("# Run report\n\n");
    let sections: [(&str, &str, bool); 10] = [
        ("Cohort", PREPARE_FILE, false),
        ("Cohort characteristics", COHORT_TABLE_FILE, true),
        ("Cross-validation", CV_TABLE_FILE, true),
        ("Ablations", ABLATION_FILE, true),
        ("Test 2 before recalibration", "metrics_test2.csv", true),
        ("Recalibration", RECAL_FILE, false),
        ("Test 2 after recalibration", "metrics_test2_recalibrated.csv", true),
        ("Calibration curve before recalibration", CURVE_BEFORE_FILE, true),
        ("Calibration curve after recalibration", CURVE_AFTER_FILE, true),
        ("Comparison models on Test 2", BASELINES_FILE, true),
    ];
    for (title, file, table) in sections {
        section(&mut out, run_dir, title, file, table)?;
    }
    section(&mut out, run_dir, "Subgroups (recalibrated Test 2)", SUBGROUPS_FILE, true)?;
    write_file(run_dir, REPORT_FILE, out)
}
