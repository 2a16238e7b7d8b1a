//! Per-task accuracy tables and accuracy-vs-task curves across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dfcil_core::trainer::{read_accuracy_csv, AccuracyRow, ACCURACY_CSV};
use dfcil_core::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SVG: &str = "accuracy_curve.svg";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunCurve {
    pub name: String,
    pub rows: Vec<AccuracyRow>,
}

pub fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Loads every readable run; unreadable or empty ones are skipped with a
/// warning.
pub fn load_runs(dirs: &[PathBuf]) -> Vec<RunCurve> {
    let mut out = Vec::new();
    for dir in dirs {
        match read_accuracy_csv(&dir.join(ACCURACY_CSV)) {
            Ok(rows) if !rows.is_empty() && rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)) => {
                out.push(RunCurve { name: run_name(dir), rows })
            }
            Ok(_) => log::warn!("skipping {}: no valid accuracy rows", dir.display()),
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }
    out
}

/// Fixed-width table: one row per task, one accuracy column (in %) per run.
pub fn text_table(runs: &[RunCurve]) -> String {
    let tasks = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let width = runs.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:>6}", "task");
    for r in runs {
        let _ = write!(s, "  {:>width$}", r.name);
    }
    s.push('\n');
    for t in 0..tasks {
        let _ = write!(s, "{:>6}", t + 1);
        for r in runs {
            match r.rows.get(t) {
                Some(row) => {
                    let _ = write!(s, "  {:>width$.2}", 100.0 * row.accuracy);
                }
                None => {
                    let _ = write!(s, "  {:>width$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn csv_table(runs: &[RunCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["run", "task", "num_seen", "accuracy"]).map_err(io)?;
    for r in runs {
        for row in &r.rows {
            w.write_record([
                r.name.clone(),
                row.task.to_string(),
                row.num_seen.to_string(),
                format!("{}", row.accuracy),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy (0-100 %) against task index, one polyline per run, legend by
/// run name.
pub fn svg_curve(runs: &[RunCurve]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let tasks = runs.iter().map(|r| r.rows.len()).max().unwrap_or(1).max(1);
    let x_of = |t: usize| {
        if tasks == 1 {
            left + pw / 2.0
        } else {
            left + pw * t as f64 / (tasks - 1) as f64
        }
    };
    let y_of = |acc: f64| top + ph * (1.0 - acc);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for k in 0..=5 {
        let acc = k as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0,
            (acc * 100.0) as i32
        );
    }
    for t in 0..tasks {
        let x = x_of(t);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            top + ph + 18.0,
            t + 1
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">task</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">accuracy (%)</text>"#,
        top + ph / 2.0
    );
    for (i, r) in runs.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = r
            .rows
            .iter()
            .enumerate()
            .map(|(t, row)| format!("{:.2},{:.2}", x_of(t), y_of(row.accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&r.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub struct ReportFiles {
    pub table: String,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Writes the text table, CSV and SVG for every readable run into `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let runs = load_runs(dirs);
    if runs.is_empty() {
        return Err(Error::Config("no completed runs to report".into()));
    }
    fs::create_dir_all(out)?;
    let table = text_table(&runs);
    let csv = out.join(REPORT_CSV);
    let svg = out.join(REPORT_SVG);
    fs::write(out.join(REPORT_TXT), &table)?;
    fs::write(&csv, csv_table(&runs)?)?;
    fs::write(&svg, svg_curve(&runs))?;
    Ok(ReportFiles { table, csv, svg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(name: &str, accs: &[f64]) -> RunCurve {
        RunCurve {
            name: name.into(),
            rows: accs
                .iter()
                .enumerate()
                .map(|(t, &a)| AccuracyRow { task: t, num_seen: 2 * (t + 1), accuracy: a })
                .collect(),
        }
    }

    #[test]
    fn table_has_one_row_per_task() {
        let t = text_table(&[curve("a", &[1.0, 0.9, 0.8, 0.7])]);
        assert_eq!(t.lines().count(), 5);
        assert!(t.contains("70.00"));
    }

    #[test]
    fn svg_has_a_curve_and_legend_per_run() {
        let s = svg_curve(&[curve("default", &[1.0, 0.8]), curve("no<syn>", &[1.0, 0.6])]);
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains(">default<"));
        assert!(s.contains("no&lt;syn&gt;"));
    }

    #[test]
    fn csv_lists_every_row() {
        let c = csv_table(&[curve("a", &[1.0, 0.5]), curve("b", &[0.9])]).unwrap();
        assert_eq!(c.lines().count(), 4);
        assert!(c.starts_with("run,task,num_seen,accuracy"));
    }
}
