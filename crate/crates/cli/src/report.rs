//! Plain-text tables rendered from emitted CSVs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use genrec_core::eval::EvalReport;
use genrec_core::scaling::FIT_CSV_HEADER;
use serde::Deserialize;

use crate::error::{usage, CliError, CliResult};
use crate::units::format_duration;

#[derive(Debug, Clone, Deserialize)]
pub struct EvalRow {
    pub slice: String,
    pub delay_seconds: i64,
    pub count: usize,
    pub mrr: f64,
    pub relative_mrr: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FitRow {
    pub task: String,
    pub p0: f64,
    pub n0: f64,
    pub a: f64,
    pub rmse_offset: f64,
    pub rmse_log: f64,
    pub reduction: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &str) -> CliResult<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::File { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) },
        _ => CliError::Csv(e),
    })?;
    let got = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if got != header {
        return Err(genrec_core::Error::Input(format!("{}: expected header `{header}`, got `{got}`", path.display())).into());
    }
    Ok(rdr.deserialize().collect::<Result<Vec<T>, _>>()?)
}

pub fn read_eval(path: &Path) -> CliResult<Vec<EvalRow>> {
    read_rows(path, EvalReport::CSV_HEADER)
}

pub fn read_fits(path: &Path) -> CliResult<Vec<FitRow>> {
    read_rows(path, FIT_CSV_HEADER)
}

/// Left-aligned first column, right-aligned rest.
pub fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width = vec![0; cols];
    for r in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let line = |r: &[String]| {
        let mut s = String::new();
        for (i, c) in r.iter().enumerate() {
            let pad = width[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Ceiling fit versus log-linear fit per task.
pub fn scaling(fits: &[FitRow]) -> String {
    let header = strings(&["Task", "P0", "N0", "a", "RMSE offset (1e-3)", "RMSE log (1e-3)", "Reduction"]);
    let rows: Vec<Vec<String>> = fits
        .iter()
        .map(|f| {
            vec![
                f.task.clone(),
                format!("{:.3}", f.p0),
                format!("{:.3e}", f.n0),
                format!("{:.3}", f.a),
                format!("{:.2}", 1e3 * f.rmse_offset),
                format!("{:.2}", 1e3 * f.rmse_log),
                format!("{:.1}%", 100.0 * f.reduction),
            ]
        })
        .collect();
    let mut out = String::from("Scaling fits: offset power law vs log-linear\n\n");
    out.push_str(&table(&header, &rows));
    out
}

fn delays(rows: &[EvalRow]) -> Vec<i64> {
    rows.iter().map(|r| r.delay_seconds).collect::<BTreeSet<_>>().into_iter().collect()
}

fn slices(rows: &[EvalRow]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in rows {
        if !seen.contains(&r.slice) {
            seen.push(r.slice.clone());
        }
    }
    seen
}

fn find<'a>(rows: &'a [EvalRow], slice: &str, delay: i64) -> Option<&'a EvalRow> {
    rows.iter().find(|r| r.slice == slice && r.delay_seconds == delay)
}

/// MRR change relative to delay 0, per slice and serving delay.
pub fn staleness(rows: &[EvalRow]) -> String {
    let ds = delays(rows);
    let mut header = strings(&["Slice", "n", "MRR@0"]);
    header.extend(ds.iter().filter(|&&d| d != 0).map(|&d| format!("rel. MRR @{}", format_duration(d))));
    let body: Vec<Vec<String>> = slices(rows)
        .iter()
        .map(|s| {
            let base = find(rows, s, 0);
            let mut r = vec![
                s.clone(),
                base.map_or("-".into(), |b| b.count.to_string()),
                base.map_or("-".into(), |b| format!("{:.4}", b.mrr)),
            ];
            r.extend(
                ds.iter()
                    .filter(|&&d| d != 0)
                    .map(|&d| find(rows, s, d).map_or("-".into(), |x| format!("{:+.1}%", 100.0 * x.relative_mrr))),
            );
            r
        })
        .collect();
    let mut out = String::from("Staleness: MRR relative to fresh serving\n\n");
    out.push_str(&table(&header, &body));
    out
}

/// Candidate over baseline MRR per slice and delay.
pub fn comparison(title: &str, baseline: &[EvalRow], candidate: &[EvalRow], only: Option<&str>) -> CliResult<String> {
    let ds = delays(candidate);
    if ds != delays(baseline) {
        return usage("baseline and candidate reports cover different delays");
    }
    let mut header = strings(&["Slice"]);
    for &d in &ds {
        let tag = format_duration(d);
        header.push(format!("base @{tag}"));
        header.push(format!("cand @{tag}"));
        header.push(format!("gain @{tag}"));
    }
    let mut body = Vec::new();
    for s in slices(candidate).iter().filter(|s| only.is_none_or(|o| o == s.as_str())) {
        let mut r = vec![s.clone()];
        for &d in &ds {
            match (find(baseline, s, d), find(candidate, s, d)) {
                (Some(b), Some(c)) => {
                    r.push(format!("{:.4}", b.mrr));
                    r.push(format!("{:.4}", c.mrr));
                    r.push(if b.mrr > 0.0 { format!("{:+.1}%", 100.0 * (c.mrr / b.mrr - 1.0)) } else { "-".into() });
                }
                _ => r.extend(["-".to_string(), "-".into(), "-".into()]),
            }
        }
        body.push(r);
    }
    if body.is_empty() {
        return usage("no slice to compare");
    }
    let mut out = String::new();
    let _ = writeln!(out, "{title}\n");
    out.push_str(&table(&header, &body));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(slice: &str, d: i64, mrr: f64, rel: f64) -> EvalRow {
        EvalRow { slice: slice.into(), delay_seconds: d, count: 10, mrr, relative_mrr: rel }
    }

    #[test]
    fn table_alignment() {
        let t = table(&strings(&["a", "bb"]), &[strings(&["xyz", "1"])]);
        assert_eq!(t, "a    bb\n-------\nxyz   1\n");
    }

    #[test]
    fn staleness_layout() {
        let rows = [row("A", 0, 0.2, 0.0), row("A", 172_800, 0.1, -0.5)];
        let t = staleness(&rows);
        assert!(t.contains("rel. MRR @2d"));
        assert!(t.contains("-50.0%"));
    }

    #[test]
    fn comparison_gain() {
        let b = [row("A", 0, 0.2, 0.0)];
        let c = [row("A", 0, 0.25, 0.0)];
        let t = comparison("x", &b, &c, None).unwrap();
        assert!(t.contains("+25.0%"));
        assert!(comparison("x", &b, &c, Some("B")).is_err());
    }
}
