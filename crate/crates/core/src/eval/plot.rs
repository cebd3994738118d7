//! Confusion-matrix heatmap as a standalone SVG, plus the raw counts as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::Metrics;
use crate::error::{Error, Result};

const CELL: usize = 56;
const MARGIN: usize = 72;

/// Row-normalised percentages rounded to 0.1 so that every row with support
/// sums to exactly 100.0 (largest-remainder rounding). Empty rows are zero.
pub fn row_percentages(metrics: &Metrics) -> Vec<Vec<f64>> {
    metrics
        .confusion
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return vec![0.0; row.len()];
            }
            // Work in tenths of a percent.
            let exact: Vec<f64> = row.iter().map(|&c| c as f64 * 1000.0 / total as f64).collect();
            let mut tenths: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
            let mut rest = 1000 - tenths.iter().sum::<u64>();
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                let fa = exact[a] - exact[a].floor();
                let fb = exact[b] - exact[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for j in order {
                if rest == 0 {
                    break;
                }
                tenths[j] += 1;
                rest -= 1;
            }
            tenths.into_iter().map(|t| t as f64 / 10.0).collect()
        })
        .collect()
}

fn fill(pct: f64) -> String {
    // White to dark blue.
    let t = (pct / 100.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

pub fn confusion_svg(metrics: &Metrics) -> String {
    let k = metrics.confusion.len();
    let pct = row_percentages(metrics);
    let size = MARGIN + k * CELL + 16;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle">predicted</text>"#,
        MARGIN + k * CELL / 2
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">true</text>"#,
        MARGIN + k * CELL / 2
    );
    for j in 0..k {
        let x = MARGIN + j * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{j}</text>"#, MARGIN - 8);
        let y = MARGIN + j * CELL + CELL / 2 + 4;
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{j}</text>"#, MARGIN - 8);
    }
    for (i, row) in pct.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="gray"/>"#,
                fill(p)
            );
            let color = if p > 50.0 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{p:.1}%</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Raw counts with a `true,pred_0,...` header.
pub fn confusion_csv(metrics: &Metrics) -> String {
    let k = metrics.confusion.len();
    let mut s = String::from("true");
    for j in 0..k {
        let _ = write!(s, ",pred_{j}");
    }
    s.push('\n');
    for (i, row) in metrics.confusion.iter().enumerate() {
        let _ = write!(s, "{i}");
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

/// Writes the heatmap to `path` and the counts next to it with a `.csv`
/// extension. Returns the CSV path.
pub fn export_confusion_plot(metrics: &Metrics, path: &Path) -> Result<PathBuf> {
    Metrics::from_confusion(metrics.confusion.clone())?;
    fs::write(path, confusion_svg(metrics)).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, confusion_csv(metrics)).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirds_round_to_a_full_row() {
        let m = Metrics::from_confusion(vec![vec![1, 1, 1], vec![0, 3, 0], vec![0, 0, 0]]).unwrap();
        let p = row_percentages(&m);
        assert_eq!(p[0], vec![33.4, 33.3, 33.3]);
        assert_eq!(p[1], vec![0.0, 100.0, 0.0]);
        assert_eq!(p[2], vec![0.0; 3]);
    }

    #[test]
    fn svg_has_one_annotation_per_cell() {
        let m = Metrics::from_confusion(vec![vec![8, 2], vec![3, 7]]).unwrap();
        let svg = confusion_svg(&m);
        assert_eq!(svg.matches('%').count(), 4);
        assert!(svg.contains(">80.0%<") && svg.contains(">30.0%<"));
    }

    #[test]
    fn csv_layout() {
        let m = Metrics::from_confusion(vec![vec![8, 2], vec![3, 7]]).unwrap();
        assert_eq!(confusion_csv(&m), "true,pred_0,pred_1\n0,8,2\n1,3,7\n");
    }
}
