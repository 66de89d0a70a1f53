//! Output files: the learning-curve table, the JSON summary and SVG plots.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::metrics::{to_db, Metric, MetricsSeries};
use super::{ExperimentResult, Summary};
use crate::error::{Error, Result};

/// Writes `algo,t,metric,scope,value,stderr`, every `stride`-th step plus
/// the last one.
pub fn write_series_csv<W: Write>(out: W, result: &ExperimentResult, stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Output(format!("csv: {e}"));
    w.write_record(["algo", "t", "metric", "scope", "value", "stderr"])
        .map_err(csv_err)?;
    for s in &result.series {
        let steps = s.mean.first().map_or(0, Vec::len);
        for t in (0..steps).filter(|&t| t % stride == 0 || t + 1 == steps) {
            for (i, label) in s.labels.iter().enumerate() {
                w.write_record([
                    s.algo.as_str(),
                    &t.to_string(),
                    &label.metric.to_string(),
                    &label.scope,
                    &s.mean[i][t].to_string(),
                    &s.stderr[i][t].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Output(format!("csv: {e}")))?;
    Ok(())
}

pub fn write_summary_json<W: Write>(out: W, summary: &Summary) -> Result<()> {
    serde_json::to_writer_pretty(out, summary).map_err(|e| Error::Output(format!("json: {e}")))
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Network-average learning curves in dB, with dashed theory levels where
/// available.
pub fn write_svg<W: Write>(
    mut out: W,
    metric: Metric,
    series: &[MetricsSeries],
    summary: &Summary,
) -> Result<()> {
    let curves: Vec<(&str, Vec<f64>)> = series
        .iter()
        .filter_map(|s| {
            Some((
                s.algo.as_str(),
                s.curve(metric, "net")?.iter().map(|&v| to_db(v)).collect(),
            ))
        })
        .collect();
    let levels: Vec<(usize, f64)> = series
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let th = summary.algorithm(&s.algo)?.theory.as_ref()?;
            Some((
                i,
                to_db(if metric == Metric::Msd {
                    th.msd_net
                } else {
                    th.emse_net
                }),
            ))
        })
        .collect();
    let finite = curves
        .iter()
        .flat_map(|(_, c)| c.iter().copied())
        .chain(levels.iter().map(|l| l.1))
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo < hi {
        ((lo / 5.0).floor() * 5.0, (hi / 5.0).ceil() * 5.0)
    } else {
        (lo - 1.0, lo + 1.0)
    };
    let steps = curves.iter().map(|c| c.1.len()).max().unwrap_or(1).max(2) - 1;
    let x = |t: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / steps as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
            x0 - 6.0,
            y(v) + 4.0
        );
        let t = steps * i / 4;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#,
            x(t),
            y0 + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{metric} (dB)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    // Thin long curves to at most ~2000 points.
    let stride = (steps / 2000).max(1);
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        let mut pen_up = true;
        for (t, &v) in c
            .iter()
            .enumerate()
            .filter(|(t, _)| t % stride == 0 || t + 1 == c.len())
        {
            if !v.is_finite() {
                pen_up = true;
                continue;
            }
            let _ = write!(
                d,
                "{}{:.1} {:.1} ",
                if pen_up { "M" } else { "L" },
                x(t),
                y(v.clamp(lo, hi))
            );
            pen_up = false;
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.2"/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            x1 - 120.0,
            y1 + 16.0 * (i as f64 + 1.0)
        );
    }
    for (i, v) in levels {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" x2="{x1}" y1="{0:.1}" y2="{0:.1}" stroke="{color}" stroke-dasharray="6 4"/>"#,
            y(v)
        );
    }
    s.push_str("</svg>\n");
    out.write_all(s.as_bytes())
        .map_err(|e| Error::Output(format!("svg: {e}")))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes `series.csv`, `summary.json`, `msd.svg` and `emse.svg` into `dir`,
/// creating it if needed. Returns the written paths.
pub fn write_outputs(
    dir: &Path,
    result: &ExperimentResult,
    summary: &Summary,
    stride: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = ["series.csv", "summary.json", "msd.svg", "emse.svg"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_series_csv(create(&paths[0])?, result, stride)?;
    write_summary_json(create(&paths[1])?, summary)?;
    write_svg(create(&paths[2])?, Metric::Msd, &result.series, summary)?;
    write_svg(create(&paths[3])?, Metric::Emse, &result.series, summary)?;
    Ok(paths)
}
