//! Plot-ready CSVs and SVG charts from whatever a results directory holds.
//!
//! * every `curve.csv` becomes one line of `accuracy_vs_density.svg`;
//! * every CSV with an `id,barrier` header gets a histogram CSV and SVG;
//! * a `scatter.csv` (`config,mean_barrier,final_acc`) becomes a scatter plot.
//!
//! Everything is written to `<dir>/figures/`.

use std::path::{Path, PathBuf};

use super::svg::{self, Scale, Series};
use crate::error::{Error, Result};
use crate::stats::{histogram, histogram_csv};

const HISTOGRAM_BINS: usize = 30;

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n != "figures") {
                walk(&p, out)?;
            }
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn parse_rows(path: &Path, text: &str, columns: usize) -> Result<Vec<Vec<String>>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            if cells.len() == columns {
                Ok(cells)
            } else {
                Err(Error::format("csv", format!("{}: expected {columns} columns in `{l}`", path.display())))
            }
        })
        .collect()
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::format("csv", format!("`{s}` is not a number")))
}

fn label_for(root: &Path, file: &Path) -> String {
    let rel = file.parent().and_then(|p| p.strip_prefix(root).ok()).map(|p| p.display().to_string()).unwrap_or_default();
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (rel.is_empty(), stem.as_str()) {
        (true, _) => stem,
        (false, "curve") => rel,
        (false, _) => format!("{rel}/{stem}"),
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes figures for `dir` and returns the created files. An empty directory
/// (nothing recognizable in it) produces no files and a logged notice.
pub fn export_figures(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut csvs = Vec::new();
    walk(dir, &mut csvs)?;
    let mut curves = Vec::new();
    let mut barriers = Vec::new();
    let mut scatter = Vec::new();
    for path in &csvs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match text.lines().next().unwrap_or("") {
            "density,mean_test_acc,stderr,n" => {
                let pts = parse_rows(path, &text, 4)?.iter().map(|r| Ok((num(&r[0])?, num(&r[1])?))).collect::<Result<Vec<_>>>()?;
                curves.push(Series { label: label_for(dir, path), points: pts });
            }
            "id,barrier" => {
                let vals = parse_rows(path, &text, 2)?.iter().map(|r| num(&r[1])).collect::<Result<Vec<_>>>()?;
                barriers.push((label_for(dir, path), vals));
            }
            "config,mean_barrier,final_acc" => {
                for r in parse_rows(path, &text, 3)? {
                    scatter.push((num(&r[1])?, num(&r[2])?, r[0].clone()));
                }
            }
            _ => {}
        }
    }
    if curves.is_empty() && barriers.is_empty() && scatter.is_empty() {
        log::warn!("nothing to export in {}", dir.display());
        return Ok(Vec::new());
    }

    let fig = dir.join("figures");
    std::fs::create_dir_all(&fig).map_err(|e| Error::io(&fig, e))?;
    let mut written = Vec::new();
    if !curves.is_empty() {
        let mut csv = String::from("series,density,mean_test_acc\n");
        for c in &curves {
            for (d, a) in &c.points {
                csv.push_str(&format!("{},{d},{a}\n", c.label));
            }
        }
        write(fig.join("accuracy_vs_density.csv"), &csv, &mut written)?;
        let chart = svg::line_chart("Test accuracy vs density", "density (log scale)", "mean test accuracy", Scale::Log10, &curves);
        write(fig.join("accuracy_vs_density.svg"), &chart, &mut written)?;
    }
    for (label, vals) in &barriers {
        let bins = histogram(vals, HISTOGRAM_BINS);
        let name = slug(label);
        write(fig.join(format!("{name}_hist.csv")), &histogram_csv(&bins), &mut written)?;
        let bars: Vec<_> = bins.iter().map(|b| (b.left, b.right, b.count)).collect();
        write(fig.join(format!("{name}_hist.svg")), &svg::histogram(&format!("Per-example barrier: {label}"), "barrier", &bars), &mut written)?;
    }
    if !scatter.is_empty() {
        let chart = svg::scatter("Mean barrier vs final accuracy", "mean train loss barrier", "final test accuracy", &scatter);
        write(fig.join("barrier_vs_accuracy.svg"), &chart, &mut written)?;
    }
    Ok(written)
}
