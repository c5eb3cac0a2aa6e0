//! Side-by-side comparison of every certified defence in a run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::commands::{sha256_hex, Manifest, Timing};
use crate::certify::{parse_curve_csv, CurvePoint};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub defense: String,
    pub training_queries: u64,
    pub certification_queries: u64,
    /// Certified accuracy at each grid radius; the first entry is the SCA.
    pub accuracy: Vec<f64>,
    pub n_examples: usize,
    /// Defend plus certify wall-clock, when recorded.
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub radii: Vec<f64>,
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize)]
struct PlotPoint<'a> {
    x: f64,
    y: f64,
    series: &'a str,
}

impl Report {
    /// `defense,training_queries,certification_queries,n_examples,ca@r...`
    pub fn table_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "defense".to_string(),
            "training_queries".into(),
            "certification_queries".into(),
            "n_examples".into(),
        ];
        header.extend(self.radii.iter().map(|r| format!("ca@{r}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.defense.clone(),
                row.training_queries.to_string(),
                row.certification_queries.to_string(),
                row.n_examples.to_string(),
            ];
            rec.extend(row.accuracy.iter().map(|a| a.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// `(radius, certified accuracy, defence)` triples.
    pub fn plot_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["x", "y", "series"])?;
        }
        for row in &self.rows {
            for (&x, &y) in self.radii.iter().zip(&row.accuracy) {
                w.serialize(PlotPoint {
                    x,
                    y,
                    series: &row.defense,
                })?;
            }
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Aligned text table in percent, with wall-clock.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.defense.len()).max().unwrap_or(7).max(7);
        let mut s = format!("{:<width$}  {:>12}  {:>12}", "defense", "train_q", "certify_q");
        for r in &self.radii {
            let label = if *r == 0.0 { "SCA".to_string() } else { format!("RCA@{r}") };
            let _ = write!(s, "  {label:>9}");
        }
        s.push_str("  wall_s\n");
        for row in &self.rows {
            let _ = write!(
                s,
                "{:<width$}  {:>12}  {:>12}",
                row.defense, row.training_queries, row.certification_queries
            );
            for a in &row.accuracy {
                let _ = write!(s, "  {:>9.2}", 100.0 * a);
            }
            match row.wall_ms {
                Some(ms) => {
                    let _ = writeln!(s, "  {:.1}", ms as f64 / 1000.0);
                }
                None => s.push_str("  -\n"),
            }
        }
        s
    }
}

/// Collects `<out>/certify/*/curve.csv`, sorted by defence name. Runs must
/// share one radii grid.
pub fn collect(out_dir: &Path) -> Result<Report> {
    let certify_dir = out_dir.join("certify");
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&certify_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("curve.csv").is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(vec![format!(
            "no certification runs under {}; run certify first",
            certify_dir.display()
        )]));
    }
    let mut radii: Option<(String, Vec<f64>)> = None;
    let mut rows = Vec::new();
    for dir in dirs {
        let defense = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = std::fs::read(dir.join("curve.csv"))?;
        let curve: Vec<CurvePoint> = parse_curve_csv(&bytes).map_err(|e| {
            Error::Validation(vec![format!("{defense}/curve.csv: {e}")])
        })?;
        let grid: Vec<f64> = curve.iter().map(|p| p.radius).collect();
        match &radii {
            None => radii = Some((defense.clone(), grid)),
            Some((first, g)) if *g != grid => {
                return Err(Error::Validation(vec![format!(
                    "radii grid of {defense} {grid:?} differs from {first} {g:?}"
                )]))
            }
            Some(_) => {}
        }
        let manifest = Manifest::load(&dir)?;
        if manifest.outputs.get("curve.csv") != Some(&sha256_hex(&bytes)) {
            return Err(Error::Validation(vec![format!(
                "{defense}/curve.csv does not match its manifest"
            )]));
        }
        let defend_dir = out_dir.join("defend").join(&defense);
        let training_queries = Manifest::load(&defend_dir)
            .ok()
            .and_then(|m| m.queries.get("training").copied())
            .unwrap_or(0);
        let wall_ms = Timing::load(&dir).map(|t| {
            t.wall_ms + Timing::load(&defend_dir).map_or(0, |d| d.wall_ms)
        });
        rows.push(ReportRow {
            defense,
            training_queries,
            certification_queries: manifest.queries.get("certification").copied().unwrap_or(0),
            accuracy: curve.iter().map(|p| p.certified_accuracy).collect(),
            n_examples: curve.first().map_or(0, |p| p.n_examples),
            wall_ms,
        });
    }
    Ok(Report {
        radii: radii.map(|(_, g)| g).unwrap_or_default(),
        rows,
    })
}

/// Writes `table.csv`, `table.txt` and `plot_data.csv` under
/// `<out>/report`.
pub fn write_report(out_dir: &Path) -> Result<(PathBuf, Report)> {
    let report = collect(out_dir)?;
    let dir = out_dir.join("report");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("table.csv"), report.table_csv()?)?;
    std::fs::write(dir.join("table.txt"), report.render())?;
    std::fs::write(dir.join("plot_data.csv"), report.plot_csv()?)?;
    Ok((dir, report))
}
