//! CSV forms of certification outputs.

use serde::{Deserialize, Serialize};

use super::smoothing::{CurvePoint, ExampleCertificate};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct CertificateRow<'a> {
    example_id: usize,
    true_label: usize,
    predicted: &'a str,
    radius: f64,
    p_lower: f64,
    queries: u64,
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// `example_id,true_label,predicted,radius,p_lower,queries`; abstentions
/// are written as `abstain`.
pub fn certificates_csv(certs: &[ExampleCertificate]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if certs.is_empty() {
        w.write_record(["example_id", "true_label", "predicted", "radius", "p_lower", "queries"])?;
    }
    for c in certs {
        let predicted = c.result.label.map_or_else(|| "abstain".to_string(), |l| l.to_string());
        w.serialize(CertificateRow {
            example_id: c.example_id,
            true_label: c.true_label,
            predicted: &predicted,
            radius: c.result.radius,
            p_lower: c.result.p_lower,
            queries: c.result.queries_spent,
        })?;
    }
    finish(w)
}

pub fn curve_csv(curve: &[CurvePoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if curve.is_empty() {
        w.write_record(["radius", "certified_accuracy", "n_examples"])?;
    }
    for p in curve {
        w.serialize(p)?;
    }
    finish(w)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveRow {
    radius: f64,
    certified_accuracy: f64,
    n_examples: usize,
}

/// Parses and checks a curve CSV: finite radii ascending from 0, accuracy
/// in `[0, 1]` and non-increasing, one example count throughout.
pub fn parse_curve_csv(bytes: &[u8]) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["radius", "certified_accuracy", "n_examples"] {
        return Err(Error::parse(0, format!("unexpected curve header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut points: Vec<CurvePoint> = Vec::new();
    for (i, row) in r.deserialize::<CurveRow>().enumerate() {
        let row = row?;
        let line = i + 2;
        if !(row.radius.is_finite() && row.radius >= 0.0) {
            return Err(Error::parse(line, format!("line {line}: bad radius {}", row.radius)));
        }
        if !(0.0..=1.0).contains(&row.certified_accuracy) {
            return Err(Error::parse(line, format!("line {line}: accuracy {} outside [0, 1]", row.certified_accuracy)));
        }
        if let Some(prev) = points.last() {
            if row.radius <= prev.radius {
                return Err(Error::parse(line, format!("line {line}: radii must be strictly ascending")));
            }
            if row.certified_accuracy > prev.certified_accuracy {
                return Err(Error::parse(line, format!("line {line}: accuracy increases with radius")));
            }
            if row.n_examples != prev.n_examples {
                return Err(Error::parse(line, format!("line {line}: example count changes")));
            }
        } else if row.radius != 0.0 {
            return Err(Error::parse(line, "curve must start at radius 0"));
        }
        points.push(CurvePoint {
            radius: row.radius,
            certified_accuracy: row.certified_accuracy,
            n_examples: row.n_examples,
        });
    }
    if points.is_empty() {
        return Err(Error::parse(0, "curve has no rows"));
    }
    Ok(points)
}
