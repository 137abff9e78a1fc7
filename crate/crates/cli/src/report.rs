use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use simdiag::hypothesis::TestReport;
use simdiag::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub report: TestReport,
}

/// Output of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub version: String,
    pub command: String,
    /// SHA-256 of the input files, or of the configuration for simulations.
    pub input_digest: String,
    pub config: serde_json::Value,
    pub reports: Vec<NamedReport>,
    #[serde(default)]
    pub matrices: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ReportDocument {
    pub fn new(command: &str, input_digest: String, config: serde_json::Value) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            input_digest,
            config,
            reports: Vec::new(),
            matrices: BTreeMap::new(),
            vectors: BTreeMap::new(),
            scalars: BTreeMap::new(),
            flags: BTreeMap::new(),
            labels: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn report(&mut self, name: impl Into<String>, report: TestReport) {
        self.reports.push(NamedReport {
            name: name.into(),
            report,
        });
    }

    pub fn matrix(&mut self, name: impl Into<String>, m: &Mat) {
        self.matrices.insert(name.into(), rows(m));
    }

    pub fn vector(&mut self, name: impl Into<String>, v: &Vector) {
        self.vectors.insert(name.into(), v.iter().copied().collect());
    }
}

pub fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use simdiag::hypothesis::generalized_wald;

    #[test]
    fn document_round_trips_through_json() {
        let r = Vector::from_row_slice(&[0.3, -0.1]);
        let report = generalized_wald(&r, &Mat::identity(2, 2), 2.0, 0.0).unwrap();
        let mut doc = ReportDocument::new("test", "0".repeat(64), serde_json::json!({"k": 1}));
        doc.report("wald", report);
        doc.matrix("m", &Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.5]));
        doc.vector("v", &r);
        doc.scalars.insert("x".into(), 0.125);
        doc.flags.insert("f".into(), true);
        doc.labels.push("a".into());
        let text = serde_json::to_string(&doc).unwrap();
        let back: ReportDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
    }
}
