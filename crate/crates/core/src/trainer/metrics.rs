//! Append-only metric records written as JSONL and CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Annotation round; `None` for plain training records.
    pub round: Option<u64>,
    pub iteration: u64,
    pub labels: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub psnr: Option<f64>,
    pub losses: LossBreakdown,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, record: MetricsRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// JSONL with wall-clock time zeroed; identical across reruns of the same
    /// seed and configuration.
    pub fn deterministic_jsonl(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.records.iter_mut().for_each(|r| r.seconds = 0.0);
        copy.to_jsonl()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn to_csv(&self) -> Result<String> {
        let classes = self.records.iter().map(|r| r.per_class_iou.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "round", "iteration", "labels", "miou", "psnr", "loss_total", "loss_rgb", "loss_depth", "loss_semantic",
            "loss_feature", "seconds",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..classes).map(|c| format!("iou_{c}")));
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                r.round.map(|x| x.to_string()).unwrap_or_default(),
                r.iteration.to_string(),
                r.labels.to_string(),
                opt(r.miou),
                opt(r.psnr),
                r.losses.total.to_string(),
                r.losses.rgb.to_string(),
                r.losses.depth.to_string(),
                r.losses.semantic.to_string(),
                r.losses.feature.to_string(),
                r.seconds.to_string(),
            ];
            row.extend((0..classes).map(|c| opt(r.per_class_iou.get(c).copied().flatten())));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.jsonl` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let jsonl = stem.with_extension("jsonl");
        let csv = stem.with_extension("csv");
        crate::scene::write_file(&jsonl, self.to_jsonl()?.as_bytes())?;
        crate::scene::write_file(&csv, self.to_csv()?.as_bytes())
    }
}
