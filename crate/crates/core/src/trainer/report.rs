use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the training report.
pub const REPORT_HEADER: [&str; 9] = [
    "epoch", "L_C_S", "L_C_T", "L_SCD", "L_D", "L_e", "total", "train_acc", "test_acc",
];

/// Step-averaged losses and accuracies of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_C_S")]
    pub l_c_s: f64,
    #[serde(rename = "L_C_T")]
    pub l_c_t: f64,
    #[serde(rename = "L_SCD")]
    pub l_scd: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    pub total: f64,
    pub train_acc: f64,
    /// Absent for epochs without a test evaluation.
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(REPORT_HEADER).unwrap();
        for r in &self.records {
            w.serialize(r).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != REPORT_HEADER {
            return Err(Error::Data(format!("report header must be {}", REPORT_HEADER.join(","))));
        }
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self { records })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Test accuracy of the last evaluated epoch.
    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_acc)
    }
}
