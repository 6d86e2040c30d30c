use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub k: Option<usize>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
}

impl EvalReport {
    pub fn value(&self, metric: &str, k: Option<usize>) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.k == k)
            .map(|r| r.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "checkpoint {}  config {}  seed {}", self.checkpoint_id, self.config_hash, self.seed).unwrap();
        writeln!(out, "{:<26} {:>4} {:<10} {:>8}", "metric", "k", "split", "value").unwrap();
        for r in &self.records {
            let k = r.k.map_or("-".to_string(), |k| k.to_string());
            writeln!(out, "{:<26} {:>4} {:<10} {:>8.4}", r.metric, k, r.split, r.value).unwrap();
        }
        out
    }
}
