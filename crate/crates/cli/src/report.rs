use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const TOOL: &str = "dfmamba";

/// Machine-readable outcome of one subcommand.
///
/// `metrics` and `checks` depend only on the inputs and the seed; wall-clock
/// numbers live in `timings`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub timings: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, Value>,
    pub checks: BTreeMap<String, bool>,
    pub passed: bool,
}

impl RunReport {
    pub fn new(command: &str, seed: Option<u64>, config: Value) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            timings: BTreeMap::new(),
            metrics: BTreeMap::new(),
            checks: BTreeMap::new(),
            passed: true,
        }
    }

    pub fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(v).expect("metric serializes"));
    }

    pub fn timing(&mut self, key: &str, seconds: f64) {
        self.timings.insert(key.into(), seconds);
    }

    pub fn check(&mut self, key: &str, ok: bool) {
        self.checks.insert(key.into(), ok);
        self.passed &= ok;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let mut r = RunReport::new("gen", Some(3), serde_json::json!({"count": 2}));
        r.metric("samples", 2);
        r.timing("total_s", 0.5);
        r.check("ok", true);
        let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        r.check("bad", false);
        assert!(!r.passed);
    }
}
