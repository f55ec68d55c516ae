//! One JSON object per logged training iteration.

use std::io::Write;

use facialgan_core::training::StepReport;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: u64,
    #[serde(rename = "L_adv_d")]
    pub adv_d: f64,
    #[serde(rename = "L_adv_g")]
    pub adv_g: f64,
    #[serde(rename = "L_sty")]
    pub sty: f64,
    #[serde(rename = "L_ds")]
    pub ds: f64,
    #[serde(rename = "L_cyc")]
    pub cyc: f64,
    #[serde(rename = "L_seg")]
    pub seg: f64,
    pub lambda_ds: f64,
}

impl From<&StepReport> for LogLine {
    fn from(r: &StepReport) -> Self {
        Self {
            iter: r.iter,
            adv_d: r.adv_d,
            adv_g: r.adv_g,
            sty: r.sty,
            ds: r.ds,
            cyc: r.cyc,
            seg: r.seg,
            lambda_ds: r.lambda_ds,
        }
    }
}

impl LogLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("finite values serialise")
    }

    pub fn write(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.to_json())
    }
}

/// Parse a log file, one object per non-empty line.
pub fn parse_log(text: &str) -> serde_json::Result<Vec<LogLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_and_round_trip() {
        let l = LogLine {
            iter: 3,
            adv_d: 1.25,
            adv_g: 0.5,
            sty: 0.1,
            ds: -0.2,
            cyc: 0.3,
            seg: 0.4,
            lambda_ds: 0.75,
        };
        let j = l.to_json();
        assert_eq!(
            j,
            r#"{"iter":3,"L_adv_d":1.25,"L_adv_g":0.5,"L_sty":0.1,"L_ds":-0.2,"L_cyc":0.3,"L_seg":0.4,"lambda_ds":0.75}"#
        );
        assert_eq!(parse_log(&format!("{j}\n{j}\n")).unwrap(), vec![l, l]);
    }
}
