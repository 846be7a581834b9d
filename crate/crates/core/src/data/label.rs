//! Per-sample label files (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::ProgramType;
use crate::targets::GtSegment;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Label {
    pub program_type: ProgramType,
    pub pcs: f64,
    pub segments: Vec<GtSegment>,
}

impl Label {
    /// Checks segments against a sequence of `len` seconds.
    pub fn validate(&self, len: usize, num_classes: usize) -> Result<()> {
        if !self.pcs.is_finite() || self.pcs < 0.0 {
            return Err(Error::Validation(format!("pcs {} is not a non-negative number", self.pcs)));
        }
        for (k, s) in self.segments.iter().enumerate() {
            s.validate(len as f64, num_classes)
                .map_err(|e| Error::Validation(format!("segment {k}: {e}")))?;
        }
        Ok(())
    }

    pub fn tes(&self) -> f64 {
        self.segments.iter().map(|s| s.score).sum()
    }
}

pub fn parse_label(text: &str) -> Result<Label> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("label: {e}")))
}

pub fn encode_label(label: &Label) -> String {
    let mut s = serde_json::to_string_pretty(label).expect("labels serialize");
    s.push('\n');
    s
}

pub fn read_label(path: &Path) -> Result<Label> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_shape() {
        let text = r#"{"program_type": "short", "pcs": 61.5,
            "segments": [{"start_s": 3, "end_s": 9.5, "class_id": 4, "score": 7.25}]}"#;
        let l = parse_label(text).unwrap();
        assert_eq!(l.program_type, ProgramType::Short);
        assert_eq!(l.segments[0].end, 9.5);
        assert_eq!(parse_label(&encode_label(&l)).unwrap(), l);
        l.validate(10, 22).unwrap();
        assert!(matches!(l.validate(9, 22), Err(Error::Validation(_))));
        assert!(matches!(l.validate(10, 4), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_text_is_format_error() {
        for t in ["", "{}", r#"{"program_type":"long","pcs":1,"segments":[]}"#, r#"{"program_type":"free","pcs":1,"segments":[],"x":1}"#] {
            assert!(matches!(parse_label(t), Err(Error::Format(_))), "{t}");
        }
    }
}
