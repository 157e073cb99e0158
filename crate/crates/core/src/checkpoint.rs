//! Versioned JSON checkpoints of a pretrained (and optionally adapted) model.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::Adapter;
use crate::backbone::{Backbone, PretrainConfig, PretrainReport};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub backbone: Backbone,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<Adapter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PretrainReport>,
}

impl Checkpoint {
    pub fn new(
        seed: u64,
        pretrain: PretrainConfig,
        backbone: Backbone,
        report: Option<PretrainReport>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            pretrain,
            backbone,
            adapter: None,
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Malformed {
            what: "checkpoint",
            detail: e.to_string(),
        })
    }

    /// Parses `text`, checking the format version before the body so that a
    /// file from another version reports the mismatch rather than a field error.
    pub fn from_json(text: &str) -> Result<Self> {
        let malformed = |e: serde_json::Error| Error::Malformed {
            what: "checkpoint",
            detail: e.to_string(),
        };
        let value: Value = serde_json::from_str(text).map_err(malformed)?;
        let found = value
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Malformed {
                what: "checkpoint",
                detail: "missing or non-integer format_version".into(),
            })?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let checkpoint: Self = serde_json::from_value(value).map_err(malformed)?;
        checkpoint.backbone.check()?;
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::rng::{Purpose, Rng};

    fn sample() -> Checkpoint {
        let backbone =
            Backbone::new(BackboneConfig::default(), &mut Rng::new(3, Purpose::Init)).unwrap();
        Checkpoint::new(3, PretrainConfig::default(), backbone, None)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let text = c.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn other_version_is_a_mismatch() {
        let mut value: Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        value["format_version"] = Value::from(2);
        value["extra"] = Value::from(true);
        let err = Checkpoint::from_json(&value.to_string()).unwrap_err();
        assert_eq!(
            err,
            Error::VersionMismatch {
                found: 2,
                expected: 1
            }
        );
    }

    #[test]
    fn garbage_is_malformed() {
        for text in ["not json", "{}", r#"{"format_version": 1}"#] {
            assert!(matches!(
                Checkpoint::from_json(text),
                Err(Error::Malformed { .. })
            ));
        }
    }
}
