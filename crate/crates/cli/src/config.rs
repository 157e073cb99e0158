//! The run configuration file: one JSON document for every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spegc::adapt::AdaptConfig;
use spegc::backbone::{PretrainConfig, PATCH};
use spegc::stream::{default_target_domains, DomainSpec, IMAGE_SIZE};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub steps_per_domain: usize,
    pub image_size: usize,
    /// Interleave all domains in one shuffled order instead of visiting them
    /// one after another.
    pub shuffle: bool,
    pub domains: Vec<DomainSpec>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            steps_per_domain: 100,
            image_size: IMAGE_SIZE,
            shuffle: false,
            domains: default_target_domains(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds pretraining, the stream and adaptation. `adapt.seed` may be left
    /// out or must agree with it.
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub stream: StreamConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let mut config: Self =
            serde_json::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        if config.adapt.seed != 0 && config.adapt.seed != config.seed {
            return Err(CliError::Input(format!(
                "config: adapt.seed {} conflicts with seed {}",
                config.adapt.seed, config.seed
            )));
        }
        config.adapt.seed = config.seed;
        Ok(config)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pretrain.validate()?;
        self.adapt.validate()?;
        let s = &self.stream;
        if s.steps_per_domain == 0 {
            return Err(CliError::Input(
                "stream.steps_per_domain must be positive".into(),
            ));
        }
        if s.image_size < PATCH {
            return Err(CliError::Input(format!(
                "stream.image_size must be at least {PATCH}"
            )));
        }
        if s.domains.is_empty() {
            return Err(CliError::Input("stream.domains is empty".into()));
        }
        for d in &s.domains {
            d.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn seed_propagates_and_conflicts_are_rejected() {
        let c = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.adapt.seed, 7);
        assert!(RunConfig::from_json(r#"{"seed": 7, "adapt": {"seed": 7}}"#).is_ok());
        let err = RunConfig::from_json(r#"{"seed": 7, "adapt": {"seed": 8}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_bad_syntax_are_input_errors() {
        for text in [
            r#"{"sede": 1}"#,
            r#"{"adapt": {"lamda": 0.1}}"#,
            "{\n  \"seed\": 1,\n}",
        ] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{err}");
        }
        let err = RunConfig::from_json("{\n  \"seed\": 1,\n}").unwrap_err();
        assert!(err.to_string().contains("line 3 column 1"), "{err}");
    }

    #[test]
    fn validation_catches_bad_stream() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.stream.domains.clear();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.stream.image_size = 3;
        assert!(c.validate().is_err());
    }
}
