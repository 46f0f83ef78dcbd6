//! Run configuration: training, data and protocol sections in one TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use ldcformer::metrics::{Protocol, ThresholdRule};
use ldcformer::train::TrainConfig;
use ldcformer::Error;
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest file; relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// `all`, `cross:<domain>` or `intra:<domain>[,<domain>...]`.
    pub spec: String,
    /// Held-out share of each (domain, class) stratum for intra protocols.
    pub test_fraction: f64,
    /// Seed of the intra split; defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    /// `eer`, `min-hter` or a fixed number.
    pub threshold: String,
    /// Images per scoring forward pass.
    pub score_batch: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            spec: "all".into(),
            test_fraction: 0.2,
            split_seed: None,
            threshold: "eer".into(),
            score_batch: 64,
        }
    }
}

/// Which samples a run trains on and which it evaluates.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// Train on everything; evaluation scores everything.
    All,
    Protocol(Protocol),
}

impl ProtocolConfig {
    pub fn rule(&self) -> Result<ThresholdRule, Error> {
        self.threshold.parse()
    }

    pub fn selection(&self, seed: u64) -> Result<Selection, Error> {
        let spec = self.spec.trim();
        if spec == "all" {
            return Ok(Selection::All);
        }
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("protocol {spec:?} must be all, cross:<domain> or intra:<domains>")))?;
        let domains: Vec<String> = rest.split(',').map(str::trim).filter(|d| !d.is_empty()).map(String::from).collect();
        if domains.is_empty() {
            return Err(Error::Usage(format!("protocol {spec:?} names no domain")));
        }
        match kind {
            "cross" if domains.len() == 1 => Ok(Selection::Protocol(Protocol::Cross {
                held_out: domains[0].clone(),
            })),
            "cross" => Err(Error::Usage("cross protocol holds out exactly one domain".into())),
            "intra" => Ok(Selection::Protocol(Protocol::Intra {
                domains,
                test_fraction: self.test_fraction,
                seed: self.split_seed.unwrap_or(seed),
            })),
            other => Err(Error::Usage(format!("unknown protocol kind {other:?}"))),
        }
    }
}

impl Selection {
    /// `(train, test)` indices.
    pub fn indices(&self, samples: &[ldcformer::data::Sample]) -> Result<(Vec<usize>, Vec<usize>), Error> {
        match self {
            Selection::All => {
                let all: Vec<usize> = (0..samples.len()).collect();
                Ok((all.clone(), all))
            }
            Selection::Protocol(p) => p.indices(samples),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Selection::All => "all".into(),
            Selection::Protocol(p) => p.name(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read `path`, resolving the manifest against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut c = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(m) = &c.data.manifest {
            c.data.manifest = Some(ldcformer::data::resolve(path.parent().unwrap_or(Path::new(".")), m));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        self.protocol.rule()?;
        self.protocol.selection(self.train.seed)?;
        if !(0.0..1.0).contains(&self.protocol.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} must lie in [0,1)",
                self.protocol.test_fraction
            )));
        }
        if self.protocol.score_batch == 0 {
            return Err(Error::Config("score_batch must be positive".into()));
        }
        Ok(())
    }

    /// Write the effective configuration into `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf, Error> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(Error::io(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1").is_err());
        assert!(RunConfig::from_toml("[extra]").is_err());
        assert!(RunConfig::from_toml("[protocol]\nspec = \"sideways:A\"").is_err());
        assert!(RunConfig::from_toml("[protocol]\nthreshold = \"median\"").is_err());
    }

    #[test]
    fn protocol_specs() {
        let p = ProtocolConfig {
            spec: "cross:B".into(),
            ..Default::default()
        };
        assert_eq!(
            p.selection(0).unwrap(),
            Selection::Protocol(Protocol::Cross { held_out: "B".into() })
        );
        let p = ProtocolConfig {
            spec: "intra:A, B".into(),
            ..Default::default()
        };
        let Selection::Protocol(Protocol::Intra { domains, seed, .. }) = p.selection(9).unwrap() else {
            panic!()
        };
        assert_eq!((domains, seed), (vec!["A".to_string(), "B".to_string()], 9));
        for bad in ["cross:A,B", "intra:", "A"] {
            let p = ProtocolConfig {
                spec: bad.into(),
                ..Default::default()
            };
            assert!(p.selection(0).is_err(), "{bad}");
        }
    }
}
