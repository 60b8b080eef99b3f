//! Parsing of the `--data` argument.

use std::path::PathBuf;
use std::str::FromStr;

use pfgdf::data::{load_cifar10, synth_dataset, Dataset, SynthConfig};
use pfgdf::Error;

/// `synth`, `synth:seed=3,n_train=500,...` or `cifar10:DIR`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    Cifar10(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synth" => {
                let mut cfg = SynthConfig::default();
                for pair in rest.split(',').filter(|p| !p.is_empty()) {
                    let (key, value) = pair.split_once('=').ok_or_else(|| {
                        Error::Usage(format!("--data: {pair:?} is not key=value"))
                    })?;
                    let bad = |e: &dyn std::fmt::Display| {
                        Error::Usage(format!("--data: {key}={value}: {e}"))
                    };
                    match key {
                        "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                        "n_train" => cfg.n_train = value.parse().map_err(|e| bad(&e))?,
                        "n_eval" => cfg.n_eval = value.parse().map_err(|e| bad(&e))?,
                        "classes" => cfg.classes = value.parse().map_err(|e| bad(&e))?,
                        "size" => cfg.size = value.parse().map_err(|e| bad(&e))?,
                        "noise" => cfg.noise = value.parse().map_err(|e| bad(&e))?,
                        _ => {
                            return Err(Error::Usage(format!(
                                "--data: unknown synthetic option {key:?} (seed, n_train, n_eval, classes, size, noise)"
                            )))
                        }
                    }
                }
                Ok(DataSource::Synth(cfg))
            }
            "cifar10" if !rest.is_empty() => Ok(DataSource::Cifar10(rest.into())),
            "cifar10" => Err(Error::Usage(
                "--data cifar10 needs a directory: cifar10:DIR".into(),
            )),
            _ => Err(Error::Usage(format!(
                "--data {s:?}: expected synth[:key=value,...] or cifar10:DIR"
            ))),
        }
    }
}

impl DataSource {
    pub fn load(&self) -> pfgdf::Result<Dataset> {
        match self {
            DataSource::Synth(cfg) => synth_dataset(cfg),
            DataSource::Cifar10(dir) => load_cifar10(dir),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_synthetic_options() {
        let DataSource::Synth(cfg) = "synth:seed=4,n_train=100,noise=0.1".parse().unwrap() else {
            panic!("not synthetic");
        };
        assert_eq!((cfg.seed, cfg.n_train, cfg.noise), (4, 100, 0.1));
        assert_eq!(cfg.n_eval, SynthConfig::default().n_eval);
        assert_eq!(
            "synth".parse::<DataSource>().unwrap(),
            DataSource::Synth(SynthConfig::default())
        );
    }

    #[test]
    fn rejects_malformed_sources() {
        for bad in [
            "mnist",
            "synth:seed",
            "synth:depth=3",
            "synth:seed=x",
            "cifar10",
        ] {
            assert!(
                matches!(bad.parse::<DataSource>(), Err(Error::Usage(_))),
                "{bad}"
            );
        }
        assert_eq!(
            "cifar10:/data/c10".parse::<DataSource>().unwrap(),
            DataSource::Cifar10("/data/c10".into())
        );
    }
}
