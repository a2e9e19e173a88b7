//! Flat `key=value` run configuration. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::TrainConfig;
use crate::pyramid::PyramidGeometry;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset manifest, relative to the config file's directory.
    pub manifest: Option<PathBuf>,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub bits: usize,
    pub branches: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            width: 64,
            heads: 8,
            ffn_hidden: 256,
            bits: 12,
            branches: 8,
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, path: &Path) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::data(path, format!("{key}: cannot parse '{value}'")))
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(path, format!("line {}: expected key=value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::data(path, format!("duplicate key '{}'", k.trim())));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        for (key, value) in parse_pairs(text, path)? {
            let v = value.as_str();
            let t = &mut c.train;
            match key.as_str() {
                "manifest" => c.manifest = Some(PathBuf::from(v)),
                "width" => c.width = parse_value(&key, v, path)?,
                "heads" => c.heads = parse_value(&key, v, path)?,
                "ffn_hidden" => c.ffn_hidden = parse_value(&key, v, path)?,
                "bits" => c.bits = parse_value(&key, v, path)?,
                "branches" => c.branches = parse_value(&key, v, path)?,
                "beta" => t.weights.beta = parse_value(&key, v, path)?,
                "gamma" => t.weights.gamma = parse_value(&key, v, path)?,
                "learning_rate" => t.learning_rate = parse_value(&key, v, path)?,
                "momentum" => t.momentum = parse_value(&key, v, path)?,
                "weight_decay" => t.weight_decay = parse_value(&key, v, path)?,
                "batch_size" => t.batch_size = parse_value(&key, v, path)?,
                "samples" => t.samples = parse_value(&key, v, path)?,
                "outer_iterations" => t.outer_iterations = parse_value(&key, v, path)?,
                "inner_epochs" => t.inner_epochs = parse_value(&key, v, path)?,
                "z_sweeps" => t.z_sweeps = parse_value(&key, v, path)?,
                "seed" => t.seed = parse_value(&key, v, path)?,
                other => return Err(Error::data(path, format!("unknown key '{other}'"))),
            }
        }
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text, path)?;
        if let Some(m) = &c.manifest {
            if m.is_relative() {
                c.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(c)
    }

    pub fn model_config(&self, geometry: PyramidGeometry) -> Result<ModelConfig> {
        let c = ModelConfig {
            geometry,
            width: self.width,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            bits: self.bits,
            branches: self.branches,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest={}", m.display());
        }
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "ffn_hidden={}", self.ffn_hidden);
        let _ = writeln!(s, "bits={}", self.bits);
        let _ = writeln!(s, "branches={}", self.branches);
        let _ = writeln!(s, "beta={}", t.weights.beta);
        let _ = writeln!(s, "gamma={}", t.weights.gamma);
        let _ = writeln!(s, "learning_rate={}", t.learning_rate);
        let _ = writeln!(s, "momentum={}", t.momentum);
        let _ = writeln!(s, "weight_decay={}", t.weight_decay);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "samples={}", t.samples);
        let _ = writeln!(s, "outer_iterations={}", t.outer_iterations);
        let _ = writeln!(s, "inner_epochs={}", t.inner_epochs);
        let _ = writeln!(s, "z_sweeps={}", t.z_sweeps);
        let _ = writeln!(s, "seed={}", t.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.manifest = Some("data/x.manifest".into());
        c.train.learning_rate = 0.0125;
        c.branches = 4;
        assert_eq!(RunConfig::parse(&c.to_text(), Path::new("c")).unwrap(), c);
    }

    #[test]
    fn typos_are_rejected() {
        let err = RunConfig::parse("learning_rat=0.1\n", Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
        assert!(RunConfig::parse("bits=twelve\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("bits=1\nbits=2\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("gamma=-1\n", Path::new("c")).is_err());
    }
}
