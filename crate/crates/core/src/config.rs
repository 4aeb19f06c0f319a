//! Experiment configuration: the `key = value` config-file format, the
//! noise-channel specification grammar, and the resolved configuration that
//! every output embeds.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NoiseMatrix;

/// Noise-channel specification as written on a command line or config file:
/// `identity`, `uniform-diag:<c>`, or `file:<path>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeltaSpec {
    Identity,
    UniformDiag(f64),
    File(PathBuf),
}

impl DeltaSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(DeltaSpec::Identity);
        }
        if let Some(rest) = s.strip_prefix("uniform-diag:") {
            let c: f64 = rest
                .parse()
                .map_err(|_| Error::DeltaSpec(s.to_string()))?;
            if !c.is_finite() {
                return Err(Error::DeltaSpec(s.to_string()));
            }
            return Ok(DeltaSpec::UniformDiag(c));
        }
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(Error::DeltaSpec(s.to_string()));
            }
            return Ok(DeltaSpec::File(PathBuf::from(path)));
        }
        Err(Error::DeltaSpec(s.to_string()))
    }

    pub fn to_string_repr(&self) -> String {
        match self {
            DeltaSpec::Identity => "identity".into(),
            DeltaSpec::UniformDiag(c) => format!("uniform-diag:{c}"),
            DeltaSpec::File(p) => format!("file:{}", p.display()),
        }
    }

    /// Materialize the channel for a given q (reads the file variant).
    pub fn resolve(&self, q: usize) -> Result<NoiseMatrix> {
        match self {
            DeltaSpec::Identity => Ok(NoiseMatrix::identity(q)),
            DeltaSpec::UniformDiag(c) => NoiseMatrix::uniform_diag(q, *c),
            DeltaSpec::File(path) => {
                let text = std::fs::read_to_string(path)?;
                let m = NoiseMatrix::parse_text(&text)?;
                if m.q() != q {
                    return Err(Error::NoiseShape {
                        q,
                        rows: m.q(),
                        bad_row: 0,
                        bad_len: m.q(),
                    });
                }
                Ok(m)
            }
        }
    }
}

/// Parse the `key = value` config format: one pair per line, `#` comments,
/// later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: ln + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: ln + 1,
                msg: "empty key".into(),
            });
        }
        if key.chars().any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("key `{key}` has characters outside [A-Za-z0-9_-]"),
            });
        }
        out.insert(key.to_string(), value.to_string());
    }
    Ok(out)
}

/// Render a key/value map in the config-file format (sorted keys).
pub fn write_kv(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Fully resolved experiment configuration. Every run's outputs embed this,
/// and it round-trips losslessly through the config-file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub subcommand: String,
    pub q: usize,
    pub a: f64,
    pub b: f64,
    pub n: Option<usize>,
    pub delta: Option<String>,
    pub depth: Option<usize>,
    pub k: Option<usize>,
    pub trials: Option<usize>,
    pub seed: u64,
    pub regime: Option<String>,
    pub r: Option<usize>,
    pub centers: Option<usize>,
    pub subsample: Option<usize>,
    pub amortize: bool,
    pub balanced: bool,
    pub threads: Option<usize>,
    pub node_budget: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(subcommand: &str, q: usize, a: f64, b: f64, seed: u64) -> Self {
        ExperimentConfig {
            subcommand: subcommand.to_string(),
            q,
            a,
            b,
            n: None,
            delta: None,
            depth: None,
            k: None,
            trials: None,
            seed,
            regime: None,
            r: None,
            centers: None,
            subsample: None,
            amortize: false,
            balanced: false,
            threads: None,
            node_budget: None,
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("subcommand".into(), self.subcommand.clone());
        m.insert("q".into(), self.q.to_string());
        m.insert("a".into(), self.a.to_string());
        m.insert("b".into(), self.b.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("amortize".into(), self.amortize.to_string());
        m.insert("balanced".into(), self.balanced.to_string());
        let mut opt = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.into(), v);
            }
        };
        opt("n", self.n.map(|v| v.to_string()));
        opt("delta", self.delta.clone());
        opt("depth", self.depth.map(|v| v.to_string()));
        opt("k", self.k.map(|v| v.to_string()));
        opt("trials", self.trials.map(|v| v.to_string()));
        opt("regime", self.regime.clone());
        opt("r", self.r.map(|v| v.to_string()));
        opt("centers", self.centers.map(|v| v.to_string()));
        opt("subsample", self.subsample.map(|v| v.to_string()));
        opt("threads", self.threads.map(|v| v.to_string()));
        opt("node_budget", self.node_budget.map(|v| v.to_string()));
        m
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            map.get(k).ok_or_else(|| Error::Config {
                key: k.into(),
                msg: "missing".into(),
            })
        };
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config {
                key: k.into(),
                msg: format!("cannot parse `{v}`"),
            })
        }
        fn opt<T: std::str::FromStr>(map: &BTreeMap<String, String>, k: &str) -> Result<Option<T>> {
            match map.get(k) {
                Some(v) => Ok(Some(parse(k, v)?)),
                None => Ok(None),
            }
        }
        Ok(ExperimentConfig {
            subcommand: get("subcommand")?.clone(),
            q: parse("q", get("q")?)?,
            a: parse("a", get("a")?)?,
            b: parse("b", get("b")?)?,
            n: opt(map, "n")?,
            delta: map.get("delta").cloned(),
            depth: opt(map, "depth")?,
            k: opt(map, "k")?,
            trials: opt(map, "trials")?,
            seed: parse("seed", get("seed")?)?,
            regime: map.get("regime").cloned(),
            r: opt(map, "r")?,
            centers: opt(map, "centers")?,
            subsample: opt(map, "subsample")?,
            amortize: opt(map, "amortize")?.unwrap_or(false),
            balanced: opt(map, "balanced")?.unwrap_or(false),
            threads: opt(map, "threads")?,
            node_budget: opt(map, "node_budget")?,
        })
    }

    pub fn to_config_text(&self) -> String {
        write_kv(&self.to_kv())
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_spec_grammar() {
        assert_eq!(DeltaSpec::parse("identity").unwrap(), DeltaSpec::Identity);
        assert_eq!(
            DeltaSpec::parse("uniform-diag:0.8").unwrap(),
            DeltaSpec::UniformDiag(0.8)
        );
        assert_eq!(
            DeltaSpec::parse("file:/tmp/d.txt").unwrap(),
            DeltaSpec::File(PathBuf::from("/tmp/d.txt"))
        );
        assert!(DeltaSpec::parse("garbage").is_err());
        assert!(DeltaSpec::parse("uniform-diag:abc").is_err());
        assert!(DeltaSpec::parse("uniform-diag:nan").is_err());
        assert!(DeltaSpec::parse("file:").is_err());

        let d = DeltaSpec::UniformDiag(0.8).resolve(3).unwrap();
        assert!((d.entry(0, 0) - 0.8).abs() < 1e-12);
        assert!(DeltaSpec::UniformDiag(0.5).resolve(3).is_err());
        assert!(DeltaSpec::Identity.resolve(4).unwrap().is_identity());
    }

    #[test]
    fn kv_parse_and_round_trip() {
        let text = "# comment\n q = 3 \na=15\nb = 3\nseed = 42\nsubcommand = params\n";
        let kv = parse_kv(text).unwrap();
        assert_eq!(kv["q"], "3");
        assert_eq!(kv["a"], "15");
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv("= 3\n").is_err());
        assert!(parse_kv("bad key = 3\n").is_err());

        let mut cfg = ExperimentConfig::new("contraction", 3, 50.0, 2.0, 7);
        cfg.delta = Some("uniform-diag:0.8".into());
        cfg.depth = Some(6);
        cfg.trials = Some(2000);
        cfg.regime = Some("gw".into());
        let text = cfg.to_config_text();
        let back = ExperimentConfig::from_config_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn from_kv_reports_bad_fields() {
        let text = "subcommand = params\nq = three\na = 15\nb = 3\nseed = 0\n";
        assert!(matches!(
            ExperimentConfig::from_config_text(text),
            Err(Error::Config { .. })
        ));
        let text = "subcommand = params\na = 15\nb = 3\nseed = 0\n";
        assert!(ExperimentConfig::from_config_text(text).is_err());
    }
}
