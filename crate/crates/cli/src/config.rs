//! Run configuration: command-line values layered over an optional
//! `key = value` file, with `CREL_SEED` as the last fallback for the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Keys every command accepts.
const COMMON_KEYS: &[&str] = &["seed", "out", "threads"];

pub fn command_keys(command: &str) -> &'static [&'static str] {
    match command {
        "weights" => &["data", "psi", "gamma", "theta"],
        "profile" => &["data", "psi", "gamma", "grid", "parametric"],
        "posterior" => {
            &["data", "psi", "gamma", "prior", "alpha", "method", "nodes", "chain_length", "burn_in", "thin", "chain"]
        }
        "reproduce" => &["table", "scale", "reference", "alpha"],
        _ => &[],
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Parse flat `key = value` text. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", no + 1)))?;
        let k = k.trim().replace('-', "_");
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", no + 1)));
        }
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    /// Merge command-line values (which win) over the config file, then
    /// reject any key the command does not know.
    pub fn build(
        command: &str,
        config_file: Option<&Path>,
        cli: BTreeMap<String, String>,
        env_seed: Option<String>,
    ) -> Result<Self, CliError> {
        let mut values = match config_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        if let Some(c) = values.remove("command") {
            if c != command {
                return Err(CliError::Usage(format!("config is for command `{c}`, not `{command}`")));
            }
        }
        // manifest bookkeeping, not configuration
        values.remove("crel_version");
        values.remove("outputs");
        values.extend(cli);
        let allowed = command_keys(command);
        for k in values.keys() {
            if !COMMON_KEYS.contains(&k.as_str()) && !allowed.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("unknown key `{k}` for command `{command}`")));
            }
        }
        if !values.contains_key("seed") {
            if let Some(s) = env_seed.filter(|s| !s.trim().is_empty()) {
                values.insert("seed".into(), s.trim().to_string());
            }
        }
        let seed = match values.get("seed") {
            Some(s) => s.parse::<u64>().map_err(|_| CliError::Usage(format!("seed must be a non-negative integer, got `{s}`")))?,
            None => 0,
        };
        values.insert("seed".into(), seed.to_string());
        let out_dir = PathBuf::from(values.get("out").cloned().unwrap_or_else(|| "crel-out".into()));
        values.insert("out".into(), out_dir.display().to_string());
        Ok(Self { command: command.into(), values, seed, out_dir })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("missing required value `{key}`")))
    }

    /// Typed lookup; a missing key yields `default`, which is then echoed
    /// into the manifest.
    pub fn parsed<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        match self.values.get(key) {
            Some(s) => s.parse::<T>().map_err(|_| CliError::Usage(format!("cannot parse `{key}` value `{s}`"))),
            None => {
                self.values.insert(key.into(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn string(&mut self, key: &str, default: &str) -> String {
        self.values.entry(key.into()).or_insert_with(|| default.into()).clone()
    }

    /// Manifest text: the resolved configuration plus version and outputs.
    /// Feeding it back through `--config` replays the run.
    pub fn manifest(&self, outputs: &[String]) -> String {
        let mut s = String::from("# crel run manifest\n");
        let _ = writeln!(s, "crel_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "command = {}", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "outputs = {}", outputs.join(";"));
        s
    }
}

/// Comma-separated list of numbers.
pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("cannot parse number `{t}` in `{s}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_comments_and_dashes() {
        let m = parse_config_text("# c\n\nchain-length = 10\n gamma=-1 \n").unwrap();
        assert_eq!(m["chain_length"], "10");
        assert_eq!(m["gamma"], "-1");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_config_text("gamma").is_err());
        assert!(parse_config_text("a=1\na=2").is_err());
    }

    #[test]
    fn flags_override_file_and_env_is_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "gamma = -1\nseed = 5\n").unwrap();
        let c = RunConfig::build("weights", Some(&p), cli(&[("gamma", "0")]), Some("9".into())).unwrap();
        assert_eq!(c.get("gamma"), Some("0"));
        assert_eq!(c.seed, 5);
        let c = RunConfig::build("weights", None, cli(&[]), Some("9".into())).unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::build("weights", None, cli(&[("grid", "0:1:3")]), None).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn manifest_replays() {
        let c = RunConfig::build("profile", None, cli(&[("psi", "median"), ("grid", "0:1:5")]), None).unwrap();
        let text = c.manifest(&["profile.csv".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        std::fs::write(&p, &text).unwrap();
        let again = RunConfig::build("profile", Some(&p), BTreeMap::new(), None).unwrap();
        assert_eq!(again.values, c.values);
        assert!(RunConfig::build("weights", Some(&p), BTreeMap::new(), None).is_err());
    }
}
