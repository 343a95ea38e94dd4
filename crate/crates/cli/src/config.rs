//! INI-style scenario files.
//!
//! ```ini
//! scenario = filter-scan
//!
//! [physics]
//! gamma = 3.77e7
//! gamma2 = 1.5e6
//!
//! [numerics]
//! delta_steps = 41
//! ```
//!
//! Section names only group keys for the reader; every key must be unique
//! across the file. Keys use the flag names with `-` or `_`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let ini = ini::Ini::load_from_file(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (_, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = normalize(k);
                if values.insert(key.clone(), v.trim().to_string()).is_some() {
                    return Err(CliError::Invalid(format!("config key `{key}` appears more than once")));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn maybe_load(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn scenario(&self) -> Option<&str> {
        self.values.get("scenario").map(String::as_str)
    }

    /// Rejects keys the scenario does not read, so typos do not pass silently.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        for key in self.values.keys() {
            if key != "scenario" && key != "config" && !allowed.contains(&key.as_str()) {
                return Err(CliError::Invalid(format!(
                    "unknown config key `{key}` (expected one of: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// The flag if given, otherwise the config value, otherwise `None`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(&normalize(key)) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Invalid(format!("config key `{key}` has unparsable value `{raw}`"))),
        }
    }
}
