//! Line-oriented `key = value` run-configuration files. Unknown keys are
//! hard errors so typos cannot silently change a run.

use std::collections::BTreeMap;
use std::path::Path;

pub struct KvConfig {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl KvConfig {
    pub fn empty() -> Self {
        Self {
            values: BTreeMap::new(),
            consumed: std::cell::RefCell::new(Vec::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    idx + 1
                ));
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self {
            values,
            consumed: std::cell::RefCell::new(Vec::new()),
        })
    }

    /// Resolve a typed value: CLI override wins, then the config file, then
    /// the default.
    pub fn resolve<T: std::str::FromStr + Clone>(
        &self,
        key: &str,
        cli: Option<T>,
        default: T,
    ) -> Result<T, String> {
        self.consumed.borrow_mut().push(key.to_string());
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| format!("bad value for '{key}': '{raw}'")),
            None => Ok(default),
        }
    }

    /// Error if the file carried keys no command consumed.
    pub fn reject_unknown(&self) -> Result<(), String> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        }
    }
}
