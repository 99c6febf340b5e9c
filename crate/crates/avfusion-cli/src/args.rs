//! Minimal long-flag argument parsing.
//!
//! Every flag is `--name value` or a bare `--name` switch. Unknown flags are
//! usage errors so typos fail loudly.

use std::collections::BTreeMap;

use avfusion_core::{AvError, Result};

pub struct FlagSpec {
    pub name: &'static str,
    pub takes_value: bool,
}

pub const fn val(name: &'static str) -> FlagSpec {
    FlagSpec { name, takes_value: true }
}

pub const fn switch(name: &'static str) -> FlagSpec {
    FlagSpec { name, takes_value: false }
}

pub struct Args {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Args {
    pub fn parse(raw: &[String], spec: &[FlagSpec]) -> Result<Args> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut it = raw.iter();
        while let Some(arg) = it.next() {
            let Some(name) = arg.strip_prefix("--") else {
                return Err(AvError::Usage(format!("unexpected argument {arg:?}")));
            };
            let Some(flag) = spec.iter().find(|f| f.name == name) else {
                return Err(AvError::Usage(format!("unknown flag --{name}")));
            };
            if flag.takes_value {
                let Some(value) = it.next() else {
                    return Err(AvError::Usage(format!("--{name} expects a value")));
                };
                if values.insert(name.to_string(), value.clone()).is_some() {
                    return Err(AvError::Usage(format!("--{name} given twice")));
                }
            } else {
                switches.push(name.to_string());
            }
        }
        Ok(Args { values, switches })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    pub fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    pub fn require(&self, name: &str) -> Result<&str> {
        self.get(name).ok_or_else(|| AvError::Usage(format!("missing required flag --{name}")))
    }

    pub fn parse_or<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T> {
        match self.get(name) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| AvError::Usage(format!("--{name}: cannot parse {raw:?}"))),
        }
    }

    /// Parse "a,b" into a pair.
    pub fn parse_pair_or<T: std::str::FromStr + Copy>(&self, name: &str, default: (T, T)) -> Result<(T, T)> {
        match self.get(name) {
            None => Ok(default),
            Some(raw) => {
                let parts: Vec<&str> = raw.split(',').collect();
                if parts.len() != 2 {
                    return Err(AvError::Usage(format!("--{name}: expected A,B, got {raw:?}")));
                }
                let a = parts[0]
                    .parse()
                    .map_err(|_| AvError::Usage(format!("--{name}: cannot parse {raw:?}")))?;
                let b = parts[1]
                    .parse()
                    .map_err(|_| AvError::Usage(format!("--{name}: cannot parse {raw:?}")))?;
                Ok((a, b))
            }
        }
    }
}
