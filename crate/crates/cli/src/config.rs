//! Minimal INI-style configuration: `key = value` lines with optional
//! `[section]` headers. Section names prefix keys as `section.key`.
//! Command-line flags override file values, so the file only supplies
//! defaults.

use std::collections::BTreeMap;

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ParseError {
                    line: lineno,
                    message: "unclosed [section]".into(),
                })?;
                if name.is_empty() {
                    return Err(ParseError {
                        line: lineno,
                        message: "empty section name".into(),
                    });
                }
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ParseError {
                line: lineno,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ParseError {
                    line: lineno,
                    message: "empty key".into(),
                });
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    #[cfg(test)]
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| format!("config key {key} = {raw:?}: {e}")),
        }
    }

    #[cfg(test)]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// FNV-1a 64-bit content hash for the run manifest.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_keys() {
        let cfg = FileConfig::parse("# comment\nseed = 7\n[rate]\nn = 25,100\nreps=8\n").unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("rate.n"), Some("25,100"));
        assert_eq!(cfg.get_parsed::<u64>("rate.reps").unwrap(), Some(8));
        assert!(cfg.get("missing").is_none());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = FileConfig::parse("").unwrap();
        assert!(cfg.is_empty());
    }

    #[test]
    fn reports_line_numbers() {
        let err = FileConfig::parse("a = 1\nbroken line\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = FileConfig::parse("[open\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
