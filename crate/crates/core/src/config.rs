//! Line-oriented `key = value` files with `#` comments.
//!
//! Used both for the formula registry and for pipeline configuration.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

/// One parsed entry with its 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError {
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(ConfigError {
                line: i + 1,
                reason: format!("invalid key `{key}`"),
            });
        }
        if entries.iter().any(|e: &Entry| e.key == key) {
            return Err(ConfigError {
                line: i + 1,
                reason: format!("duplicate key `{key}`"),
            });
        }
        entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(entries)
}

pub fn parse_map(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    Ok(parse_entries(text)?.into_iter().map(|e| (e.key, e.value)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks_skipped() {
        let m = parse_map("# c\n\nseed = 4\n  workers=2  \n").unwrap();
        assert_eq!(m["seed"], "4");
        assert_eq!(m["workers"], "2");
    }

    #[test]
    fn value_may_contain_equals() {
        let e = parse_entries("f = equal(a, b) = x").unwrap();
        assert_eq!(e[0].value, "equal(a, b) = x");
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(parse_entries("a = 1\nnope").unwrap_err().line, 2);
        assert_eq!(parse_entries("a = 1\na = 2").unwrap_err().line, 2);
    }
}
