//! Flat `key = value` text files; `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("line {0}: expected key = value")]
    Syntax(usize),
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

pub fn parse(text: &str) -> Result<BTreeMap<String, String>, KvError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(KvError::Syntax(i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(KvError::Syntax(i + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(KvError::Duplicate(k.to_string()));
        }
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, value: &str) -> Result<T, KvError> {
    value.parse().map_err(|_| KvError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = parse("# header\n a = 1 \n\nb=x # trailing\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(parse("novalue"), Err(KvError::Syntax(1))));
        assert!(matches!(parse("a=1\na=2"), Err(KvError::Duplicate(_))));
        assert!(value::<u32>("n", "-3").is_err());
    }
}
