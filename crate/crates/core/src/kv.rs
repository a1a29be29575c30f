//! Flat `key = value` text: one pair per line, `#` starts a comment.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
}

/// Parses pairs in file order. Duplicate keys are rejected.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(KvError::Duplicate {
                line: i + 1,
                key: key.to_string(),
            });
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn render(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let pairs = parse("# header\nk = 4\n  d=16   # trailing\n\nbackbone = swap\n").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("k".into(), "4".into()),
                ("d".into(), "16".into()),
                ("backbone".into(), "swap".into())
            ]
        );
        assert_eq!(parse(&render(&pairs)).unwrap(), pairs);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(parse("k 4"), Err(KvError::Syntax { line: 1, .. })));
        assert!(matches!(parse("= 4"), Err(KvError::Syntax { .. })));
        assert!(matches!(parse("a = 1\na = 2"), Err(KvError::Duplicate { line: 2, .. })));
    }
}
