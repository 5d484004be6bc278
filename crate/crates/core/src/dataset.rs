//! Labeled token sequences and their JSONL encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dist::{TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Machine,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Human => "human",
            Label::Machine => "machine",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(Label::Human),
            "machine" => Ok(Label::Machine),
            _ => Err(Error::Format(format!("unknown label `{s}`"))),
        }
    }
}

/// One passage `w_1 .. w_T`. When `meta.prompt_len` is set, the first
/// `prompt_len` tokens are shared context and are not scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub label: Label,
    pub tokens: Vec<TokenId>,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl SequenceRecord {
    pub fn new(id: impl Into<String>, label: Label, tokens: Vec<TokenId>) -> Self {
        Self { id: id.into(), label, tokens, meta: BTreeMap::new() }
    }

    pub fn prompt_len(&self) -> usize {
        self.meta
            .get("prompt_len")
            .and_then(Value::as_u64)
            .map_or(0, |n| n as usize)
            .min(self.tokens.len())
    }

    /// `(prompt, scored tokens)`.
    pub fn split_prompt(&self) -> (&[TokenId], &[TokenId]) {
        self.tokens.split_at(self.prompt_len())
    }

    /// Number of scored tokens.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() - self.prompt_len()
    }

    pub fn validate(&self, vocab: Option<&Vocabulary>) -> Result<()> {
        if self.scored_len() == 0 {
            return Err(Error::Unscorable {
                id: self.id.clone(),
                reason: "no tokens after the prompt".into(),
            });
        }
        if let Some(v) = vocab {
            for &t in &self.tokens {
                v.check(t)?;
            }
        }
        Ok(())
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.as_ref().display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[SequenceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_split() {
        let mut r = SequenceRecord::new("a", Label::Human, vec![1, 2, 3, 4]);
        assert_eq!(r.split_prompt(), (&[][..], &[1, 2, 3, 4][..]));
        r.meta.insert("prompt_len".into(), 3.into());
        assert_eq!(r.split_prompt(), (&[1, 2, 3][..], &[4][..]));
        r.meta.insert("prompt_len".into(), 4.into());
        assert!(r.validate(None).is_err());
    }

    #[test]
    fn jsonl_schema() {
        let line = r#"{"id":"x","label":"machine","tokens":[0,1],"meta":{"tau":0.8}}"#;
        let r: SequenceRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.label, Label::Machine);
        let v = Vocabulary::new(2).unwrap();
        assert!(r.validate(Some(&v)).is_ok());
        let bad = SequenceRecord::new("y", Label::Human, vec![0, 2]);
        assert!(bad.validate(Some(&v)).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = vec![
            SequenceRecord::new("a", Label::Human, vec![0]),
            SequenceRecord::new("b", Label::Machine, vec![1, 1]),
        ];
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
    }
}
