//! Reader and replayer for CAVP-style GCM response files.
//!
//! Files are line oriented: `[Name = value]` section headers, `Name = hex`
//! record fields, a bare `FAIL` line marking an expected authentication
//! failure, `#` comments and blank lines. Records outside the supported
//! profile (256-bit key, 96-bit IV, 128-bit tag) are skipped, not failed.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::gcm::{Aes256Gcm, Backend, Key256, Nonce96, Tag128};

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorRecord {
    /// Line of the first field of the record.
    pub line: usize,
    pub params: BTreeMap<String, String>,
    pub fields: BTreeMap<String, Vec<u8>>,
    pub field_lines: BTreeMap<String, usize>,
    pub expect_fail: bool,
}

impl VectorRecord {
    fn field(&self, name: &str) -> Option<&[u8]> {
        self.fields.get(name).map(Vec::as_slice)
    }

    fn param(&self, name: &str) -> Option<u32> {
        self.params.get(name).and_then(|v| v.parse().ok())
    }

    /// A decrypt record carries its expectation after the tag: either a PT
    /// line or FAIL. Encrypt records give PT before CT.
    pub fn is_decrypt(&self) -> bool {
        self.expect_fail || self.field_lines.get("PT") > self.field_lines.get("Tag")
    }
}

fn parse_hex(line: usize, v: &str) -> Result<Vec<u8>, VectorError> {
    hex::decode(v).map_err(|e| VectorError::Parse { line, msg: format!("bad hex: {e}") })
}

pub fn parse_vectors(text: &str) -> Result<Vec<VectorRecord>, VectorError> {
    let mut params: BTreeMap<String, String> = BTreeMap::new();
    let mut out = Vec::new();
    let mut cur: Option<VectorRecord> = None;
    let mut in_header = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(inner) = s.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or(VectorError::Parse { line, msg: "unterminated section header".into() })?;
            if !in_header {
                params.clear();
                in_header = true;
            }
            out.extend(cur.take());
            if let Some((k, v)) = inner.split_once('=') {
                params.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                params.insert(inner.trim().to_string(), String::new());
            }
            continue;
        }
        in_header = false;
        if s == "FAIL" {
            match cur.as_mut() {
                Some(r) => r.expect_fail = true,
                None => return Err(VectorError::Parse { line, msg: "FAIL outside a record".into() }),
            }
            continue;
        }
        let (k, v) =
            s.split_once('=').ok_or_else(|| VectorError::Parse { line, msg: format!("unrecognised line `{s}`") })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "Count" {
            out.extend(cur.take());
            cur = Some(VectorRecord {
                line,
                params: params.clone(),
                fields: BTreeMap::new(),
                field_lines: BTreeMap::new(),
                expect_fail: false,
            });
            continue;
        }
        let rec = cur.get_or_insert_with(|| VectorRecord {
            line,
            params: params.clone(),
            fields: BTreeMap::new(),
            field_lines: BTreeMap::new(),
            expect_fail: false,
        });
        if rec.fields.contains_key(k) {
            return Err(VectorError::Parse { line, msg: format!("duplicate field `{k}`") });
        }
        rec.fields.insert(k.to_string(), parse_hex(line, v)?);
        rec.field_lines.insert(k.to_string(), line);
    }
    out.extend(cur);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Skipped(String),
    Mismatch { line: usize, what: String },
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ReplaySummary {
    pub total: usize,
    pub passed: usize,
    pub skipped: usize,
    pub encrypt: usize,
    pub decrypt: usize,
    pub expected_failures_rejected: usize,
    pub failures: Vec<(usize, String)>,
}

impl ReplaySummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn replay_record(rec: &VectorRecord, backend: Backend) -> Outcome {
    let len_of = |name: &str| rec.field(name).map(|f| f.len() * 8);
    let keylen = rec.param("Keylen").or(len_of("Key").map(|l| l as u32));
    let ivlen = rec.param("IVlen").or(len_of("IV").map(|l| l as u32));
    let taglen = rec.param("Taglen").or(len_of("Tag").map(|l| l as u32));
    if keylen != Some(256) || ivlen != Some(96) || taglen != Some(128) {
        return Outcome::Skipped(format!("profile Keylen={keylen:?} IVlen={ivlen:?} Taglen={taglen:?}"));
    }
    let missing = |f: &str| Outcome::Mismatch { line: rec.line, what: format!("record lacks `{f}`") };
    let Some(key) = rec.field("Key").and_then(Key256::from_slice) else { return missing("Key") };
    let Some(iv) = rec.field("IV").and_then(|v| <[u8; 12]>::try_from(v).ok()) else { return missing("IV") };
    let Some(tag) = rec.field("Tag").and_then(|v| <[u8; 16]>::try_from(v).ok()) else { return missing("Tag") };
    let aad = rec.field("AAD").unwrap_or(&[]);
    let Some(ct) = rec.field("CT") else { return missing("CT") };
    let cipher = Aes256Gcm::with_backend(&key, backend);
    let nonce = Nonce96::from_bytes(iv);
    let tag = Tag128(tag);
    let tag_line = rec.field_lines.get("Tag").copied().unwrap_or(rec.line);

    if rec.is_decrypt() {
        match (cipher.open(nonce, aad, ct, &tag), rec.expect_fail) {
            (Err(_), true) => Outcome::Pass,
            (Ok(_), true) => Outcome::Mismatch { line: tag_line, what: "forged record accepted".into() },
            (Err(_), false) => Outcome::Mismatch { line: tag_line, what: "authentic record rejected".into() },
            (Ok(pt), false) => {
                if Some(pt.as_slice()) == rec.field("PT") {
                    Outcome::Pass
                } else {
                    Outcome::Mismatch {
                        line: rec.field_lines.get("PT").copied().unwrap_or(rec.line),
                        what: "plaintext differs".into(),
                    }
                }
            }
        }
    } else {
        let Some(pt) = rec.field("PT") else { return missing("PT") };
        let (got_ct, got_tag) = cipher.seal(nonce, aad, pt);
        if got_ct != ct {
            Outcome::Mismatch {
                line: rec.field_lines.get("CT").copied().unwrap_or(rec.line),
                what: "ciphertext differs".into(),
            }
        } else if got_tag != tag {
            Outcome::Mismatch { line: tag_line, what: "tag differs".into() }
        } else {
            Outcome::Pass
        }
    }
}

pub fn replay(records: &[VectorRecord], backend: Backend) -> ReplaySummary {
    let mut s = ReplaySummary::default();
    for rec in records {
        s.total += 1;
        match replay_record(rec, backend) {
            Outcome::Pass => {
                s.passed += 1;
                if rec.is_decrypt() {
                    s.decrypt += 1;
                    if rec.expect_fail {
                        s.expected_failures_rejected += 1;
                    }
                } else {
                    s.encrypt += 1;
                }
            }
            Outcome::Skipped(_) => s.skipped += 1,
            Outcome::Mismatch { line, what } => s.failures.push((line, what)),
        }
    }
    s
}

pub fn replay_file(path: &Path, backend: Backend) -> Result<ReplaySummary, VectorError> {
    let text = std::fs::read_to_string(path)?;
    Ok(replay(&parse_vectors(&text)?, backend))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# comment

[Keylen = 256]
[IVlen = 96]
[PTlen = 0]
[AADlen = 0]
[Taglen = 128]

Count = 0
Key = 0000000000000000000000000000000000000000000000000000000000000000
IV = 000000000000000000000000
PT =
AAD =
CT =
Tag = 530f8afbc74536b9a963b4f1c4cb738b
";

    #[test]
    fn parses_and_replays_reference_record() {
        let recs = parse_vectors(SAMPLE).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].line, 9);
        assert!(!recs[0].is_decrypt());
        let s = replay(&recs, Backend::Portable);
        assert_eq!((s.total, s.passed), (1, 1));
    }

    #[test]
    fn corrupted_tag_names_its_line() {
        let bad = SAMPLE.replace("530f8afb", "530f8afc");
        let s = replay(&parse_vectors(&bad).unwrap(), Backend::Portable);
        assert_eq!(s.failures.len(), 1);
        assert_eq!(s.failures[0].0, 15);
    }

    #[test]
    fn fail_marker_on_decrypt_record() {
        let text = "Count = 0\nKey = 0000000000000000000000000000000000000000000000000000000000000000\n\
IV = 000000000000000000000000\nCT =\nAAD =\nTag = 530f8afbc74536b9a963b4f1c4cb738c\nFAIL\n";
        let recs = parse_vectors(text).unwrap();
        assert!(recs[0].expect_fail && recs[0].is_decrypt());
        let s = replay(&recs, Backend::Portable);
        assert_eq!((s.passed, s.expected_failures_rejected), (1, 1));
    }

    #[test]
    fn empty_and_unsupported_inputs() {
        assert!(parse_vectors("").unwrap().is_empty());
        let t = SAMPLE.replace("[Taglen = 128]", "[Taglen = 96]");
        let s = replay(&parse_vectors(&t).unwrap(), Backend::Portable);
        assert_eq!(s.skipped, 1);
        assert!(s.ok());
    }

    #[test]
    fn malformed_lines_report_position() {
        let err = parse_vectors("Count = 0\nKey = zz\n").unwrap_err();
        assert!(matches!(err, VectorError::Parse { line: 2, .. }));
        let err = parse_vectors("garbage\n").unwrap_err();
        assert!(matches!(err, VectorError::Parse { line: 1, .. }));
    }
}
