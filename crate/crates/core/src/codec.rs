//! Dictionary coding of JSON object keys.
//!
//! A [`MappingDictionary`] is a bijective table of long key names and short
//! codes. Encoding rewrites long names to short codes on the way to a
//! device; decoding restores them on the way back to the client. Only object
//! keys are rewritten, never string values, and key order is preserved.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

/// What was wrong with a mapping entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MappingProblem {
    EmptyKey,
    DuplicateLongName(String),
    DuplicateShortCode(String),
    /// A short code equal to some long name of the same dictionary.
    ShortCodeIsLongName(String),
    Malformed(String),
}

impl fmt::Display for MappingProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingProblem::EmptyKey => f.write_str("empty key"),
            MappingProblem::DuplicateLongName(k) => write!(f, "duplicate long name {k:?}"),
            MappingProblem::DuplicateShortCode(k) => write!(f, "duplicate short code {k:?}"),
            MappingProblem::ShortCodeIsLongName(k) => {
                write!(f, "short code {k:?} collides with a long name")
            }
            MappingProblem::Malformed(why) => f.write_str(why),
        }
    }
}

#[derive(Debug, Error)]
pub enum MappingError {
    /// `line` is the 1-based line of a text document, or the 1-based entry
    /// position of a JSON object document.
    #[error("mapping {name:?} line {line}: {problem}")]
    Invalid {
        name: String,
        line: usize,
        problem: MappingProblem,
    },
    #[error("mapping {name:?}: invalid JSON document: {source}")]
    Json {
        name: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("reading mapping file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MappingError {
    pub fn problem(&self) -> Option<&MappingProblem> {
        match self {
            MappingError::Invalid { problem, .. } => Some(problem),
            _ => None,
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            MappingError::Invalid { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("key {key:?} at {path} is already a short code of mapping {mapping:?}")]
pub struct CodecError {
    pub mapping: String,
    pub key: String,
    /// Location of the offending key, e.g. `$.values[0].ND`.
    pub path: String,
}

/// Bijective long-name to short-code table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingDictionary {
    name: String,
    entries: Vec<(String, String)>,
    to_short: HashMap<String, usize>,
    to_long: HashMap<String, usize>,
}

impl MappingDictionary {
    /// Builds a dictionary, checking the bijection invariants entry by entry.
    /// Errors carry the 1-based position of the first bad entry.
    pub fn new<I, L, S>(name: impl Into<String>, entries: I) -> Result<Self, MappingError>
    where
        I: IntoIterator<Item = (L, S)>,
        L: Into<String>,
        S: Into<String>,
    {
        let mut dict = MappingDictionary {
            name: name.into(),
            ..Default::default()
        };
        for (idx, (long, short)) in entries.into_iter().enumerate() {
            dict.insert(idx + 1, long.into(), short.into())?;
        }
        Ok(dict)
    }

    /// An empty dictionary; encoding and decoding are the identity.
    pub fn empty(name: impl Into<String>) -> Self {
        MappingDictionary {
            name: name.into(),
            ..Default::default()
        }
    }

    /// The power-sensor vocabulary: `NoOfDevices`, `deviceName`,
    /// `currentWatts` and `maxWattage`. `KWh` is deliberately unmapped.
    pub fn power_sensor() -> Self {
        Self::new(
            "power-sensor",
            [
                ("NoOfDevices", "ND"),
                ("deviceName", "DN"),
                ("currentWatts", "CW"),
                ("maxWattage", "MW"),
            ],
        )
        .expect("built-in mapping is a bijection")
    }

    fn insert(&mut self, line: usize, long: String, short: String) -> Result<(), MappingError> {
        let fail = |problem| MappingError::Invalid {
            name: self.name.clone(),
            line,
            problem,
        };
        if long.is_empty() || short.is_empty() {
            return Err(fail(MappingProblem::EmptyKey));
        }
        if self.to_short.contains_key(&long) {
            return Err(fail(MappingProblem::DuplicateLongName(long)));
        }
        if self.to_long.contains_key(&short) {
            return Err(fail(MappingProblem::DuplicateShortCode(short)));
        }
        if short == long || self.to_short.contains_key(&short) {
            return Err(fail(MappingProblem::ShortCodeIsLongName(short)));
        }
        if self.to_long.contains_key(&long) {
            return Err(fail(MappingProblem::ShortCodeIsLongName(long)));
        }
        let idx = self.entries.len();
        self.to_short.insert(long.clone(), idx);
        self.to_long.insert(short.clone(), idx);
        self.entries.push((long, short));
        Ok(())
    }

    /// Parses a mapping document. A document whose first non-blank
    /// character is `{` is read as a JSON object of `long: short` pairs;
    /// anything else as the line format (`long<TAB or space>short`, `#`
    /// comments, blank lines ignored).
    pub fn parse(name: impl Into<String>, source: &str) -> Result<Self, MappingError> {
        let name = name.into();
        if source.trim_start().starts_with('{') {
            Self::parse_json(name, source)
        } else {
            Self::parse_lines(name, source)
        }
    }

    pub fn parse_lines(name: impl Into<String>, source: &str) -> Result<Self, MappingError> {
        let mut dict = Self::empty(name);
        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some(sep) = line.find(['\t', ' ']) else {
                return Err(MappingError::Invalid {
                    name: dict.name.clone(),
                    line: line_no,
                    problem: MappingProblem::EmptyKey,
                });
            };
            let (long, short) = (&line[..sep], &line[sep + 1..]);
            if short.contains(['\t', ' ']) {
                return Err(MappingError::Invalid {
                    name: dict.name.clone(),
                    line: line_no,
                    problem: MappingProblem::Malformed(
                        "expected exactly two fields separated by one tab or space".into(),
                    ),
                });
            }
            dict.insert(line_no, long.to_owned(), short.to_owned())?;
        }
        Ok(dict)
    }

    pub fn parse_json(name: impl Into<String>, source: &str) -> Result<Self, MappingError> {
        let name = name.into();
        // Parsed as a list of pairs so that duplicate keys are seen rather
        // than silently collapsed by the map type.
        let pairs: JsonPairs = serde_json::from_str(source).map_err(|source| MappingError::Json {
            name: name.clone(),
            source,
        })?;
        let mut dict = Self::empty(name);
        for (idx, (long, short)) in pairs.0.into_iter().enumerate() {
            dict.insert(idx + 1, long, short)?;
        }
        Ok(dict)
    }

    /// Loads a mapping file; the dictionary is named after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MappingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MappingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(name, &text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(l, s)| (l.as_str(), s.as_str()))
    }

    pub fn short_code(&self, long: &str) -> Option<&str> {
        self.to_short.get(long).map(|&i| self.entries[i].1.as_str())
    }

    pub fn long_name(&self, short: &str) -> Option<&str> {
        self.to_long.get(short).map(|&i| self.entries[i].0.as_str())
    }

    pub fn is_short_code(&self, key: &str) -> bool {
        self.to_long.contains_key(key)
    }

    /// Replaces every mapped long key with its short code.
    ///
    /// Fails if any key of `doc` is already a short code, since the result
    /// could not be decoded unambiguously.
    pub fn encode_keys(&self, doc: &Value) -> Result<Value, CodecError> {
        if self.is_empty() {
            return Ok(doc.clone());
        }
        let mut path = String::from("$");
        self.encode_at(doc, &mut path)
    }

    fn encode_at(&self, value: &Value, path: &mut String) -> Result<Value, CodecError> {
        match value {
            Value::Object(obj) => {
                let mut out = Map::with_capacity(obj.len());
                for (key, child) in obj {
                    let mark = path.len();
                    path.push('.');
                    path.push_str(key);
                    if self.is_short_code(key) {
                        return Err(CodecError {
                            mapping: self.name.clone(),
                            key: key.clone(),
                            path: path.clone(),
                        });
                    }
                    let coded = self.encode_at(child, path)?;
                    path.truncate(mark);
                    let new_key = self.short_code(key).unwrap_or(key);
                    out.insert(new_key.to_owned(), coded);
                }
                Ok(Value::Object(out))
            }
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, child) in items.iter().enumerate() {
                    let mark = path.len();
                    path.push_str(&format!("[{i}]"));
                    out.push(self.encode_at(child, path)?);
                    path.truncate(mark);
                }
                Ok(Value::Array(out))
            }
            leaf => Ok(leaf.clone()),
        }
    }

    /// Replaces every short code key with its long name. Unknown keys pass
    /// through unchanged.
    pub fn decode_keys(&self, doc: &Value) -> Value {
        if self.is_empty() {
            return doc.clone();
        }
        match doc {
            Value::Object(obj) => Value::Object(
                obj.iter()
                    .map(|(k, v)| {
                        let key = self.long_name(k).unwrap_or(k);
                        (key.to_owned(), self.decode_keys(v))
                    })
                    .collect(),
            ),
            Value::Array(items) => Value::Array(items.iter().map(|v| self.decode_keys(v)).collect()),
            leaf => leaf.clone(),
        }
    }
}

struct JsonPairs(Vec<(String, String)>);

impl<'de> serde::Deserialize<'de> for JsonPairs {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl<'de> serde::de::Visitor<'de> for Visitor {
            type Value = JsonPairs;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping long names to short codes")
            }
            fn visit_map<A: serde::de::MapAccess<'de>>(self, mut map: A) -> Result<JsonPairs, A::Error> {
                let mut out = Vec::new();
                while let Some(pair) = map.next_entry::<String, String>()? {
                    out.push(pair);
                }
                Ok(JsonPairs(out))
            }
        }
        de.deserialize_map(Visitor)
    }
}

/// Canonical minified serialization: no whitespace, keys in insertion order.
pub fn minified(value: &Value) -> String {
    serde_json::to_string(value).expect("JSON values always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeDelta {
    pub bytes_before: usize,
    pub bytes_after: usize,
}

impl SizeDelta {
    pub fn saved(&self) -> isize {
        self.bytes_before as isize - self.bytes_after as isize
    }
}

/// Minified byte lengths of a document before and after coding.
pub fn payload_size_delta(original: &Value, coded: &Value) -> SizeDelta {
    SizeDelta {
        bytes_before: minified(original).len(),
        bytes_after: minified(coded).len(),
    }
}
