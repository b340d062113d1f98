//! Caption ingestion: strict where/when/weather parsing, synonym unification,
//! uncertainty filtering and prompt assembly.

use crate::encoder::PromptString;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub const CAPTION_KEYS: [&str; 3] = ["where", "when", "weather"];
pub const DEFAULT_MAX_FIELD_LEN: usize = 64;
pub const DEFAULT_BANNED: [&str; 4] = ["unsure", "unclear", "cannot determine", "unknown"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub source_id: String,
    #[serde(rename = "where")]
    pub place: String,
    pub when: String,
    pub weather: String,
}

impl CaptionRecord {
    /// Fields in key order, paired with their key names.
    pub fn fields(&self) -> [(&'static str, &str); 3] {
        [
            ("where", &self.place),
            ("when", &self.when),
            ("weather", &self.weather),
        ]
    }

    fn map_fields(&self, mut f: impl FnMut(&str) -> String) -> Self {
        Self {
            source_id: self.source_id.clone(),
            place: f(&self.place),
            when: f(&self.when),
            weather: f(&self.weather),
        }
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Strict parse of one bare JSON object with exactly the three caption keys.
/// Anything around the object, including prose, is a parse error.
pub fn parse_caption(raw: &[u8], source_id: &str) -> Result<CaptionRecord> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Parse(format!("invalid utf-8: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("caption is not bare json: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema("caption must be a json object".into()))?;
    for key in obj.keys() {
        if !CAPTION_KEYS.contains(&key.as_str()) {
            return Err(Error::Schema(format!("unexpected key {key:?}")));
        }
    }
    let field = |key: &str| -> Result<String> {
        let v = obj
            .get(key)
            .ok_or_else(|| Error::Schema(format!("missing key {key:?}")))?;
        let s = v
            .as_str()
            .ok_or_else(|| Error::Schema(format!("key {key:?} must hold a string")))?;
        let s = normalize_text(s);
        if s.is_empty() {
            return Err(Error::Schema(format!("key {key:?} is empty")));
        }
        Ok(s)
    };
    Ok(CaptionRecord {
        source_id: source_id.to_string(),
        place: field("where")?,
        when: field("when")?,
        weather: field("weather")?,
    })
}

/// One line of a raw caption corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCaption {
    pub source_id: String,
    pub raw: String,
}

/// Canonical term to variants. Variants are matched on whole tokens,
/// longest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynonymTable {
    mapping: BTreeMap<String, Vec<String>>,
    /// variant token sequences, longest first, with their canonical
    patterns: Vec<(Vec<String>, String)>,
}

impl SynonymTable {
    /// Builds a table from `canonical -> variants`. Terms are normalised.
    /// Variant and canonical vocabularies must be token-disjoint, which keeps
    /// a single rewrite pass idempotent.
    pub fn new(mapping: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut clean: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        for (canon, variants) in &mapping {
            let c = normalize_text(canon);
            if c.is_empty() {
                return Err(Error::Schema("empty canonical term".into()));
            }
            if clean.contains_key(&c) {
                return Err(Error::Schema(format!("canonical {c:?} listed twice")));
            }
            let mut vs = Vec::with_capacity(variants.len());
            for v in variants {
                let v = normalize_text(v);
                if v.is_empty() {
                    return Err(Error::Schema(format!("empty variant under {c:?}")));
                }
                if let Some(prev) = owner.get(&v) {
                    if *prev != c {
                        return Err(Error::Schema(format!(
                            "variant {v:?} maps to both {prev:?} and {c:?}"
                        )));
                    }
                    continue;
                }
                owner.insert(v.clone(), c.clone());
                vs.push(v);
            }
            clean.insert(c, vs);
        }
        for (v, c) in &owner {
            if clean.contains_key(v) {
                return Err(Error::Schema(format!(
                    "canonical {v:?} is also a variant of {c:?}"
                )));
            }
        }
        let canon_tokens: BTreeSet<&str> = clean.keys().flat_map(|c| c.split(' ')).collect();
        for v in owner.keys() {
            if let Some(t) = v.split(' ').find(|t| canon_tokens.contains(t)) {
                return Err(Error::Schema(format!(
                    "variant {v:?} reuses canonical token {t:?}"
                )));
            }
        }
        let mut patterns: Vec<(Vec<String>, String)> = owner
            .into_iter()
            .map(|(v, c)| (v.split(' ').map(String::from).collect(), c))
            .collect();
        // longest first; lexical order breaks ties deterministically
        patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            mapping: clean,
            patterns,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mapping: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("synonym table: {e}")))?;
        Self::new(mapping)
    }

    pub fn mapping(&self) -> &BTreeMap<String, Vec<String>> {
        &self.mapping
    }

    pub fn canonical_of(&self, term: &str) -> Option<&str> {
        let t = normalize_text(term);
        self.patterns
            .iter()
            .find(|(p, _)| p.join(" ") == t)
            .map(|(_, c)| c.as_str())
    }

    /// Rewrites every variant occurrence in an already-normalised string.
    pub fn rewrite(&self, text: &str) -> String {
        let tokens: Vec<&str> = text.split(' ').filter(|t| !t.is_empty()).collect();
        let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
        let mut i = 0;
        'scan: while i < tokens.len() {
            for (pat, canon) in &self.patterns {
                let n = pat.len();
                if i + n <= tokens.len() && pat.iter().zip(&tokens[i..i + n]).all(|(a, b)| a == b) {
                    out.extend(canon.split(' '));
                    i += n;
                    continue 'scan;
                }
            }
            out.push(tokens[i]);
            i += 1;
        }
        out.join(" ")
    }
}

pub fn normalize(rec: &CaptionRecord, table: &SynonymTable) -> CaptionRecord {
    rec.map_fields(|s| table.rewrite(&normalize_text(s)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterPolicy {
    pub banned: Vec<String>,
    pub max_len: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            banned: DEFAULT_BANNED.iter().map(|s| s.to_string()).collect(),
            max_len: DEFAULT_MAX_FIELD_LEN,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.banned.is_empty() {
            return Err(Error::Config("filter policy needs at least one banned term".into()));
        }
        if self.banned.iter().any(|b| b.trim().is_empty()) {
            return Err(Error::Config("banned terms must be non-empty".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    /// First violated rule, scanning fields in key order.
    pub fn check(&self, rec: &CaptionRecord) -> Option<RejectReason> {
        for (key, value) in rec.fields() {
            if let Some(b) = self.banned.iter().find(|b| value.contains(&normalize_text(b))) {
                return Some(RejectReason::Banned {
                    field: key.to_string(),
                    term: b.clone(),
                });
            }
            let len = value.chars().count();
            if len > self.max_len {
                return Some(RejectReason::Length {
                    field: key.to_string(),
                    len,
                });
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RejectReason {
    Banned { field: String, term: String },
    Length { field: String, len: usize },
    Parse { message: String },
    Schema { message: String },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Banned { term, .. } => write!(f, "banned:{term:?}"),
            Self::Length { .. } => write!(f, "length"),
            Self::Parse { .. } => write!(f, "parse"),
            Self::Schema { .. } => write!(f, "schema"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rejection {
    pub source_id: String,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<CaptionRecord>,
}

/// Splits records into kept and rejected, preserving input order in both.
pub fn filter(records: &[CaptionRecord], policy: &FilterPolicy) -> (Vec<CaptionRecord>, Vec<Rejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for rec in records {
        match policy.check(rec) {
            None => kept.push(rec.clone()),
            Some(reason) => rejected.push(Rejection {
                source_id: rec.source_id.clone(),
                reason,
                record: Some(rec.clone()),
            }),
        }
    }
    (kept, rejected)
}

pub fn assemble_prompt(rec: &CaptionRecord) -> Result<PromptString> {
    PromptString::new(&format!(
        "an aerial view of {} {} in {}",
        rec.place, rec.when, rec.weather
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLine {
    pub source_id: String,
    pub prompt: String,
}

/// Output of the whole caption stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionBatch {
    pub kept: Vec<CaptionRecord>,
    pub rejected: Vec<Rejection>,
    pub prompts: Vec<PromptLine>,
}

impl CaptionBatch {
    /// First kept prompt whose weather field names `term` as a token.
    pub fn prompt_for_weather(&self, term: &str) -> Option<&PromptLine> {
        self.kept
            .iter()
            .zip(&self.prompts)
            .find(|(r, _)| r.weather.split(' ').any(|t| t == term))
            .map(|(_, p)| p)
    }
}

/// Parses a raw corpus (JSONL of [`RawCaption`]), normalises, filters and
/// assembles prompts. Parse and schema failures become rejections; a corpus
/// line that is not a `RawCaption` at all is a hard error.
pub fn run_captions(corpus: &str, table: &SynonymTable, policy: &FilterPolicy) -> Result<CaptionBatch> {
    policy.validate()?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (lineno, line) in corpus.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCaption = serde_json::from_str(line)
            .map_err(|e| Error::Schema(format!("corpus line {}: {e}", lineno + 1)))?;
        let rec = match parse_caption(raw.raw.as_bytes(), &raw.source_id) {
            Ok(rec) => normalize(&rec, table),
            Err(e) => {
                let reason = match e {
                    Error::Parse(message) => RejectReason::Parse { message },
                    other => RejectReason::Schema {
                        message: other.to_string(),
                    },
                };
                rejected.push(Rejection {
                    source_id: raw.source_id,
                    reason,
                    record: None,
                });
                continue;
            }
        };
        // same rule as `filter`, applied record by record to keep corpus order
        match policy.check(&rec) {
            None => kept.push(rec),
            Some(reason) => rejected.push(Rejection {
                source_id: rec.source_id.clone(),
                reason,
                record: Some(rec),
            }),
        }
    }
    let prompts = kept
        .iter()
        .map(|r| {
            Ok(PromptLine {
                source_id: r.source_id.clone(),
                prompt: assemble_prompt(r)?.as_str().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionBatch {
        kept,
        rejected,
        prompts,
    })
}

/// One compact JSON object per line, newline-terminated.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(place: &str, when: &str, weather: &str) -> CaptionRecord {
        CaptionRecord {
            source_id: "t".into(),
            place: place.into(),
            when: when.into(),
            weather: weather.into(),
        }
    }

    fn fog_table() -> SynonymTable {
        let mut m = BTreeMap::new();
        m.insert("fog".to_string(), vec!["mist".into(), "misty".into(), "hazy".into(), "light haze".into()]);
        SynonymTable::new(m).unwrap()
    }

    #[test]
    fn parses_the_three_keys() {
        let r = parse_caption(br#"{"where":"desert plain","when":"midday","weather":"dust storm"}"#, "a").unwrap();
        assert_eq!(r, CaptionRecord { source_id: "a".into(), ..rec("desert plain", "midday", "dust storm") });
    }

    #[test]
    fn schema_and_parse_errors() {
        assert!(matches!(parse_caption(br#"{"where":"x","when":"y"}"#, "a"), Err(Error::Schema(_))));
        assert!(matches!(
            parse_caption(br#"{"where":"x","when":"y","weather":"z","mood":"calm"}"#, "a"),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_caption(br#"{"where":"x","when":"y","weather":3}"#, "a"),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_caption(br#"Sure! {"where":"x","when":"y","weather":"z"}"#, "a"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_caption(br#"{"where":"x","when":"y","weather":"z"} done"#, "a"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(parse_caption(&[0xff, 0xfe], "a"), Err(Error::Parse(_))));
        assert!(matches!(parse_caption(br#"["x"]"#, "a"), Err(Error::Schema(_))));
    }

    #[test]
    fn values_are_lowercased_and_collapsed() {
        let r = parse_caption(br#"{"where":"  Open   FIELD ","when":"Dawn","weather":"Light\tHaze"}"#, "a").unwrap();
        assert_eq!((r.place.as_str(), r.when.as_str(), r.weather.as_str()), ("open field", "dawn", "light haze"));
    }

    #[test]
    fn synonym_lookup_and_longest_first() {
        let t = fog_table();
        assert_eq!(normalize(&rec("a", "b", "misty"), &t).weather, "fog");
        assert_eq!(normalize(&rec("a", "b", "fog"), &t).weather, "fog");
        assert_eq!(normalize(&rec("a", "b", "light haze"), &t).weather, "fog");
        // "light" alone is untouched; "haze" is not a variant
        assert_eq!(normalize(&rec("a", "b", "light rain haze"), &t).weather, "light rain haze");
    }

    #[test]
    fn matcher_trace() {
        let mut m = BTreeMap::new();
        m.insert("fog".to_string(), vec!["haze".into(), "light haze".into(), "thick light haze".into()]);
        let t = SynonymTable::new(m).unwrap();
        assert_eq!(t.rewrite("thick light haze and light haze then haze"), "fog and fog then fog");
        assert_eq!(t.rewrite("light thick light haze"), "light fog");
    }

    #[test]
    fn table_validation() {
        let mk = |pairs: &[(&str, &[&str])]| {
            SynonymTable::new(
                pairs
                    .iter()
                    .map(|(c, vs)| (c.to_string(), vs.iter().map(|v| v.to_string()).collect()))
                    .collect(),
            )
        };
        assert!(mk(&[("fog", &["mist"]), ("rain", &["mist"])]).is_err());
        assert!(mk(&[("fog", &["mist"]), ("mist", &["drizzle"])]).is_err());
        assert!(mk(&[("fog", &["light fog"])]).is_err());
        assert!(mk(&[("fog", &[""])]).is_err());
        assert!(mk(&[("fog", &["Mist", "mist"])]).is_ok());
        assert!(SynonymTable::from_json("[1]").is_err());
    }

    #[test]
    fn filter_rules() {
        let p = FilterPolicy::default();
        let (kept, rej) = filter(
            &[
                rec("field", "day", "unclear conditions"),
                rec("field", "day", "fog"),
                rec(&"x".repeat(65), "day", "fog"),
                rec(&"x".repeat(64), "day", "fog"),
            ],
            &p,
        );
        assert_eq!(kept.len(), 2);
        assert_eq!(rej[0].reason.to_string(), "banned:\"unclear\"");
        assert_eq!(rej[1].reason.to_string(), "length");
        assert!(FilterPolicy { banned: vec![], max_len: 64 }.validate().is_err());
    }

    #[test]
    fn prompt_template() {
        let p = assemble_prompt(&rec("desert plain", "midday", "dust storm")).unwrap();
        assert_eq!(p.as_str(), "an aerial view of desert plain midday in dust storm");
    }

    #[test]
    fn corpus_keeps_order_across_stages() {
        let corpus = [
            r#"{"source_id":"a","raw":"{\"where\":\"field\",\"when\":\"day\",\"weather\":\"misty\"}"}"#,
            r#"{"source_id":"b","raw":"Here: {}"}"#,
            r#"{"source_id":"c","raw":"{\"where\":\"field\",\"when\":\"unknown\",\"weather\":\"fog\"}"}"#,
            r#"{"source_id":"d","raw":"{\"where\":\"road\",\"when\":\"dusk\"}"}"#,
        ]
        .join("\n");
        let b = run_captions(&corpus, &fog_table(), &FilterPolicy::default()).unwrap();
        assert_eq!(b.kept.len(), 1);
        let ids: Vec<_> = b.rejected.iter().map(|r| r.source_id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "d"]);
        assert_eq!(b.prompts[0].prompt, "an aerial view of field day in fog");
        assert_eq!(b.prompt_for_weather("fog").unwrap().source_id, "a");
        assert!(run_captions("not json", &fog_table(), &FilterPolicy::default()).is_err());
    }
}
