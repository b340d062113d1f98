//! JSON artifacts stamped with provenance, plus model and prediction files.

use crate::conv::Conv2d;
use crate::dataset::io_err;
use crate::detection::{DetectionHead, Detections, StudentModel, TeacherHead};
use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
}

impl Provenance {
    /// Hashes the compact JSON form of `config`.
    pub fn new<C: Serialize>(seed: u64, config: &C) -> Result<Self> {
        let bytes = serde_json::to_vec(config)?;
        Ok(Self {
            seed,
            config_hash: hex::encode(Sha256::digest(&bytes)),
            tool_version: TOOL_VERSION.to_string(),
        })
    }
}

/// Serialises `body` (which must be a JSON object) with a `provenance` key.
pub fn stamp<T: Serialize>(body: &T, prov: &Provenance) -> Result<String> {
    let mut v = serde_json::to_value(body)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Format("artifact body must be a json object".into()))?;
    obj.insert("provenance".into(), serde_json::to_value(prov)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Inverse of [`stamp`]. Provenance is optional so hand-written files load.
pub fn unstamp<T: DeserializeOwned>(text: &str) -> Result<(T, Option<Provenance>)> {
    let mut v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let prov = match v.as_object_mut().and_then(|o| o.remove("provenance")) {
        Some(p) => Some(serde_json::from_value(p).map_err(|e| Error::Schema(e.to_string()))?),
        None => None,
    };
    let body = serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))?;
    Ok((body, prov))
}

pub fn write_stamped<T: Serialize>(path: &Path, body: &T, prov: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, stamp(body, prov)?).map_err(io_err(path))
}

pub fn read_stamped<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    unstamp(&text)
        .map(|(b, _)| b)
        .map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    head: Conv2d,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudentFile {
    stem: Conv2d,
    head: Conv2d,
}

pub fn write_teacher(path: &Path, head: &TeacherHead, prov: &Provenance) -> Result<()> {
    write_stamped(path, &HeadFile { head: head.conv().clone() }, prov)
}

pub fn read_teacher(path: &Path) -> Result<TeacherHead> {
    let f: HeadFile = read_stamped(path)?;
    DetectionHead::from_conv(f.head)
}

pub fn write_student(path: &Path, s: &StudentModel, prov: &Provenance) -> Result<()> {
    let f = StudentFile {
        stem: s.stem().clone(),
        head: s.head().conv().clone(),
    };
    write_stamped(path, &f, prov)
}

pub fn read_student(path: &Path) -> Result<StudentModel> {
    let f: StudentFile = read_stamped(path)?;
    StudentModel::from_parts(f.stem, DetectionHead::from_conv(f.head)?)
}

/// One line per image: `{"detections": [{"x1":..,"class":k,"confidence":c}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub detections: Detections,
}

pub fn write_predictions(path: &Path, preds: &[Detections]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut out = String::new();
    for d in preds {
        out.push_str(&serde_json::to_string(&PredictionLine { detections: d.clone() })?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Detections>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let p: PredictionLine = serde_json::from_str(l)
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
            Ok(Detections::new(p.detections.iter().copied().collect()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn stamp_round_trip() {
        let prov = Provenance::new(42, &serde_json::json!({"a": 1})).unwrap();
        assert_eq!(prov.config_hash.len(), 64);
        let text = stamp(&serde_json::json!({"x": [1.5, 2.0]}), &prov).unwrap();
        let (body, p): (serde_json::Value, _) = unstamp(&text).unwrap();
        assert_eq!(body, serde_json::json!({"x": [1.5, 2.0]}));
        assert_eq!(p, Some(prov.clone()));
        assert!(stamp(&[1, 2], &prov).is_err());
    }

    #[test]
    fn models_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance::new(1, &0).unwrap();
        let s = StudentModel::new(5, 7).unwrap();
        write_student(&dir.path().join("s.json"), &s, &prov).unwrap();
        assert_eq!(read_student(&dir.path().join("s.json")).unwrap(), s);
        let h = DetectionHead::new(8, 7, &mut SeededRng::new(2)).unwrap();
        write_teacher(&dir.path().join("t.json"), &h, &prov).unwrap();
        assert_eq!(read_teacher(&dir.path().join("t.json")).unwrap(), h);
        assert!(read_student(&dir.path().join("t.json")).is_err());
    }
}
