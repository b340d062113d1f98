//! Scene datasets on disk (JSONL index plus P2AF images), a file-access
//! audit log, and a sealed store for target ground truth.

use crate::detection::{GroundTruthBox, Scene, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

/// What a recorded file access touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    SourceImage,
    SourceTruth,
    TargetImage,
    TargetTruth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub phase: String,
    pub kind: AccessKind,
    pub path: String,
}

#[derive(Debug, Default)]
struct AuditState {
    phase: String,
    events: Vec<AccessEvent>,
}

/// Shared, append-only access log. Clones share one log.
#[derive(Clone, Debug, Default)]
pub struct Audit {
    state: Arc<Mutex<AuditState>>,
}

impl Audit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&self, phase: &str) {
        self.lock().phase = phase.to_string();
    }

    pub fn phase(&self) -> String {
        self.lock().phase.clone()
    }

    pub fn record(&self, kind: AccessKind, path: &Path) {
        let mut st = self.lock();
        let phase = st.phase.clone();
        st.events.push(AccessEvent {
            phase,
            kind,
            path: path.display().to_string(),
        });
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.lock().events.clone()
    }

    pub fn count(&self, phase: &str, kind: AccessKind) -> usize {
        self.lock()
            .events
            .iter()
            .filter(|e| e.phase == phase && e.kind == kind)
            .count()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, AuditState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// One JSONL line: `{"image": "<path>", "boxes": [...]}`. Image paths are
/// relative to the index file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLine {
    pub image: String,
    pub boxes: Vec<GroundTruthBox>,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `scenes` as `<dir>/<name>.jsonl` with images under `<dir>/<name>/`.
pub fn write_dataset(dir: &Path, name: &str, scenes: &[Scene]) -> Result<PathBuf> {
    let img_dir = dir.join(name);
    std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut index = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let rel = format!("{name}/{i:04}.p2af");
        write_tensor_file(dir.join(&rel), &s.image)?;
        index.push_str(&serde_json::to_string(&DatasetLine {
            image: rel,
            boxes: s.truth.clone(),
        })?);
        index.push('\n');
    }
    let path = dir.join(format!("{name}.jsonl"));
    std::fs::write(&path, index).map_err(io_err(&path))?;
    Ok(path)
}

fn check_truth(boxes: &[GroundTruthBox], where_: &str) -> Result<()> {
    let side = IMAGE_SIZE as f64;
    for b in boxes {
        if !b.bbox.is_proper() || !b.bbox.contained_in(side, side) || b.class_id >= NUM_CLASSES {
            return Err(Error::Schema(format!("invalid box {b:?} in {where_}")));
        }
    }
    Ok(())
}

fn read_index(path: &Path) -> Result<Vec<(PathBuf, Vec<GroundTruthBox>)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("{}:{}", path.display(), n + 1);
        let l: DatasetLine =
            serde_json::from_str(line).map_err(|e| Error::Schema(format!("{where_}: {e}")))?;
        check_truth(&l.boxes, &where_)?;
        out.push((base.join(&l.image), l.boxes));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("dataset {} has no scenes", path.display())));
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Tensor> {
    let t = read_tensor_file(path)?;
    if t.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::Schema(format!(
            "image {} has shape {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

/// Loads a labelled source dataset, logging every image and its truth.
pub fn load_source(path: &Path, audit: &Audit) -> Result<Vec<Scene>> {
    audit.record(AccessKind::SourceTruth, path);
    read_index(path)?
        .into_iter()
        .map(|(img, truth)| {
            audit.record(AccessKind::SourceImage, &img);
            Ok(Scene {
                image: read_image(&img)?,
                truth,
            })
        })
        .collect()
}

/// Target ground truth, sealed. The only accessor logs a truth read.
#[derive(Debug)]
pub struct TruthVault {
    path: PathBuf,
    truth: Vec<Vec<GroundTruthBox>>,
    audit: Audit,
}

impl TruthVault {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn reveal(&self) -> &[Vec<GroundTruthBox>] {
        self.audit.record(AccessKind::TargetTruth, &self.path);
        &self.truth
    }
}

/// Loads a target dataset as bare images plus a sealed truth vault.
pub fn load_target(path: &Path, audit: &Audit) -> Result<(Vec<Tensor>, TruthVault)> {
    let mut images = Vec::new();
    let mut truth = Vec::new();
    for (img, boxes) in read_index(path)? {
        audit.record(AccessKind::TargetImage, &img);
        images.push(read_image(&img)?);
        truth.push(boxes);
    }
    Ok((
        images,
        TruthVault {
            path: path.to_path_buf(),
            truth,
            audit: audit.clone(),
        },
    ))
}
