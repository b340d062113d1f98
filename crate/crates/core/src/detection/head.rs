//! Anchor-free per-cell detection head and the two detectors built on it.
//!
//! Every cell of the stride-2 layer-1 grid reads a square window of
//! features and emits one objectness logit, `NUM_CLASSES` class logits and
//! four distances `(left, top, right, bottom)` from the cell centre to the
//! box edges, in units of [`BOX_SCALE`] pixels.

use super::boxes::{nms, BBox, Detection, Detections};
use super::scene::{IMAGE_SIZE, NUM_CLASSES};
use crate::conv::{relu, Conv2d};
use crate::encoder::{encode_image_layer1, EncoderWeights, IMAGE_CHANNELS, LAYER1_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{rng_fill_from, Fill, SeededRng, Tensor};
use sha2::{Digest, Sha256};

pub const HEAD_OUTPUTS: usize = 1 + NUM_CLASSES + 4;
pub const OBJ: usize = 0;
pub const CLS: usize = 1;
pub const BOX: usize = 1 + NUM_CLASSES;
/// Pixels per grid cell.
pub const CELL_SIZE: f64 = 2.0;
pub const BOX_SCALE: f64 = 8.0;
pub const NMS_IOU: f64 = 0.5;
pub const DEFAULT_WINDOW: usize = 7;
const OBJECTNESS_PRIOR: f64 = -4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    conv: Conv2d,
}

/// The teacher's head sits on the frozen encoder stem.
pub type TeacherHead = DetectionHead;

impl DetectionHead {
    /// Small random init with a negative objectness prior.
    pub fn new(in_channels: usize, window: usize, rng: &mut SeededRng) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::Config(format!("head window must be odd, got {window}")));
        }
        let mut conv = Conv2d::zeros(in_channels, HEAD_OUTPUTS, window, 1, window / 2);
        let fan_in = (in_channels * window * window) as f64;
        conv.weight = rng_fill_from(&[conv.weight.len()], rng, Fill::Normal { std: 0.1 / fan_in.sqrt() })?
            .into_data();
        conv.bias[OBJ] = OBJECTNESS_PRIOR;
        for b in &mut conv.bias[BOX..] {
            *b = 1.0;
        }
        Ok(Self { conv })
    }

    pub fn from_conv(conv: Conv2d) -> Result<Self> {
        if conv.c_out != HEAD_OUTPUTS || conv.stride != 1 || conv.kernel % 2 == 0 || conv.pad != conv.kernel / 2 {
            return Err(Error::Config("conv is not a valid detection head".into()));
        }
        Ok(Self { conv })
    }

    pub fn window(&self) -> usize {
        self.conv.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.conv.c_in
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub(crate) fn conv_mut(&mut self) -> &mut Conv2d {
        &mut self.conv
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.conv.forward(features)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.conv.weight.iter().chain(&self.conv.bias) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Centre of grid cell `(row, col)` in pixels.
pub fn cell_center(row: usize, col: usize) -> (f64, f64) {
    ((col as f64 + 0.5) * CELL_SIZE, (row as f64 + 0.5) * CELL_SIZE)
}

/// Turns raw head output into scored boxes: score is
/// `sigmoid(objectness) * softmax(class)` of the best class, boxes are
/// clamped to the image, then class-wise NMS and the confidence floor apply.
pub fn decode(out: &Tensor, conf_floor: f64) -> Result<Detections> {
    let (c, gh, gw) = out.dims3()?;
    if c != HEAD_OUTPUTS {
        return Err(Error::shape(format!("head output has {c} channels")));
    }
    let size = IMAGE_SIZE as f64;
    let mut dets = Vec::new();
    let mut logits = [0.0; NUM_CLASSES];
    for row in 0..gh {
        for col in 0..gw {
            let obj = sigmoid(out.at3(OBJ, row, col));
            // cheap reject before the softmax
            if obj < conf_floor {
                continue;
            }
            for (k, l) in logits.iter_mut().enumerate() {
                *l = out.at3(CLS + k, row, col);
            }
            let probs = softmax(&logits);
            let (class_id, p) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
            let confidence = (obj * p).clamp(0.0, 1.0);
            if confidence < conf_floor {
                continue;
            }
            let (cx, cy) = cell_center(row, col);
            let d = |j: usize| BOX_SCALE * out.at3(BOX + j, row, col).max(0.0);
            let bbox = BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3)).clamp_to(size, size);
            if !bbox.is_proper() {
                continue;
            }
            dets.push(Detection {
                bbox,
                class_id,
                confidence,
            });
        }
    }
    Ok(nms(dets, NMS_IOU))
}

/// What the teacher is run on: a raw image, or a layer-1 map (possibly
/// steered) injected past the stem.
#[derive(Clone, Copy, Debug)]
pub enum TeacherInput<'a> {
    Image(&'a Tensor),
    Features(&'a Tensor),
}

pub fn teacher_detect(
    input: TeacherInput<'_>,
    head: &TeacherHead,
    w: &EncoderWeights,
    conf_floor: f64,
) -> Result<Detections> {
    let out = match input {
        TeacherInput::Image(img) => head.forward(&encode_image_layer1(img, w)?)?,
        TeacherInput::Features(f) => head.forward(f)?,
    };
    decode(&out, conf_floor)
}

/// Lightweight deployable detector: its own trainable stem plus a head.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub(crate) stem: Conv2d,
    pub(crate) head: DetectionHead,
}

/// Forward intermediates needed by the student's backward pass.
pub(crate) struct StudentPass {
    pub pre: Tensor,
    pub features: Tensor,
    pub out: Tensor,
}

impl StudentModel {
    pub fn new(seed: u64, window: usize) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let mut stem = Conv2d::zeros(IMAGE_CHANNELS, LAYER1_CHANNELS, 3, 2, 1);
        let fan_in = (IMAGE_CHANNELS * 9) as f64;
        let std = 1.0 / fan_in.sqrt();
        stem.weight = rng_fill_from(&[stem.weight.len()], &mut rng, Fill::Normal { std })?.into_data();
        stem.bias = rng_fill_from(&[LAYER1_CHANNELS], &mut rng, Fill::Normal { std })?.into_data();
        let head = DetectionHead::new(LAYER1_CHANNELS, window, &mut rng)?;
        Ok(Self { stem, head })
    }

    /// Reassembles a student from stored parts.
    pub fn from_parts(stem: Conv2d, head: DetectionHead) -> Result<Self> {
        if stem.c_in != IMAGE_CHANNELS || stem.stride != 2 || stem.c_out != head.in_channels() {
            return Err(Error::Config("stem does not fit the student layout".into()));
        }
        Ok(Self { stem, head })
    }

    pub fn head(&self) -> &DetectionHead {
        &self.head
    }

    pub fn stem(&self) -> &Conv2d {
        &self.stem
    }

    pub(crate) fn forward_pass(&self, img: &Tensor) -> Result<StudentPass> {
        let (c, h, w) = img.dims3()?;
        if c != IMAGE_CHANNELS || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("student input {:?}", img.shape())));
        }
        let pre = self.stem.forward(img)?;
        let features = relu(&pre);
        let out = self.head.forward(&features)?;
        Ok(StudentPass { pre, features, out })
    }

    pub fn detect(&self, img: &Tensor, conf_floor: f64) -> Result<Detections> {
        decode(&self.forward_pass(img)?.out, conf_floor)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.stem.weight.iter().chain(&self.stem.bias) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.head.fingerprint().as_bytes());
        hex::encode(h.finalize())
    }
}
