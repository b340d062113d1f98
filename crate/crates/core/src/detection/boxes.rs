use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_proper(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when either box is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn contained_in(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Labelled box. Serialised as `{"x1":..,"y1":..,"x2":..,"y2":..,"class":k}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub confidence: f64,
}

/// Detections sorted by descending confidence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Detections(Vec<Detection>);

impl Detections {
    /// Sorts by descending confidence; equal confidences keep input order.
    pub fn new(mut items: Vec<Detection>) -> Self {
        items.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Self(items)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn as_slice(&self) -> &[Detection] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.0.iter()
    }

    /// Detections as training labels (confidence dropped).
    pub fn as_labels(&self) -> Vec<GroundTruthBox> {
        self.0
            .iter()
            .map(|d| GroundTruthBox {
                bbox: d.bbox,
                class_id: d.class_id,
            })
            .collect()
    }
}

/// Keeps detections with confidence >= `tau`, preserving order.
pub fn pseudo_label(d: &Detections, tau: f64) -> Detections {
    Detections(d.0.iter().copied().filter(|x| x.confidence >= tau).collect())
}

/// Class-wise greedy non-maximum suppression.
pub fn nms(dets: Vec<Detection>, iou_thresh: f64) -> Detections {
    let sorted = Detections::new(dets).0;
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    Detections(kept)
}
