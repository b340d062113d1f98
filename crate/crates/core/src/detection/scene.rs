//! Synthetic aerial-style scenes and parametric photometric domain shifts.

use super::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;
/// Level every pixel is blended toward by `gray_blend`.
pub const GRAY_LEVEL: f64 = 0.5;
pub const MIN_BOX_SIDE: i64 = 10;
pub const MAX_BOX_SIDE: i64 = 18;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_TRUTH_IOU: f64 = 0.3;

/// Base RGB colour of each object class.
pub const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.85, 0.20, 0.15],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.90],
];
const BACKGROUND: [f64; 3] = [0.45, 0.43, 0.38];
const BACKGROUND_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub truth: Vec<GroundTruthBox>,
}

/// Per-channel affine shift, blend toward gray, then additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    pub gray_blend: f64,
    pub noise_std: f64,
}

impl DomainConfig {
    pub fn clear() -> Self {
        Self {
            name: "clear".into(),
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            gray_blend: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn fog() -> Self {
        Self {
            name: "fog".into(),
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            gray_blend: 0.6,
            noise_std: 0.02,
        }
    }

    pub fn dust() -> Self {
        Self {
            name: "dust".into(),
            channel_gain: [0.95, 0.75, 0.45],
            channel_bias: [0.20, 0.12, 0.02],
            gray_blend: 0.2,
            noise_std: 0.02,
        }
    }

    pub fn rain() -> Self {
        Self {
            name: "rain".into(),
            channel_gain: [0.45, 0.5, 0.6],
            channel_bias: [0.0, 0.02, 0.08],
            gray_blend: 0.15,
            noise_std: 0.07,
        }
    }

    pub fn snow() -> Self {
        Self {
            name: "snow".into(),
            channel_gain: [0.6, 0.62, 0.65],
            channel_bias: [0.38, 0.38, 0.4],
            gray_blend: 0.15,
            noise_std: 0.06,
        }
    }

    /// The four shifted presets in a fixed order.
    pub fn shifted_presets() -> Vec<Self> {
        vec![Self::fog(), Self::dust(), Self::rain(), Self::snow()]
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "clear" => Some(Self::clear()),
            "fog" => Some(Self::fog()),
            "dust" => Some(Self::dust()),
            "rain" => Some(Self::rain()),
            "snow" => Some(Self::snow()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .channel_gain
            .iter()
            .chain(&self.channel_bias)
            .all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&self.gray_blend) || !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("invalid domain config {:?}", self.name)));
        }
        Ok(())
    }

    /// Applies the shift to an image in place, drawing noise from `rng`.
    pub fn apply(&self, image: &mut Tensor, rng: &mut SeededRng) {
        let b = self.gray_blend;
        for c in 0..3 {
            let (g, beta) = (self.channel_gain[c], self.channel_bias[c]);
            for px in image.channel_mut(c) {
                let shifted = ((1.0 - b) * (g * *px + beta) + b * GRAY_LEVEL).clamp(0.0, 1.0);
                let noise = if self.noise_std > 0.0 {
                    rng.normal(0.0, self.noise_std)
                } else {
                    0.0
                };
                *px = (shifted + noise).clamp(0.0, 1.0);
            }
        }
    }
}

/// Unshifted layout: background colour and labelled boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub background: [f64; 3],
    pub boxes: Vec<GroundTruthBox>,
}

pub fn gen_layout(rng: &mut SeededRng) -> Result<Layout> {
    let background = [0, 1, 2].map(|c| BACKGROUND[c] + rng.uniform(-BACKGROUND_JITTER, BACKGROUND_JITTER));
    let count = rng.int_in(1, 3) as usize;
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement(format!(
                "could not place {count} boxes in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        }
        let w = rng.int_in(MIN_BOX_SIDE, MAX_BOX_SIDE);
        let h = rng.int_in(MIN_BOX_SIDE, MAX_BOX_SIDE);
        let x = rng.int_in(0, IMAGE_SIZE as i64 - w);
        let y = rng.int_in(0, IMAGE_SIZE as i64 - h);
        let class_id = rng.index(NUM_CLASSES);
        let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        if boxes.iter().all(|b| b.bbox.iou(&bbox) < MAX_TRUTH_IOU) {
            boxes.push(GroundTruthBox { bbox, class_id });
        }
    }
    Ok(Layout { background, boxes })
}

/// Paints a layout: uniform background, then solid class-coloured boxes in
/// order.
pub fn render(layout: &Layout) -> Tensor {
    let n = IMAGE_SIZE;
    let mut img = Tensor::zeros(&[3, n, n]);
    for c in 0..3 {
        img.channel_mut(c).fill(layout.background[c]);
    }
    for b in &layout.boxes {
        let color = CLASS_COLORS[b.class_id];
        for c in 0..3 {
            let plane = img.channel_mut(c);
            for y in b.bbox.y1 as usize..b.bbox.y2 as usize {
                plane[y * n + b.bbox.x1 as usize..y * n + b.bbox.x2 as usize].fill(color[c]);
            }
        }
    }
    img
}

pub fn gen_scene(domain: &DomainConfig, rng: &mut SeededRng) -> Result<Scene> {
    domain.validate()?;
    let layout = gen_layout(rng)?;
    let mut image = render(&layout);
    domain.apply(&mut image, rng);
    Ok(Scene {
        image,
        truth: layout.boxes,
    })
}

/// `count` scenes from one stream seeded with `seed`.
pub fn gen_scenes(domain: &DomainConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    let mut rng = SeededRng::new(seed);
    (0..count).map(|_| gen_scene(domain, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clear_domain_keeps_class_colors() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let s = gen_scene(&DomainConfig::clear(), &mut rng).unwrap();
            // the last painted box is never occluded
            let last = s.truth.last().unwrap();
            let (cx, cy) = last.bbox.center();
            for c in 0..3 {
                assert_eq!(
                    s.image.at3(c, cy as usize, cx as usize),
                    CLASS_COLORS[last.class_id][c]
                );
            }
        }
    }

    #[test]
    fn class0_box_interior_has_base_color() {
        let mut rng = SeededRng::new(1);
        let layout = Layout {
            background: BACKGROUND,
            boxes: vec![GroundTruthBox {
                bbox: BBox::new(4.0, 6.0, 20.0, 18.0),
                class_id: 0,
            }],
        };
        let mut img = render(&layout);
        DomainConfig::clear().apply(&mut img, &mut rng);
        for y in 6..18 {
            for x in 4..20 {
                for c in 0..3 {
                    assert_eq!(img.at3(c, y, x), CLASS_COLORS[0][c]);
                }
            }
        }
    }

    #[test]
    fn generator_contract_holds_for_every_preset() {
        let mut domains = DomainConfig::shifted_presets();
        domains.push(DomainConfig::clear());
        for (i, d) in domains.iter().enumerate() {
            let scenes = gen_scenes(d, 50, i as u64).unwrap();
            for s in scenes {
                assert!((1..=3).contains(&s.truth.len()));
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                for (j, a) in s.truth.iter().enumerate() {
                    assert!(a.bbox.contained_in(64.0, 64.0));
                    assert!(a.bbox.area() >= 16.0);
                    assert!(a.class_id < NUM_CLASSES);
                    for b in &s.truth[j + 1..] {
                        assert!(a.bbox.iou(&b.bbox) < 0.3);
                    }
                }
            }
        }
    }

    #[test]
    fn fog_shift_matches_straight_line_formula() {
        let fog = DomainConfig::fog();
        let mut rng = SeededRng::new(3);
        let scene = gen_scene(&fog, &mut rng).unwrap();
        // replay: same stream, layout first, then one normal draw per pixel
        let mut replay = SeededRng::new(3);
        let layout = gen_layout(&mut replay).unwrap();
        let clean = render(&layout);
        assert_eq!(layout.boxes, scene.truth);
        for c in 0..3 {
            for i in 0..64 * 64 {
                let px = clean.channel(c)[i];
                let mut v = 0.4 * (1.0 * px + 0.0) + 0.6 * 0.5;
                v = v.clamp(0.0, 1.0);
                v += replay.normal(0.0, 0.02);
                v = v.clamp(0.0, 1.0);
                assert_eq!(scene.image.channel(c)[i], v);
            }
        }
    }

    #[test]
    fn invalid_domain_rejected() {
        let mut d = DomainConfig::fog();
        d.gray_blend = 1.5;
        assert!(gen_scene(&d, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn domain_json_has_five_fields() {
        let v = serde_json::to_value(DomainConfig::dust()).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 5);
        let bad = r#"{"name":"x","channel_gain":[1,1,1],"channel_bias":[0,0,0],"gray_blend":0,"noise_std":0,"extra":1}"#;
        assert!(serde_json::from_str::<DomainConfig>(bad).is_err());
    }
}
