//! Detection loss, target assignment and the three training loops: teacher
//! head on cached (steered) features, student on labelled images, and
//! student adaptation on teacher pseudo-labels.

use super::boxes::{pseudo_label, GroundTruthBox};
use super::cache::SourceCache;
use super::head::{
    cell_center, softmax, teacher_detect, DetectionHead, StudentModel, TeacherHead, TeacherInput,
    BOX, BOX_SCALE, CELL_SIZE, CLS, HEAD_OUTPUTS, OBJ,
};
use super::scene::NUM_CLASSES;
use crate::conv::{relu_backward, Adam, ConvGrads};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::steering::{pin, StyleSet};
use crate::tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

/// Cells within this Chebyshev distance of a box's centre cell (and inside
/// the box) are positives for that box.
pub const ASSIGN_RADIUS: usize = 1;
/// Weight of positive cells in the objectness cross-entropy.
pub const POS_WEIGHT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Positive {
    cell: usize,
    class_id: usize,
    offsets: [f64; 4],
}

/// Per-cell training targets for one image.
#[derive(Clone, Debug)]
pub struct CellTargets {
    grid: (usize, usize),
    positive: Vec<Option<Positive>>,
}

impl CellTargets {
    pub fn positives(&self) -> usize {
        self.positive.iter().flatten().count()
    }
}

pub fn assign_targets(truth: &[GroundTruthBox], grid_h: usize, grid_w: usize) -> CellTargets {
    let mut positive: Vec<Option<Positive>> = vec![None; grid_h * grid_w];
    let mut owner_dist = vec![f64::INFINITY; grid_h * grid_w];
    let r = ASSIGN_RADIUS as isize;
    for t in truth {
        let (bx, by) = t.bbox.center();
        let crow = ((by / CELL_SIZE) as isize).clamp(0, grid_h as isize - 1);
        let ccol = ((bx / CELL_SIZE) as isize).clamp(0, grid_w as isize - 1);
        for row in crow - r..=crow + r {
            for col in ccol - r..=ccol + r {
                if row < 0 || col < 0 || row >= grid_h as isize || col >= grid_w as isize {
                    continue;
                }
                let (row, col) = (row as usize, col as usize);
                let (cx, cy) = cell_center(row, col);
                let inside = cx > t.bbox.x1 && cx < t.bbox.x2 && cy > t.bbox.y1 && cy < t.bbox.y2;
                let centre_cell = row as isize == crow && col as isize == ccol;
                if !inside && !centre_cell {
                    continue;
                }
                let cell = row * grid_w + col;
                let dist = (cx - bx).hypot(cy - by);
                if dist < owner_dist[cell] {
                    owner_dist[cell] = dist;
                    positive[cell] = Some(Positive {
                        cell,
                        class_id: t.class_id,
                        offsets: [
                            (cx - t.bbox.x1) / BOX_SCALE,
                            (cy - t.bbox.y1) / BOX_SCALE,
                            (t.bbox.x2 - cx) / BOX_SCALE,
                            (t.bbox.y2 - cy) / BOX_SCALE,
                        ],
                    });
                }
            }
        }
    }
    CellTargets {
        grid: (grid_h, grid_w),
        positive,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
    pub total: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy on objectness over all cells, cross-entropy on classes and L1 on box distances at
/// positive cells, each normalised by the number of positive cells. Returns the loss and its gradient with respect to `out`.
pub fn detection_loss(out: &Tensor, targets: &CellTargets) -> Result<(LossBreakdown, Tensor)> {
    let (c, gh, gw) = out.dims3()?;
    if c != HEAD_OUTPUTS || (gh, gw) != targets.grid {
        return Err(Error::shape(format!(
            "head output {:?} does not match target grid {:?}",
            out.shape(),
            targets.grid
        )));
    }
    let plane = gh * gw;
    let n_pos = targets.positives();
    let od = out.data();
    let mut grad = Tensor::zeros(out.shape());
    let gd = grad.data_mut();
    let mut loss = LossBreakdown::default();
    // objectness is summed over every cell and normalised by the positive count
    let obj_norm = 1.0 / n_pos.max(1) as f64;
    for (cell, pos) in targets.positive.iter().enumerate() {
        if pos.is_none() {
            let o = od[OBJ * plane + cell];
            loss.objectness += softplus(o) * obj_norm;
            gd[OBJ * plane + cell] = sigmoid(o) * obj_norm;
        }
    }
    if n_pos > 0 {
        let inv = 1.0 / n_pos as f64;
        for p in targets.positive.iter().flatten() {
            let cell = p.cell;
            let o = od[OBJ * plane + cell];
            loss.objectness += POS_WEIGHT * softplus(-o) * inv;
            gd[OBJ * plane + cell] = POS_WEIGHT * (sigmoid(o) - 1.0) * inv;

            let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| od[(CLS + k) * plane + cell]).collect();
            let probs = softmax(&logits);
            loss.class -= probs[p.class_id].max(1e-300).ln() * inv;
            for (k, pk) in probs.iter().enumerate() {
                let y = if k == p.class_id { 1.0 } else { 0.0 };
                gd[(CLS + k) * plane + cell] = (pk - y) * inv;
            }

            for j in 0..4 {
                let diff = od[(BOX + j) * plane + cell] - p.offsets[j];
                loss.boxes += diff.abs() * inv;
                gd[(BOX + j) * plane + cell] = diff.signum() * inv;
            }
        }
    }
    loss.total = loss.objectness + loss.class + loss.boxes;
    Ok((loss, grad))
}

/// One SGD step of a head on a feature map; returns the pre-step loss.
fn head_step(
    head: &mut DetectionHead,
    opt: &mut Adam,
    features: &Tensor,
    truth: &[GroundTruthBox],
    lr: f64,
) -> Result<LossBreakdown> {
    let out = head.forward(features)?;
    let (_, gh, gw) = out.dims3()?;
    let (loss, grad) = detection_loss(&out, &assign_targets(truth, gh, gw))?;
    let (_, grads) = head.conv().backward(features, &grad, false)?;
    opt.step(head.conv_mut(), &grads, lr);
    Ok(loss)
}

fn mean_total(losses: &[LossBreakdown]) -> f64 {
    losses.iter().map(|l| l.total).sum::<f64>() / losses.len().max(1) as f64
}

/// Trains a head on fixed (unsteered) feature maps. Used before deployment
/// to fit the teacher head on source data.
pub fn train_head(
    samples: &[(Tensor, Vec<GroundTruthBox>)],
    mut head: DetectionHead,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(DetectionHead, Vec<f64>)> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut opt = Adam::new(head.conv());
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch = Vec::with_capacity(samples.len());
        for &i in &order {
            let (f, truth) = &samples[i];
            epoch.push(head_step(&mut head, &mut opt, f, truth, cfg.lr)?);
        }
        curve.push(mean_total(&epoch));
    }
    Ok((head, curve))
}

/// Result of [`finetune_teacher`]: the new head and the mean training loss
/// of every epoch.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub head: TeacherHead,
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes only the teacher head on cached source features re-styled by
/// PIN. Each (epoch, scene) draws one style uniformly with replacement.
pub fn finetune_teacher(
    cache: &SourceCache,
    styles: &StyleSet,
    head: &TeacherHead,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if styles.is_empty() {
        return Err(Error::EmptyInput("style set is empty".into()));
    }
    let mut head = head.clone();
    let mut opt = Adam::new(head.conv());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch = Vec::with_capacity(cache.len());
        for i in 0..cache.len() {
            let style = styles.entries[rng.index(styles.len())].stats();
            let steered = pin(cache.features(i), &style)?;
            epoch.push(head_step(&mut head, &mut opt, &steered, &cache.scene(i).truth, cfg.lr)?);
        }
        epoch_losses.push(mean_total(&epoch));
    }
    Ok(FinetuneOutcome { head, epoch_losses })
}

/// Adam state for both student convolutions.
struct StudentOpt {
    stem: Adam,
    head: Adam,
}

impl StudentOpt {
    fn new(s: &StudentModel) -> Self {
        Self {
            stem: Adam::new(&s.stem),
            head: Adam::new(s.head.conv()),
        }
    }
}

/// Loss and parameter gradients (stem, head) of the student on one image.
fn student_grads(
    student: &StudentModel,
    img: &Tensor,
    labels: &[GroundTruthBox],
) -> Result<(LossBreakdown, ConvGrads, ConvGrads)> {
    let pass = student.forward_pass(img)?;
    let (_, gh, gw) = pass.out.dims3()?;
    let (loss, grad) = detection_loss(&pass.out, &assign_targets(labels, gh, gw))?;
    let (gfeat, head_grads) = student.head.conv().backward(&pass.features, &grad, true)?;
    let mut gpre = gfeat.expect("input gradient requested");
    relu_backward(&pass.pre, &mut gpre);
    let (_, stem_grads) = student.stem.backward(img, &gpre, false)?;
    Ok((loss, stem_grads, head_grads))
}

fn student_step(
    student: &mut StudentModel,
    opt: &mut StudentOpt,
    img: &Tensor,
    labels: &[GroundTruthBox],
    lr: f64,
) -> Result<LossBreakdown> {
    let (loss, stem_grads, head_grads) = student_grads(student, img, labels)?;
    opt.head.step(student.head.conv_mut(), &head_grads, lr);
    opt.stem.step(&mut student.stem, &stem_grads, lr);
    Ok(loss)
}

/// Supervised student training; every parameter is trainable.
pub fn train_student(
    mut student: StudentModel,
    samples: &[(&Tensor, &[GroundTruthBox])],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(StudentModel, Vec<f64>)> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut opt = StudentOpt::new(&student);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch = Vec::with_capacity(samples.len());
        for &i in &order {
            let (img, labels) = samples[i];
            epoch.push(student_step(&mut student, &mut opt, img, labels, cfg.lr)?);
        }
        curve.push(mean_total(&epoch));
    }
    Ok((student, curve))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Summary of an adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub student: StudentModel,
    pub pseudo_labels: Vec<Vec<GroundTruthBox>>,
    pub epoch_losses: Vec<f64>,
}

/// Teacher pseudo-labels per target image: teacher inference with NMS, then
/// the confidence threshold `tau`.
pub fn teacher_pseudo_labels(
    target_images: &[Tensor],
    teacher_head: &TeacherHead,
    w: &EncoderWeights,
    tau: f64,
) -> Result<Vec<Vec<GroundTruthBox>>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must be in [0, 1], got {tau}")));
    }
    target_images
        .iter()
        .map(|img| {
            let d = teacher_detect(TeacherInput::Image(img), teacher_head, w, 0.0)?;
            Ok(pseudo_label(&d, tau).as_labels())
        })
        .collect()
}

/// Adapts the student on unlabelled target images supervised by the
/// teacher's pseudo-labels. Target imagery enters as bare tensors, so no
/// ground truth can reach this function.
pub fn adapt_student(
    student: &StudentModel,
    target_images: &[Tensor],
    teacher_head: &TeacherHead,
    w: &EncoderWeights,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    adapt_student_with_replay(student, target_images, teacher_head, w, cfg, None)
}

/// As [`adapt_student`], optionally mixing the labelled cache scenes into
/// every epoch so the student keeps its source supervision.
pub fn adapt_student_with_replay(
    student: &StudentModel,
    target_images: &[Tensor],
    teacher_head: &TeacherHead,
    w: &EncoderWeights,
    cfg: &AdaptConfig,
    replay: Option<&SourceCache>,
) -> Result<AdaptOutcome> {
    if target_images.is_empty() {
        return Err(Error::EmptyInput("no target images".into()));
    }
    let pseudo_labels = teacher_pseudo_labels(target_images, teacher_head, w, cfg.tau)?;
    let mut samples: Vec<(&Tensor, &[GroundTruthBox])> = target_images
        .iter()
        .zip(&pseudo_labels)
        .map(|(img, l)| (img, l.as_slice()))
        .collect();
    if let Some(cache) = replay {
        for i in 0..cache.len() {
            let s = cache.scene(i);
            samples.push((&s.image, s.truth.as_slice()));
        }
    }
    let mut rng = SeededRng::new(cfg.seed);
    let (student, epoch_losses) = train_student(
        student.clone(),
        &samples,
        &TrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
        },
        &mut rng,
    )?;
    Ok(AdaptOutcome {
        student,
        pseudo_labels,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::boxes::BBox;
    use crate::tensor::{rng_fill, Fill};

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> GroundTruthBox {
        GroundTruthBox {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
        }
    }

    #[test]
    fn assignment_marks_centre_neighbourhood() {
        let t = assign_targets(&[gt(10.0, 10.0, 22.0, 20.0, 1)], 32, 32);
        // centre (16, 15) -> cell row 7, col 8; radius 1 gives a 3x3 block
        assert_eq!(t.positives(), 9);
        let p = t.positive[7 * 32 + 8].unwrap();
        assert_eq!(p.class_id, 1);
        let (cx, cy) = cell_center(7, 8);
        assert_eq!(p.offsets[0], (cx - 10.0) / BOX_SCALE);
        assert_eq!(p.offsets[3], (20.0 - cy) / BOX_SCALE);
        assert_eq!(assign_targets(&[], 32, 32).positives(), 0);
    }

    fn loss_of(out: &Tensor, t: &CellTargets) -> f64 {
        detection_loss(out, t).unwrap().0.total
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let targets = assign_targets(&[gt(2.0, 2.0, 12.0, 12.0, 2), gt(0.0, 8.0, 6.0, 16.0, 0)], 8, 8);
        let out = rng_fill(&[HEAD_OUTPUTS, 8, 8], 5, Fill::Normal { std: 1.3 }).unwrap();
        let (_, grad) = detection_loss(&out, &targets).unwrap();
        let h = 1e-6;
        for idx in 0..out.numel() {
            let mut p = out.clone();
            p.data_mut()[idx] += h;
            let mut m = out.clone();
            m.data_mut()[idx] -= h;
            let fd = (loss_of(&p, &targets) - loss_of(&m, &targets)) / (2.0 * h);
            assert!((fd - grad.data()[idx]).abs() < 1e-6, "idx {idx}: {fd} vs {}", grad.data()[idx]);
        }
    }

    #[test]
    fn student_gradient_slice_matches_finite_differences() {
        let student = StudentModel::new(3, 3).unwrap();
        let img = rng_fill(&[3, 16, 16], 2, Fill::Uniform { half_width: 0.5 })
            .unwrap()
            .map(|v| v + 0.5)
            .unwrap();
        let labels = [gt(3.0, 3.0, 11.0, 12.0, 1)];
        let loss = |s: &StudentModel| {
            let out = s.forward_pass(&img).unwrap().out;
            let (_, gh, gw) = out.dims3().unwrap();
            loss_of(&out, &assign_targets(&labels, gh, gw))
        };
        let (_, stem_grads, head_grads) = student_grads(&student, &img, &labels).unwrap();
        let h = 1e-6;
        for idx in (0..student.stem.weight.len()).step_by(9).take(24) {
            let analytic = stem_grads.weight[idx];
            let mut p = student.clone();
            p.stem.weight[idx] += h;
            let mut m = student.clone();
            m.stem.weight[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()), "stem {idx}: {fd} vs {analytic}");
        }
        for idx in (0..student.head.conv().weight.len()).step_by(37).take(40) {
            let analytic = head_grads.weight[idx];
            let mut p = student.clone();
            p.head.conv_mut().weight[idx] += h;
            let mut m = student.clone();
            m.head.conv_mut().weight[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()), "head {idx}: {fd} vs {analytic}");
        }
    }
}
