//! Desk-scale detection stack: synthetic scenes under photometric domain
//! shifts, an anchor-free head, teacher/student training and mAP@50.

pub mod boxes;
pub mod cache;
pub mod eval;
pub mod head;
pub mod scene;
pub mod train;

pub use boxes::{nms, pseudo_label, BBox, Detection, Detections, GroundTruthBox};
pub use cache::{SourceCache, SOURCE_CACHE_SIZE};
pub use eval::{evaluate_map, EvalReport};
pub use head::{teacher_detect, DetectionHead, DEFAULT_WINDOW, StudentModel, TeacherHead, TeacherInput};
pub use scene::{gen_scene, gen_scenes, DomainConfig, Scene, IMAGE_SIZE, NUM_CLASSES};
pub use train::{
    adapt_student, adapt_student_with_replay, assign_targets, detection_loss, finetune_teacher,
    teacher_pseudo_labels, train_head, train_student, AdaptConfig, AdaptOutcome,
    FinetuneOutcome, TrainConfig,
};
