//! Staged, file-backed adaptation run. Every stage reads its inputs from and
//! writes its outputs to one output directory, so the CLI can run stages one
//! at a time and `e2e` is just all of them in order.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/      source_train, cache, source_test, <d>_target, <d>_test (.jsonl + images),
//!            manifest.json
//! captions/  kept.jsonl, rejected.jsonl, prompts.jsonl, manifest.json
//! models/    encoder.p2aw, student.json, teacher.json, teacher_<d>.json,
//!            student_<d>.json, oracle_<d>.json
//! styles/    <d>.json
//! pseudo/    <d>.jsonl, <d>_manifest.json
//! reports/   <d>_<variant>.json, summary.json, summary.txt
//! ```

use crate::artifacts::{
    read_stamped, read_student, read_teacher, write_predictions, write_stamped, write_student,
    write_teacher, Provenance,
};
use crate::captions::{run_captions, to_jsonl, CaptionBatch, CaptionRecord, FilterPolicy, PromptLine, SynonymTable};
use crate::dataset::{io_err, load_source, load_target, write_dataset, AccessKind, Audit};
use crate::detection::{
    adapt_student_with_replay, evaluate_map, finetune_teacher, gen_scenes, pseudo_label, teacher_detect,
    train_head, train_student, AdaptConfig, DetectionHead, Detections, DomainConfig, EvalReport,
    GroundTruthBox, SourceCache, StudentModel, TeacherInput, TrainConfig,
};
use crate::encoder::{encode_image_layer1, encode_text, fnv1a64, write_weights_file, EncoderWeights, PromptString};
use crate::error::{Error, Result};
use crate::steering::{steer, SteeringConfig, StyleSet};
use crate::tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Phases that make up deployment-time adaptation. Target truth must never
/// be read in these, and only the source cache may be read.
pub const ADAPTATION_PHASES: [&str; 4] = ["steer", "adapt-teacher", "pseudo-label", "adapt-student"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCounts {
    pub source_train: usize,
    pub target: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSettings {
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    /// mix the labelled cache scenes into student adaptation
    pub replay_cache: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder_seed: u64,
    /// caption corpus and synonym table, relative to the config file
    pub captions: PathBuf,
    pub synonyms: PathBuf,
    #[serde(default)]
    pub filter: FilterPolicy,
    pub source_domain: DomainConfig,
    pub domains: Vec<DomainConfig>,
    pub counts: SceneCounts,
    pub head_window: usize,
    pub student_pretrain: TrainConfig,
    pub teacher_pretrain: TrainConfig,
    pub steering: SteeringConfig,
    pub finetune: TrainConfig,
    pub adapt: AdaptSettings,
    pub oracle: TrainConfig,
    pub eval_conf_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            encoder_seed: 42,
            captions: "captions.jsonl".into(),
            synonyms: "synonyms.json".into(),
            filter: FilterPolicy::default(),
            source_domain: DomainConfig::clear(),
            domains: DomainConfig::shifted_presets(),
            counts: SceneCounts {
                source_train: 96,
                target: 32,
                test: 64,
            },
            head_window: 7,
            student_pretrain: TrainConfig { epochs: 25, lr: 1e-3 },
            teacher_pretrain: TrainConfig { epochs: 40, lr: 1e-3 },
            steering: SteeringConfig::default(),
            finetune: TrainConfig { epochs: 20, lr: 3e-5 },
            adapt: AdaptSettings {
                tau: 0.05,
                epochs: 5,
                lr: 1e-4,
                replay_cache: true,
            },
            oracle: TrainConfig { epochs: 10, lr: 1e-3 },
            eval_conf_floor: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.source_domain.validate()?;
        self.steering.validate()?;
        for t in [&self.student_pretrain, &self.teacher_pretrain, &self.finetune, &self.oracle] {
            t.validate()?;
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one target domain is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        names.insert(self.source_domain.name.as_str());
        for d in &self.domains {
            d.validate()?;
            let ok = !d.name.is_empty() && d.name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
            if !ok {
                return Err(Error::Config(format!("domain name {:?} must be [a-z0-9_]+", d.name)));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate domain name {:?}", d.name)));
            }
        }
        let c = &self.counts;
        if c.source_train == 0 || c.target == 0 || c.test == 0 {
            return Err(Error::Config("scene counts must be positive".into()));
        }
        if self.head_window % 2 == 0 {
            return Err(Error::Config("head_window must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.adapt.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.adapt.tau)));
        }
        if !(self.adapt.lr >= 0.0 && self.adapt.lr.is_finite()) {
            return Err(Error::Config("adapt lr must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.eval_conf_floor) {
            return Err(Error::Config("eval_conf_floor must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainConfig> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown target domain {name:?}")))
    }
}

/// Per-stage seed derived from the run seed and a stage tag.
pub fn stage_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv1a64(tag.as_bytes())
}

/// mAP of the three student variants on one domain's test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub name: String,
    pub prompt: String,
    pub pseudo_labels: usize,
    pub steer_loss_init: f64,
    pub steer_loss_final: f64,
    pub no_adapt: f64,
    pub adapted: f64,
    pub oracle: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub source_map50: f64,
    pub domains: Vec<DomainSummary>,
}

impl Summary {
    /// Fixed-width table; the JSON twin is the machine surface.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}{:>10}{:>8}", "domain", "no-adapt", "adapted", "oracle", "delta", "labels");
        let _ = writeln!(s, "{:<10}{:>10.4}{:>10}{:>10}{:>10}{:>8}", "source", self.source_map50, "-", "-", "-", "-");
        for d in &self.domains {
            let _ = writeln!(
                s,
                "{:<10}{:>10.4}{:>10.4}{:>10.4}{:>+10.4}{:>8}",
                d.name, d.no_adapt, d.adapted, d.oracle, d.delta, d.pseudo_labels
            );
        }
        s
    }
}

/// An output directory bound to one run config.
pub struct Workspace {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    prov: Provenance,
    audit: Audit,
    weights: EncoderWeights,
}

impl Workspace {
    /// `base` resolves the caption and synonym paths.
    pub fn new(cfg: RunConfig, base: &Path, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let prov = Provenance::new(cfg.seed, &cfg)?;
        let weights = EncoderWeights::from_seed(cfg.encoder_seed);
        Ok(Self {
            cfg,
            base: base.to_path_buf(),
            out: out.to_path_buf(),
            prov,
            audit: Audit::new(),
            weights,
        })
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn from_config_file(path: &Path, out: &Path, edit: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = RunConfig::from_json(&text)?;
        edit(&mut cfg);
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::new(cfg, &base, out)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn audit(&self) -> &Audit {
        &self.audit
    }

    pub fn provenance(&self) -> &Provenance {
        &self.prov
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn data(&self, name: &str) -> PathBuf {
        self.out.join("data").join(format!("{name}.jsonl"))
    }

    fn model(&self, name: &str) -> PathBuf {
        self.out.join("models").join(format!("{name}.json"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }

    fn styles_path(&self, domain: &str) -> PathBuf {
        self.out.join("styles").join(format!("{domain}.json"))
    }

    fn mkdir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn domain_names(&self, only: Option<&str>) -> Result<Vec<String>> {
        match only {
            Some(name) => Ok(vec![self.cfg.domain(name)?.name.clone()]),
            None => Ok(self.cfg.domains.iter().map(|d| d.name.clone()).collect()),
        }
    }

    /// Writes the source, cache and per-domain datasets plus the encoder seed file.
    pub fn gen_data(&self) -> Result<()> {
        self.audit.set_phase("gen-data");
        let dir = self.mkdir("data")?;
        let seed = self.cfg.seed;
        let c = &self.cfg.counts;
        let src = &self.cfg.source_domain;
        write_dataset(&dir, "source_train", &gen_scenes(src, c.source_train, stage_seed(seed, "source_train"))?)?;
        write_dataset(&dir, "cache", &gen_scenes(src, crate::detection::SOURCE_CACHE_SIZE, stage_seed(seed, "cache"))?)?;
        write_dataset(&dir, "source_test", &gen_scenes(src, c.test, stage_seed(seed, "source_test"))?)?;
        for d in &self.cfg.domains {
            let tag = &d.name;
            write_dataset(&dir, &format!("{tag}_target"), &gen_scenes(d, c.target, stage_seed(seed, &format!("{tag}/target")))?)?;
            write_dataset(&dir, &format!("{tag}_test"), &gen_scenes(d, c.test, stage_seed(seed, &format!("{tag}/test")))?)?;
        }
        let models = self.mkdir("models")?;
        write_weights_file(models.join("encoder.p2aw"), &self.weights)?;
        write_stamped(&dir.join("manifest.json"), &serde_json::json!({ "counts": c }), &self.prov)
    }

    /// Parses, normalises and filters the caption corpus.
    pub fn captions(&self) -> Result<CaptionBatch> {
        self.audit.set_phase("captions");
        let corpus_path = self.resolve(&self.cfg.captions);
        let table_path = self.resolve(&self.cfg.synonyms);
        let corpus = std::fs::read_to_string(&corpus_path).map_err(io_err(&corpus_path))?;
        let table_text = std::fs::read_to_string(&table_path).map_err(io_err(&table_path))?;
        let table = SynonymTable::from_json(&table_text)?;
        let batch = run_captions(&corpus, &table, &self.cfg.filter)?;
        let dir = self.mkdir("captions")?;
        let w = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(io_err(&p))
        };
        w("kept.jsonl", to_jsonl(&batch.kept)?)?;
        w("rejected.jsonl", to_jsonl(&batch.rejected)?)?;
        w("prompts.jsonl", to_jsonl(&batch.prompts)?)?;
        let manifest = serde_json::json!({
            "kept": batch.kept.len(),
            "rejected": batch.rejected.len(),
        });
        write_stamped(&dir.join("manifest.json"), &manifest, &self.prov)?;
        Ok(batch)
    }

    fn load_captions(&self) -> Result<CaptionBatch> {
        let dir = self.out.join("captions");
        fn lines<T: serde::de::DeserializeOwned>(p: &Path) -> Result<Vec<T>> {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| Error::Schema(format!("{}: {e}", p.display()))))
                .collect()
        }
        let kept: Vec<CaptionRecord> = lines(&dir.join("kept.jsonl"))?;
        let prompts: Vec<PromptLine> = lines(&dir.join("prompts.jsonl"))?;
        if kept.len() != prompts.len() {
            return Err(Error::Schema("kept records and prompts differ in length".into()));
        }
        Ok(CaptionBatch {
            kept,
            rejected: Vec::new(),
            prompts,
        })
    }

    /// Target prompt for a domain: the first kept caption naming it as weather.
    pub fn prompt_for(&self, domain: &str) -> Result<PromptString> {
        let batch = self.load_captions()?;
        let line = batch
            .prompt_for_weather(domain)
            .ok_or_else(|| Error::Schema(format!("no kept caption has weather {domain:?}")))?;
        PromptString::new(&line.prompt)
    }

    /// Source pre-training of the student and the teacher head. This runs
    /// before deployment and is the only stage reading the full source set.
    pub fn pretrain(&self) -> Result<()> {
        self.audit.set_phase("pretrain");
        let scenes = load_source(&self.data("source_train"), &self.audit)?;
        let seed = self.cfg.seed;
        let samples: Vec<(&Tensor, &[GroundTruthBox])> =
            scenes.iter().map(|s| (&s.image, s.truth.as_slice())).collect();
        let init = StudentModel::new(stage_seed(seed, "student/init"), self.cfg.head_window)?;
        let (student, _) = train_student(
            init,
            &samples,
            &self.cfg.student_pretrain,
            &mut SeededRng::new(stage_seed(seed, "student/order")),
        )?;
        let feats = scenes
            .iter()
            .map(|s| Ok((encode_image_layer1(&s.image, &self.weights)?, s.truth.clone())))
            .collect::<Result<Vec<_>>>()?;
        let head = DetectionHead::new(
            self.weights.layer1_channels(),
            self.cfg.head_window,
            &mut SeededRng::new(stage_seed(seed, "teacher/init")),
        )?;
        let (teacher, _) = train_head(
            &feats,
            head,
            &self.cfg.teacher_pretrain,
            &mut SeededRng::new(stage_seed(seed, "teacher/order")),
        )?;
        self.mkdir("models")?;
        write_student(&self.model("student"), &student, &self.prov)?;
        write_teacher(&self.model("teacher"), &teacher, &self.prov)
    }

    fn load_cache(&self) -> Result<SourceCache> {
        SourceCache::new(load_source(&self.data("cache"), &self.audit)?, &self.weights)
    }

    /// Steers the cached source statistics toward each domain's prompt.
    pub fn steer(&self, only: Option<&str>) -> Result<Vec<StyleSet>> {
        let names = self.domain_names(only)?;
        self.audit.set_phase("steer");
        let cache = self.load_cache()?;
        let mut out = Vec::new();
        for name in names {
            let trg = encode_text(&self.prompt_for(&name)?, &self.weights)?;
            let styles = steer(cache.all_features(), &trg, &self.cfg.steering, &self.weights)?;
            write_stamped(&self.styles_path(&name), &styles, &self.prov)?;
            out.push(styles);
        }
        Ok(out)
    }

    /// Fine-tunes the teacher head on cache features re-styled by each style set.
    pub fn adapt_teacher(&self, only: Option<&str>) -> Result<()> {
        let names = self.domain_names(only)?;
        self.audit.set_phase("adapt-teacher");
        let cache = self.load_cache()?;
        let teacher = read_teacher(&self.model("teacher"))?;
        for name in names {
            let styles: StyleSet = read_stamped(&self.styles_path(&name))?;
            let mut rng = SeededRng::new(stage_seed(self.cfg.seed, &format!("{name}/finetune")));
            let ft = finetune_teacher(&cache, &styles, &teacher, &self.cfg.finetune, &mut rng)?;
            write_teacher(&self.model(&format!("teacher_{name}")), &ft.head, &self.prov)?;
        }
        Ok(())
    }

    /// Writes the adapted teacher's pseudo-labels for each target stream.
    pub fn pseudo_label(&self, only: Option<&str>) -> Result<Vec<usize>> {
        let names = self.domain_names(only)?;
        self.audit.set_phase("pseudo-label");
        self.mkdir("pseudo")?;
        let mut counts = Vec::new();
        for name in names {
            let (images, _sealed) = load_target(&self.data(&format!("{name}_target")), &self.audit)?;
            let teacher = read_teacher(&self.model(&format!("teacher_{name}")))?;
            let labels = images
                .iter()
                .map(|img| {
                    let d = teacher_detect(TeacherInput::Image(img), &teacher, &self.weights, 0.0)?;
                    Ok(pseudo_label(&d, self.cfg.adapt.tau))
                })
                .collect::<Result<Vec<Detections>>>()?;
            let n: usize = labels.iter().map(Detections::len).sum();
            counts.push(n);
            let dir = self.out.join("pseudo");
            write_predictions(&dir.join(format!("{name}.jsonl")), &labels)?;
            let manifest = serde_json::json!({ "tau": self.cfg.adapt.tau, "labels": n, "images": labels.len() });
            write_stamped(&dir.join(format!("{name}_manifest.json")), &manifest, &self.prov)?;
        }
        Ok(counts)
    }

    /// Adapts a copy of the source student on each unlabelled target stream.
    pub fn adapt_student(&self, only: Option<&str>) -> Result<Vec<usize>> {
        let names = self.domain_names(only)?;
        self.audit.set_phase("adapt-student");
        let student = read_student(&self.model("student"))?;
        let cache = if self.cfg.adapt.replay_cache {
            Some(self.load_cache()?)
        } else {
            None
        };
        let mut counts = Vec::new();
        for name in names {
            let (images, _sealed) = load_target(&self.data(&format!("{name}_target")), &self.audit)?;
            let teacher = read_teacher(&self.model(&format!("teacher_{name}")))?;
            let a = &self.cfg.adapt;
            let cfg = AdaptConfig {
                tau: a.tau,
                epochs: a.epochs,
                lr: a.lr,
                seed: stage_seed(self.cfg.seed, &format!("{name}/adapt")),
            };
            let outcome = adapt_student_with_replay(&student, &images, &teacher, &self.weights, &cfg, cache.as_ref())?;
            counts.push(outcome.pseudo_labels.iter().map(Vec::len).sum());
            write_student(&self.model(&format!("student_{name}")), &outcome.student, &self.prov)?;
        }
        Ok(counts)
    }

    /// In-domain upper bound: the source student fine-tuned on target truth.
    /// Not part of adaptation; it exists only for the report.
    pub fn oracle(&self, only: Option<&str>) -> Result<()> {
        let names = self.domain_names(only)?;
        self.audit.set_phase("oracle");
        let student = read_student(&self.model("student"))?;
        for name in names {
            let (images, vault) = load_target(&self.data(&format!("{name}_target")), &self.audit)?;
            let truth = vault.reveal();
            let samples: Vec<(&Tensor, &[GroundTruthBox])> =
                images.iter().zip(truth).map(|(i, t)| (i, t.as_slice())).collect();
            let mut rng = SeededRng::new(stage_seed(self.cfg.seed, &format!("{name}/oracle")));
            let (oracle, _) = train_student(student.clone(), &samples, &self.cfg.oracle, &mut rng)?;
            write_student(&self.model(&format!("oracle_{name}")), &oracle, &self.prov)?;
        }
        Ok(())
    }

    fn eval_student(&self, model: &str, dataset: &str, report: &str) -> Result<f64> {
        let student = read_student(&self.model(model))?;
        let (images, vault) = load_target(&self.data(dataset), &self.audit)?;
        let preds = images
            .iter()
            .map(|img| student.detect(img, self.cfg.eval_conf_floor))
            .collect::<Result<Vec<_>>>()?;
        let rep: EvalReport = evaluate_map(&preds, vault.reveal(), 0.5)?;
        write_stamped(&self.report_path(&format!("{report}.json")), &rep, &self.prov)?;
        Ok(rep.map50)
    }

    /// Evaluates the source student on the source test split and every
    /// student variant on each domain's test split.
    pub fn eval(&self, only: Option<&str>) -> Result<Summary> {
        let names = self.domain_names(only)?;
        self.audit.set_phase("eval");
        let source_map50 = self.eval_student("student", "source_test", "source_no_adapt")?;
        let mut domains = Vec::new();
        for name in names {
            let test = format!("{name}_test");
            let no_adapt = self.eval_student("student", &test, &format!("{name}_no_adapt"))?;
            let adapted = self.eval_student(&format!("student_{name}"), &test, &format!("{name}_adapted"))?;
            let oracle = self.eval_student(&format!("oracle_{name}"), &test, &format!("{name}_oracle"))?;
            let styles: StyleSet = read_stamped(&self.styles_path(&name))?;
            let n = styles.len().max(1) as f64;
            let pseudo = crate::artifacts::read_predictions(&self.out.join("pseudo").join(format!("{name}.jsonl")))?;
            domains.push(DomainSummary {
                prompt: self.prompt_for(&name)?.as_str().to_string(),
                pseudo_labels: pseudo.iter().map(Detections::len).sum(),
                steer_loss_init: styles.entries.iter().map(|e| e.loss_init).sum::<f64>() / n,
                steer_loss_final: styles.entries.iter().map(|e| e.loss_final).sum::<f64>() / n,
                no_adapt,
                adapted,
                oracle,
                delta: adapted - no_adapt,
                name,
            });
        }
        Ok(Summary {
            source_map50,
            domains,
        })
    }

    /// Full pipeline; writes `reports/summary.{txt,json}` and returns the summary.
    pub fn e2e(&self) -> Result<Summary> {
        let frozen = self.weights.fingerprint();
        self.gen_data()?;
        self.captions()?;
        self.pretrain()?;
        self.steer(None)?;
        self.adapt_teacher(None)?;
        self.pseudo_label(None)?;
        self.adapt_student(None)?;
        self.oracle(None)?;
        let summary = self.eval(None)?;
        if self.weights.fingerprint() != frozen {
            return Err(Error::Audit("encoder weights changed during the run".into()));
        }
        self.write_summary(&summary)?;
        Ok(summary)
    }

    pub fn write_summary(&self, summary: &Summary) -> Result<()> {
        write_stamped(&self.report_path("summary.json"), summary, &self.prov)?;
        let p = self.report_path("summary.txt");
        let text = format!(
            "seed {}  config {}  version {}\n{}",
            self.prov.seed,
            &self.prov.config_hash[..16],
            self.prov.tool_version,
            summary.table()
        );
        std::fs::write(&p, text).map_err(io_err(&p))
    }

    /// Checks the deployment-time access rules: no target truth during
    /// adaptation, and no source imagery other than the five cache images.
    pub fn check_audit(&self) -> Result<()> {
        let cache_dir = self.out.join("data").join("cache");
        let mut cache_files = std::collections::BTreeSet::new();
        for e in self.audit.events() {
            if !ADAPTATION_PHASES.contains(&e.phase.as_str()) {
                continue;
            }
            match e.kind {
                AccessKind::TargetTruth => {
                    return Err(Error::Audit(format!("target truth read during {}: {}", e.phase, e.path)))
                }
                AccessKind::SourceImage => {
                    if !Path::new(&e.path).starts_with(&cache_dir) {
                        return Err(Error::Audit(format!("non-cache source image read during {}: {}", e.phase, e.path)));
                    }
                    cache_files.insert(e.path.clone());
                }
                _ => {}
            }
        }
        if cache_files.len() > crate::detection::SOURCE_CACHE_SIZE {
            return Err(Error::Audit(format!("{} distinct cache images read", cache_files.len())));
        }
        Ok(())
    }
}
