//! Selection-accuracy and pick-success bookkeeping, plus the post-decision
//! marker visualization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{run_pick_loop, ExecutorConfig, Outcome};
use crate::pipeline::{propose, PipelineError, ProposalConfig};
use crate::projection::{candidate_digest, SuctionCandidate};
use crate::prompting::{assemble_prompt, render_marker_list, AnnotatedImage, Marker, MarkerStyle, PromptOverrides};
use crate::rgbd::{load_color, load_depth, CameraIntrinsics, ColorFrame, PixelMask, PointCloud};
use crate::sim::{closest_surface, generate_scene, FailureMode, SceneSpec, SimEnv, SimError, SuctionModel};
use crate::vlm::{Decider, Decision, Query};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("{path}: {message}")]
    Manifest { path: String, message: String },
    #[error("scene {scene_id}: {source}")]
    Scene {
        scene_id: String,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

/// How a decision is judged against the acceptable label set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    /// The first selected label must be acceptable.
    #[default]
    HeadOfList,
    /// Any selected label being acceptable is enough.
    AnyIntersection,
}

impl ScoringRule {
    pub fn judge(&self, decision: &Decision, acceptable: &BTreeSet<u32>) -> bool {
        match self {
            ScoringRule::HeadOfList => decision.head().is_some_and(|h| acceptable.contains(&h)),
            ScoringRule::AnyIntersection => decision
                .selected_labels()
                .iter()
                .any(|l| acceptable.contains(l)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub category: String,
    pub candidate_digest: String,
    pub acceptable_labels: BTreeSet<u32>,
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub format_error: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub format_errors: usize,
    /// Accuracy with format errors removed from the denominator.
    pub accuracy_excluding_format_errors: f64,
    pub categories: BTreeMap<String, CategoryStats>,
}

/// Percentage with one decimal, e.g. `0.754386` -> `75.4%`.
pub fn format_percent(ratio: f64) -> String {
    format!("{:.1}%", 100.0 * ratio)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Aggregates `(category, correct, format_error)` rows.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a str, bool, bool)>) -> Result<Self, EvalError> {
        let mut total = 0;
        let mut correct = 0;
        let mut format_errors = 0;
        let mut cats: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (cat, ok, fmt) in rows {
            total += 1;
            correct += ok as usize;
            format_errors += fmt as usize;
            let e = cats.entry(cat.to_string()).or_default();
            e.0 += 1;
            e.1 += ok as usize;
        }
        if total == 0 {
            return Err(EvalError::Empty);
        }
        Ok(Self {
            total,
            correct,
            accuracy: ratio(correct, total),
            format_errors,
            accuracy_excluding_format_errors: ratio(correct, total - format_errors),
            categories: cats
                .into_iter()
                .map(|(k, (t, c))| {
                    (
                        k,
                        CategoryStats {
                            total: t,
                            correct: c,
                            accuracy: ratio(c, t),
                        },
                    )
                })
                .collect(),
        })
    }

    pub fn from_records(records: &[EvalRecord]) -> Result<Self, EvalError> {
        Self::from_rows(records.iter().map(|r| (r.category.as_str(), r.correct, r.format_error)))
    }

    pub fn from_pick_records(records: &[PickRecord]) -> Result<Self, EvalError> {
        Self::from_rows(
            records
                .iter()
                .map(|r| (r.category.as_str(), r.outcome == Some(Outcome::Success), false)),
        )
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>9} {:>8}", "group", "correct", "rate");
        let _ = writeln!(
            s,
            "{:<28} {:>9} {:>8}",
            "overall",
            format!("{}/{}", self.correct, self.total),
            format_percent(self.accuracy)
        );
        let _ = writeln!(
            s,
            "{:<28} {:>9} {:>8}",
            "excluding format errors",
            format!("{}/{}", self.correct, self.total - self.format_errors),
            format_percent(self.accuracy_excluding_format_errors)
        );
        for (k, c) in &self.categories {
            let _ = writeln!(
                s,
                "{:<28} {:>9} {:>8}",
                k,
                format!("{}/{}", c.correct, c.total),
                format_percent(c.accuracy)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// One line of a selection dataset manifest. Paths are relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub color_path: PathBuf,
    pub depth_path: PathBuf,
    pub intrinsics_path: PathBuf,
    pub acceptable_labels: BTreeSet<u32>,
    pub directive: String,
    pub category: String,
    /// Optional PNG whose non-zero pixels mark the requested item.
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
}

fn manifest_err(path: &Path, message: impl ToString) -> EvalError {
    EvalError::Manifest {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| manifest_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| manifest_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn load_mask(path: &Path) -> Result<PixelMask, EvalError> {
    let img = image::open(path).map_err(|e| manifest_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(PixelMask {
        width: w,
        height: h,
        data: img.pixels().map(|p| p.0[0] != 0).collect(),
    })
}

/// A scene ready for a decider: candidates already proposed.
#[derive(Debug, Clone)]
pub struct SelectionScene {
    pub scene_id: String,
    pub category: String,
    pub directive: String,
    pub acceptable_labels: BTreeSet<u32>,
    pub color: ColorFrame,
    pub cloud: PointCloud,
    pub candidates: Vec<SuctionCandidate>,
    pub target_mask: Option<PixelMask>,
}

impl SelectionScene {
    pub fn load(entry: &ManifestEntry, base: &Path, cfg: &ProposalConfig) -> Result<Self, EvalError> {
        let p = |rel: &Path| base.join(rel);
        let scene_err = |source: PipelineError| EvalError::Scene {
            scene_id: entry.scene_id.clone(),
            source,
        };
        let intr = CameraIntrinsics::load(&p(&entry.intrinsics_path)).map_err(|e| scene_err(e.into()))?;
        let color = load_color(&p(&entry.color_path)).map_err(|e| scene_err(e.into()))?;
        let depth = load_depth(&p(&entry.depth_path), &intr).map_err(|e| scene_err(e.into()))?;
        let prop = propose(&color, &depth, &intr, cfg).map_err(scene_err)?;
        let target_mask = match &entry.mask_path {
            Some(m) => Some(load_mask(&p(m))?),
            None => None,
        };
        Ok(Self {
            scene_id: entry.scene_id.clone(),
            category: entry.category.clone(),
            directive: entry.directive.clone(),
            acceptable_labels: entry.acceptable_labels.clone(),
            color,
            cloud: prop.cloud,
            candidates: prop.candidates,
            target_mask,
        })
    }
}

/// Runs the decider on every scene and aggregates in scene-id order.
/// Decider errors count as incorrect; schema violations are flagged so the
/// report can leave them out of the second accuracy figure.
pub fn evaluate_selection(
    dataset: &[SelectionScene],
    decider: &mut dyn Decider,
    rule: ScoringRule,
    prompts: &PromptOverrides,
) -> Result<(Vec<EvalRecord>, EvalReport), EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<&SelectionScene> = dataset.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let mut records = Vec::with_capacity(order.len());
    for s in order {
        let prompt = assemble_prompt(&s.directive, prompts).map_err(|e| EvalError::Config(e.to_string()))?;
        let image = crate::prompting::render_markers(&s.color, &s.candidates, &MarkerStyle::for_width(s.color.width));
        let q = Query {
            image: &image,
            prompt: &prompt,
            candidates: &s.candidates,
            cloud: &s.cloud,
            target_mask: s.target_mask.as_ref(),
        };
        let (decision, error, format_error) = match decider.decide(&q) {
            Ok(d) => (Some(d), None, false),
            Err(e) => (None, Some(e.to_string()), e.is_format_error()),
        };
        let correct = decision
            .as_ref()
            .is_some_and(|d| rule.judge(d, &s.acceptable_labels));
        records.push(EvalRecord {
            scene_id: s.scene_id.clone(),
            category: s.category.clone(),
            candidate_digest: candidate_digest(&s.candidates),
            acceptable_labels: s.acceptable_labels.clone(),
            decision,
            error,
            format_error,
            correct,
        });
    }
    let report = EvalReport::from_records(&records)?;
    Ok((records, report))
}

pub fn records_to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| manifest_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| manifest_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickRecord {
    pub episode_id: String,
    pub spec_index: usize,
    pub seed: u64,
    /// Kind of the requested object, `box` or `bag`.
    pub category: String,
    pub target: String,
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub iterations_used: u32,
    #[serde(default)]
    pub failure_mode: Option<FailureMode>,
    /// Angle between the final approach axis and the contacted face's
    /// anti-normal, degrees.
    #[serde(default)]
    pub axis_error_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PickingPlan {
    pub episodes_per_spec: usize,
    pub base_seed: u64,
    pub model: SuctionModel,
}

impl Default for PickingPlan {
    fn default() -> Self {
        Self {
            episodes_per_spec: 10,
            base_seed: 0,
            model: SuctionModel::default(),
        }
    }
}

fn run_episode(spec_index: usize, spec: &SceneSpec, seed: u64, cfg: &ExecutorConfig, model: &SuctionModel) -> Result<PickRecord, EvalError> {
    let scene = generate_scene(spec, seed)?;
    if scene.objects.is_empty() {
        return Err(EvalError::Config(format!("scene spec {spec_index} has no objects")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = scene.objects[rng.random_range(0..scene.objects.len())].clone();
    let directive = format!("Pick up the {}", target.name);
    let mut cfg = cfg.clone();
    if cfg.workspace.is_none() {
        cfg.workspace = Some(scene.workspace());
    }
    cfg.clustering.rng_seed = cfg.clustering.rng_seed.wrapping_add(seed.wrapping_mul(1000));
    let mut env = SimEnv::new(scene, *model, seed);
    let res = run_pick_loop(&mut env, &directive, &cfg);
    let mut rec = PickRecord {
        episode_id: format!("{spec_index:03}-{seed}"),
        spec_index,
        seed,
        category: target.kind.as_str().to_string(),
        target: target.name.clone(),
        outcome: None,
        error: None,
        iterations_used: 0,
        failure_mode: env.last_attempt().and_then(|a| a.failure_mode),
        axis_error_deg: None,
    };
    match res {
        Ok(r) => {
            rec.outcome = Some(r.outcome);
            rec.iterations_used = r.iterations_used;
            if let (Some(c), Some(pose)) = (&r.selected_candidate, r.final_pose()) {
                if let Some(contact) = closest_surface(env.scene(), &c.point_robot) {
                    let obj = &env.scene().objects[contact.object as usize - 1];
                    let anti = -obj.face_normal(contact.face);
                    let cos = pose.approach_axis.dot(&anti).clamp(-1.0, 1.0);
                    if r.outcome == Outcome::Success || r.outcome == Outcome::SuctionFailed {
                        rec.axis_error_deg = Some(cos.acos().to_degrees());
                    }
                }
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    Ok(rec)
}

/// Runs `plan.episodes_per_spec` seeded episodes per spec in parallel. The
/// record order (spec, then episode) does not depend on scheduling.
pub fn evaluate_picking(
    specs: &[SceneSpec],
    plan: &PickingPlan,
    cfg: &ExecutorConfig,
) -> Result<(Vec<PickRecord>, EvalReport), EvalError> {
    cfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|i| {
            (0..plan.episodes_per_spec).map(move |e| (i, plan.base_seed.wrapping_add((i * plan.episodes_per_spec + e) as u64)))
        })
        .collect();
    if jobs.is_empty() {
        return Err(EvalError::Empty);
    }
    let records = jobs
        .par_iter()
        .map(|&(i, seed)| run_episode(i, &specs[i], seed, cfg, &plan.model))
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::from_pick_records(&records)?;
    Ok((records, report))
}

pub const CANDIDATE_YELLOW: [u8; 3] = [255, 215, 0];
pub const BETTER_GREEN: [u8; 3] = [40, 200, 60];
pub const BEST_RED: [u8; 3] = [230, 30, 30];

/// Candidates in yellow, non-head selections in green, the head in red.
pub fn visualize_decision(
    image: &ColorFrame,
    candidates: &[SuctionCandidate],
    decision: &Decision,
    style: &MarkerStyle,
) -> AnnotatedImage {
    let sel = decision.selected_labels();
    let markers: Vec<Marker> = candidates
        .iter()
        .map(|c| Marker {
            label: c.label,
            pixel: c.pixel,
            fill: match sel.iter().position(|&l| l == c.label) {
                Some(0) => BEST_RED,
                Some(_) => BETTER_GREEN,
                None => CANDIDATE_YELLOW,
            },
        })
        .collect();
    render_marker_list(image, &markers, style)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::PixelPoint;
    use crate::vlm::{Refusal, VlmDecision};
    use crate::Vec3;

    fn selected(labels: &[u32]) -> Decision {
        Decision::Selected(VlmDecision {
            selected_labels: labels.to_vec(),
            detected_items: vec![],
            rationale: String::new(),
            raw_response: String::new(),
        })
    }

    fn rows(n_ok: usize, n: usize) -> Vec<(&'static str, bool, bool)> {
        (0..n).map(|i| ("all", i < n_ok, false)).collect()
    }

    #[test]
    fn percent_formatting() {
        let r = EvalReport::from_rows(rows(86, 114)).unwrap();
        assert_eq!(format_percent(r.accuracy), "75.4%");
        let r = EvalReport::from_rows(rows(73, 114)).unwrap();
        assert_eq!(format_percent(r.accuracy), "64.0%");
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(EvalReport::from_rows(rows(0, 0)), Err(EvalError::Empty)));
    }

    #[test]
    fn format_errors_leave_the_second_denominator() {
        let r = EvalReport::from_rows(vec![("a", true, false), ("a", false, true), ("b", false, false)]).unwrap();
        assert_eq!(r.total, 3);
        assert_eq!(format_percent(r.accuracy), "33.3%");
        assert_eq!(format_percent(r.accuracy_excluding_format_errors), "50.0%");
        assert_eq!(r.categories["a"].total + r.categories["b"].total, 3);
    }

    #[test]
    fn scoring_rules() {
        let ok: BTreeSet<u32> = [7].into();
        assert!(!ScoringRule::HeadOfList.judge(&selected(&[3, 7]), &ok));
        assert!(ScoringRule::AnyIntersection.judge(&selected(&[3, 7]), &ok));
        let refusal = Decision::Refused(Refusal { reason: "x".into() });
        assert!(!ScoringRule::AnyIntersection.judge(&refusal, &ok));
    }

    fn cands(n: u32) -> Vec<SuctionCandidate> {
        (1..=n)
            .map(|l| SuctionCandidate {
                label: l,
                point_camera: Vec3::new(0.0, 0.0, 1.0),
                normal_camera: -Vec3::z(),
                pixel: PixelPoint {
                    u: 20.0 * l as f64,
                    v: 20.0,
                },
                point_robot: Vec3::zeros(),
                normal_robot: Vec3::z(),
                scores: None,
            })
            .collect()
    }

    fn fill_at(img: &AnnotatedImage, label: u32) -> [u8; 3] {
        let e = img.legend.iter().find(|e| e.label == label).unwrap();
        // A point inside the disc but away from the digit strokes.
        img.pixels.pixel(e.center[0] as u32, (e.center[1] - 5) as u32)
    }

    #[test]
    fn visualization_colors() {
        let base = ColorFrame::filled(200, 40, [0, 0, 0]);
        let style = MarkerStyle::compact();
        let c = cands(8);
        let v = visualize_decision(&base, &c, &selected(&[3, 7, 1]), &style);
        assert_eq!(fill_at(&v, 3), BEST_RED);
        assert_eq!(fill_at(&v, 7), BETTER_GREEN);
        assert_eq!(fill_at(&v, 1), BETTER_GREEN);
        assert_eq!(fill_at(&v, 5), CANDIDATE_YELLOW);

        let v = visualize_decision(&base, &c, &selected(&[2]), &style);
        assert_eq!(fill_at(&v, 2), BEST_RED);
        assert!((1..=8).filter(|&l| l != 2).all(|l| fill_at(&v, l) == CANDIDATE_YELLOW));

        let v = visualize_decision(&base, &c, &Decision::Refused(Refusal { reason: "none".into() }), &style);
        assert!((1..=8).all(|l| fill_at(&v, l) == CANDIDATE_YELLOW));
    }
}
