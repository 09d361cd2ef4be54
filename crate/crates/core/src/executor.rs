//! The observe / decide / approach / pick loop.

use std::time::Duration;

use nalgebra::{Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{segment, ClusteringConfig};
use crate::projection::{build_candidates, candidate_digest, RigidTransform, SuctionCandidate};
use crate::prompting::{assemble_prompt, render_markers, MarkerStyle, PromptOverrides};
use crate::rgbd::{deproject, Aabb, CameraIntrinsics, ColorFrame, DepthFrame, PixelMask, PointCloud};
use crate::vlm::{build_decider, Decider, DeciderConfig, Decision, Query, VlmError};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment fault: {0}")]
    Fault(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Decider(#[from] VlmError),
    #[error("invalid executor config: {0}")]
    Config(String),
    #[error("observation {frame_id} is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    Observation {
        frame_id: u64,
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
}

/// Tool tip position and unit approach axis in the robot frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub position: Vec3,
    pub approach_axis: Vec3,
}

impl RobotPose {
    pub fn validate(&self) -> Result<(), EnvError> {
        let ok = self.position.iter().all(|c| c.is_finite())
            && (self.approach_axis.norm() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidPose(format!("{self:?}")))
        }
    }
}

/// Tool frame to robot frame. Tool z is the approach axis and tool x is
/// horizontal, so a camera mounted without rotation sees +y as image down.
pub fn tool_frame(pose: &RobotPose) -> RigidTransform {
    let z = pose.approach_axis.normalize();
    let mut x = z.cross(&Vec3::z());
    if x.norm() < 1e-6 {
        x = z.cross(&Vec3::y());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    RigidTransform::from_axes(x, y, z, pose.position).expect("orthonormal by construction")
}

pub struct Observation {
    /// Strictly increasing per environment.
    pub frame_id: u64,
    pub color: ColorFrame,
    pub depth: DepthFrame,
    pub pose: RobotPose,
}

pub trait Environment {
    fn observe(&mut self) -> Result<Observation, EnvError>;
    fn move_to(&mut self, pose: &RobotPose) -> Result<(), EnvError>;
    fn set_vacuum(&mut self, on: bool) -> Result<(), EnvError>;
    fn vacuum_sealed(&mut self) -> Result<bool, EnvError>;
    fn intrinsics(&self) -> &CameraIntrinsics;
    /// Camera frame to tool frame.
    fn hand_eye(&self) -> RigidTransform;
    /// Image region of the object named in `directive`, if the environment
    /// can ground it. Refers to the latest observation.
    fn target_mask(&self, _directive: &str) -> Option<PixelMask> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub max_action_iterations: u32,
    pub approach_step: f64,
    pub contact_distance: f64,
    pub lift_height: f64,
    /// Refusals tolerated (each followed by a reset and a fresh look)
    /// before giving up with `TargetNotFound`.
    pub refusal_retries: u32,
    pub seal_delay_ms: u64,
    /// Robot-frame crop applied before clustering.
    pub workspace: Option<Aabb>,
    pub decider: DeciderConfig,
    pub clustering: ClusteringConfig,
    pub prompts: PromptOverrides,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_action_iterations: 10,
            approach_step: 0.05,
            contact_distance: 0.01,
            lift_height: 0.05,
            refusal_retries: 2,
            seal_delay_ms: 0,
            workspace: None,
            decider: DeciderConfig::default(),
            clustering: ClusteringConfig::default(),
            prompts: PromptOverrides::default(),
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        let bad = |m: &str| Err(ExecError::Config(m.into()));
        if self.max_action_iterations < 1 {
            return bad("max_action_iterations must be >= 1");
        }
        if !(self.approach_step > 0.0) {
            return bad("approach_step must be positive");
        }
        let reach = self.approach_step * self.max_action_iterations as f64;
        if !(self.contact_distance > 0.0 && self.contact_distance < reach) {
            return bad("contact_distance must be in (0, approach_step * max_action_iterations)");
        }
        if !(self.lift_height >= 0.0) {
            return bad("lift_height must be non-negative");
        }
        if let Some(w) = &self.workspace {
            w.validate().map_err(|e| ExecError::Config(e.to_string()))?;
        }
        self.clustering
            .validate()
            .map_err(|e| ExecError::Config(e.to_string()))?;
        self.decider.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    TargetNotFound,
    IterationLimit,
    SuctionFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Reset {
        reason: String,
    },
    Approach {
        label: u32,
        step: f64,
        remaining: f64,
    },
    Pickup {
        label: u32,
        outcome: Outcome,
    },
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub frame_id: u64,
    pub pose: RobotPose,
    pub candidate_count: usize,
    pub candidate_digest: String,
    pub decision: Option<Decision>,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickResult {
    pub outcome: Outcome,
    pub iterations_used: u32,
    /// Every commanded pose, starting with the initial one.
    pub trajectory: Vec<RobotPose>,
    pub selected_candidate: Option<SuctionCandidate>,
    pub decision_log: Vec<Decision>,
    pub iterations: Vec<IterationRecord>,
}

impl PickResult {
    pub fn episode_log_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.iterations {
            s.push_str(&serde_json::to_string(r).expect("log records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn final_pose(&self) -> Option<&RobotPose> {
        self.trajectory.last()
    }
}

fn rotate_toward(a: &Vec3, b: &Vec3, frac: f64) -> Vec3 {
    if frac >= 1.0 {
        return *b;
    }
    let q = UnitQuaternion::rotation_between(a, b).unwrap_or_else(|| {
        let mut perp = a.cross(&Vec3::x());
        if perp.norm() < 1e-6 {
            perp = a.cross(&Vec3::y());
        }
        UnitQuaternion::from_axis_angle(&Unit::new_normalize(perp), std::f64::consts::PI)
    });
    (q.powf(frac) * a).normalize()
}

/// Moves at most `step` along the straight line to `target_point` and turns
/// the approach axis toward `-target_normal`, proportionally to distance
/// covered, so that it is aligned once the remaining distance is within two
/// steps.
pub fn approach_step(current: &RobotPose, target_point: &Vec3, target_normal: &Vec3, step: f64) -> RobotPose {
    let delta = target_point - current.position;
    let dist = delta.norm();
    if dist < 1e-12 {
        return *current;
    }
    let adv = step.min(dist);
    let position = if adv == dist {
        *target_point
    } else {
        current.position + delta * (adv / dist)
    };
    let remaining = dist - adv;
    let desired = -target_normal.normalize();
    let frac = if remaining <= 2.0 * step {
        1.0
    } else {
        adv / (dist - 2.0 * step)
    };
    RobotPose {
        position,
        approach_axis: rotate_toward(&current.approach_axis, &desired, frac),
    }
}

fn with_vacuum_off<T>(env: &mut dyn Environment, r: Result<T, ExecError>) -> Result<T, ExecError> {
    if r.is_err() {
        let _ = env.set_vacuum(false);
    }
    r
}

/// Advance to the candidate, check the seal, retract along the approach
/// axis and check again. The vacuum stays on only after a success.
pub fn pickup_sequence(
    env: &mut dyn Environment,
    candidate: &SuctionCandidate,
    pose: &RobotPose,
    cfg: &ExecutorConfig,
    trajectory: &mut Vec<RobotPose>,
) -> Result<Outcome, ExecError> {
    let r = (|| {
        env.set_vacuum(true)?;
        let contact = RobotPose {
            position: candidate.point_robot,
            approach_axis: pose.approach_axis,
        };
        env.move_to(&contact)?;
        trajectory.push(contact);
        if cfg.seal_delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.seal_delay_ms));
        }
        if !env.vacuum_sealed()? {
            env.set_vacuum(false)?;
            return Ok(Outcome::SuctionFailed);
        }
        let lifted = RobotPose {
            position: contact.position - contact.approach_axis * cfg.lift_height,
            approach_axis: contact.approach_axis,
        };
        env.move_to(&lifted)?;
        trajectory.push(lifted);
        if env.vacuum_sealed()? {
            Ok(Outcome::Success)
        } else {
            env.set_vacuum(false)?;
            Ok(Outcome::SuctionFailed)
        }
    })();
    with_vacuum_off(env, r)
}

/// Camera-frame points whose robot-frame position lies in `bounds`.
fn crop_in_robot_frame(cloud: &PointCloud, xf: &RigidTransform, bounds: &Aabb) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.points.len())
        .filter(|&i| bounds.contains(&xf.apply_point(&cloud.points[i])))
        .collect();
    PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        pixels: cloud
            .pixels
            .as_ref()
            .map(|px| keep.iter().map(|&i| px[i]).collect()),
    }
}

/// Runs one episode with the decider described by `cfg.decider`.
pub fn run_pick_loop(env: &mut dyn Environment, directive: &str, cfg: &ExecutorConfig) -> Result<PickResult, ExecError> {
    cfg.validate()?;
    let mut decider = build_decider(&cfg.decider)?;
    run_pick_loop_with(env, directive, cfg, decider.as_mut())
}

pub fn run_pick_loop_with(
    env: &mut dyn Environment,
    directive: &str,
    cfg: &ExecutorConfig,
    decider: &mut dyn Decider,
) -> Result<PickResult, ExecError> {
    cfg.validate()?;
    let r = pick_loop(env, directive, cfg, decider);
    with_vacuum_off(env, r)
}

fn pick_loop(
    env: &mut dyn Environment,
    directive: &str,
    cfg: &ExecutorConfig,
    decider: &mut dyn Decider,
) -> Result<PickResult, ExecError> {
    let prompt = assemble_prompt(directive, &cfg.prompts).map_err(|e| ExecError::Config(e.to_string()))?;
    let intr = *env.intrinsics();
    let hand_eye = env.hand_eye();
    let style = MarkerStyle::for_width(intr.width);

    let mut result = PickResult {
        outcome: Outcome::IterationLimit,
        iterations_used: 0,
        trajectory: Vec::new(),
        selected_candidate: None,
        decision_log: Vec::new(),
        iterations: Vec::new(),
    };
    let mut initial: Option<RobotPose> = None;
    let mut refusals = 0;

    for it in 0..cfg.max_action_iterations {
        result.iterations_used = it + 1;
        let obs = env.observe()?;
        if obs.depth.width != intr.width
            || obs.depth.height != intr.height
            || obs.color.width != intr.width
            || obs.color.height != intr.height
        {
            return Err(ExecError::Observation {
                frame_id: obs.frame_id,
                expected_w: intr.width,
                expected_h: intr.height,
                found_w: obs.depth.width,
                found_h: obs.depth.height,
            });
        }
        let start = *initial.get_or_insert(obs.pose);
        if result.trajectory.is_empty() {
            result.trajectory.push(start);
        }

        let cam_to_robot = tool_frame(&obs.pose).compose(&hand_eye);
        let cloud = deproject(&obs.depth, &intr).map_err(|e| ExecError::Config(e.to_string()))?;
        let cloud = match &cfg.workspace {
            Some(b) => crop_in_robot_frame(&cloud, &cam_to_robot, b),
            None => cloud,
        };
        let clustering = ClusteringConfig {
            rng_seed: cfg.clustering.rng_seed.wrapping_add(it as u64),
            ..cfg.clustering.clone()
        };
        let candidates = match segment(&cloud, &clustering) {
            Ok(clusters) => build_candidates(&clusters, &intr, &cam_to_robot),
            Err(_) => Vec::new(),
        };
        let digest = candidate_digest(&candidates);

        let decision = if candidates.is_empty() {
            None
        } else {
            let image = render_markers(&obs.color, &candidates, &style);
            let mask = env.target_mask(directive);
            let q = Query {
                image: &image,
                prompt: &prompt,
                candidates: &candidates,
                cloud: &cloud,
                target_mask: mask.as_ref(),
            };
            let d = decider.decide(&q)?;
            result.decision_log.push(d.clone());
            Some(d)
        };

        let chosen = decision
            .as_ref()
            .and_then(Decision::head)
            .and_then(|l| candidates.iter().find(|c| c.label == l));
        let Some(cand) = chosen else {
            refusals += 1;
            env.move_to(&start)?;
            result.trajectory.push(start);
            let reason = match &decision {
                Some(Decision::Refused(r)) => r.reason.clone(),
                _ => "no candidates".into(),
            };
            result.iterations.push(IterationRecord {
                iteration: it,
                frame_id: obs.frame_id,
                pose: obs.pose,
                candidate_count: candidates.len(),
                candidate_digest: digest,
                decision,
                action: Action::Reset { reason },
            });
            if refusals > cfg.refusal_retries {
                result.outcome = Outcome::TargetNotFound;
                return Ok(result);
            }
            continue;
        };

        let next = approach_step(&obs.pose, &cand.point_robot, &cand.normal_robot, cfg.approach_step);
        env.move_to(&next)?;
        result.trajectory.push(next);
        let remaining = (next.position - cand.point_robot).norm();
        result.selected_candidate = Some(cand.clone());

        if remaining <= cfg.contact_distance {
            let outcome = pickup_sequence(env, cand, &next, cfg, &mut result.trajectory)?;
            result.iterations.push(IterationRecord {
                iteration: it,
                frame_id: obs.frame_id,
                pose: obs.pose,
                candidate_count: candidates.len(),
                candidate_digest: digest,
                decision,
                action: Action::Pickup {
                    label: cand.label,
                    outcome,
                },
            });
            result.outcome = outcome;
            return Ok(result);
        }
        result.iterations.push(IterationRecord {
            iteration: it,
            frame_id: obs.frame_id,
            pose: obs.pose,
            candidate_count: candidates.len(),
            candidate_digest: digest,
            decision,
            action: Action::Approach {
                label: cand.label,
                step: (next.position - obs.pose.position).norm(),
                remaining,
            },
        });
    }
    Ok(result)
}
