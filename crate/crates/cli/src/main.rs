//! `suction`: propose candidates, run simulated picks, evaluate deciders.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 no candidates,
//! 3 target not found, 4 iteration limit, 5 suction failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use suction_core::eval::{
    evaluate_picking, evaluate_selection, load_manifest, records_to_jsonl, visualize_decision, PickingPlan,
    ScoringRule, SelectionScene,
};
use suction_core::executor::{run_pick_loop, ExecutorConfig, Outcome, RobotPose};
use suction_core::pipeline::{propose, ProposalConfig};
use suction_core::projection::{RigidTransform, SuctionCandidate};
use suction_core::prompting::MarkerStyle;
use suction_core::rgbd::{load_color, load_depth, Aabb, CameraIntrinsics};
use suction_core::sim::{generate_scene, render_depth, ObjectKind, SceneSpec, SimEnv, SuctionModel};
use suction_core::vlm::{build_decider, Backend};

const EXIT_CONFIG: u8 = 1;
const EXIT_NO_CANDIDATES: u8 = 2;

fn outcome_code(o: Outcome) -> u8 {
    match o {
        Outcome::Success => 0,
        Outcome::TargetNotFound => 3,
        Outcome::IterationLimit => 4,
        Outcome::SuctionFailed => 5,
    }
}

#[derive(Parser)]
#[command(name = "suction", version, about = "Suction-point proposal and simulated picking")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the numbered-marker image and candidate list for one RGB-D pair.
    Propose(ProposeArgs),
    /// Run the pick loop against a simulated shelf.
    Pick(PickArgs),
    /// Evaluate selection accuracy or simulated pick success.
    Eval(EvalArgs),
    /// Render a simulated scene to color/depth/id PNGs.
    SimulateScene(SimulateArgs),
}

#[derive(Args, Clone)]
struct DeciderFlags {
    #[arg(long, value_parser = parse_backend)]
    backend: Option<Backend>,
    #[arg(long)]
    replay_log: Option<PathBuf>,
    /// Append live decisions to this replay log.
    #[arg(long)]
    record_log: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: suction_core::vlm::VlmError| e.to_string())
}

#[derive(Args)]
struct ProposeArgs {
    #[arg(long)]
    color: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Camera-to-robot transform JSON; identity when omitted.
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PickArgs {
    /// Scene spec JSON; a sampled three-box shelf when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    directive: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[command(flatten)]
    decider: DeciderFlags,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(subcommand)]
    what: EvalCommand,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Selection accuracy over a JSONL dataset manifest.
    Selection {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = RuleArg::Head)]
        rule: RuleArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        decider: DeciderFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pick success over seeded simulated episodes.
    Picking {
        /// JSON array of scene specs; sampled shelves when omitted.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = KindArg::Box)]
        kind: KindArg,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        decider: DeciderFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Head,
    Any,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Box,
    Bag,
}

impl From<KindArg> for ObjectKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Box => ObjectKind::Box,
            KindArg::Bag => ObjectKind::Bag,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Box)]
    kind: KindArg,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Contents of `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    executor: ExecutorConfig,
    /// Camera-frame crop for `propose` and selection evaluation.
    workspace: Option<Aabb>,
    role_path: Option<PathBuf>,
    premise_path: Option<PathBuf>,
    picking: PickingPlan,
    suction: SuctionModel,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn load_config(cli: &Cli) -> Result<FileConfig> {
    let mut cfg: FileConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => FileConfig::default(),
    };
    let read = |p: &Option<PathBuf>| -> Result<Option<String>> {
        p.as_ref()
            .map(|p| fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display())))
            .transpose()
    };
    if let Some(role) = read(&cfg.role_path)? {
        cfg.executor.prompts.role = Some(role);
    }
    if let Some(premise) = read(&cfg.premise_path)? {
        cfg.executor.prompts.premise = Some(premise);
    }
    Ok(cfg)
}

fn apply_decider_flags(cfg: &mut ExecutorConfig, f: &DeciderFlags) {
    let d = &mut cfg.decider;
    if let Some(b) = f.backend {
        d.backend = b;
    }
    if let Some(p) = &f.replay_log {
        d.replay_log = Some(p.clone());
    }
    if let Some(p) = &f.record_log {
        d.live.record_log = Some(p.clone());
    }
    if let Some(e) = &f.endpoint {
        d.live.endpoint = e.clone();
    }
    if let Some(m) = &f.model {
        d.live.model = m.clone();
    }
}

fn apply_clustering(cfg: &mut ExecutorConfig, k: Option<usize>, seed: Option<u64>) {
    if let Some(k) = k {
        cfg.clustering.k = k;
    }
    if let Some(s) = seed {
        cfg.clustering.rng_seed = s;
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
}

fn cmd_propose(cfg: FileConfig, a: &ProposeArgs) -> Result<u8> {
    let mut exec = cfg.executor;
    apply_clustering(&mut exec, a.k, a.seed);
    let intr = CameraIntrinsics::load(&a.intrinsics)?;
    let color = load_color(&a.color)?;
    let depth = load_depth(&a.depth, &intr)?;
    let transform = match &a.transform {
        Some(p) => RigidTransform::load(p)?,
        None => RigidTransform::identity(),
    };
    let prop = propose(
        &color,
        &depth,
        &intr,
        &ProposalConfig {
            clustering: exec.clustering,
            workspace: cfg.workspace,
            transform,
        },
    )?;
    if prop.candidates.is_empty() {
        eprintln!("no candidates");
        return Ok(EXIT_NO_CANDIDATES);
    }
    create_dir(&a.out_dir)?;
    prop.annotated.pixels.save_png(&a.out_dir.join("annotated.png"))?;
    write(&a.out_dir.join("candidates.json"), pretty(&prop.candidates))?;
    eprintln!("{} candidates", prop.candidates.len());
    Ok(0)
}

#[derive(Serialize)]
struct PickSummary<'a> {
    outcome: Outcome,
    iterations_used: u32,
    directive: &'a str,
    seed: u64,
    selected_candidate: Option<&'a SuctionCandidate>,
    final_pose: Option<&'a RobotPose>,
}

fn scene_spec(path: &Option<PathBuf>, kind: KindArg, objects: usize, seed: u64) -> Result<SceneSpec> {
    match path {
        Some(p) => read_json(p),
        None => Ok(SceneSpec::sampled(kind.into(), objects, seed)),
    }
}

fn cmd_pick(cfg: FileConfig, a: &PickArgs, verbose: u8) -> Result<u8> {
    let mut exec = cfg.executor;
    apply_decider_flags(&mut exec, &a.decider);
    apply_clustering(&mut exec, a.k, None);
    if let Some(n) = a.max_iterations {
        exec.max_action_iterations = n;
    }
    let spec = scene_spec(&a.scene, KindArg::Box, 3, a.seed)?;
    let scene = generate_scene(&spec, a.seed)?;
    if exec.workspace.is_none() {
        exec.workspace = Some(scene.workspace());
    }
    let mut env = SimEnv::new(scene, cfg.suction, a.seed);
    let res = run_pick_loop(&mut env, &a.directive, &exec)?;

    create_dir(&a.out_dir)?;
    write(&a.out_dir.join("episode.jsonl"), res.episode_log_jsonl())?;
    write(
        &a.out_dir.join("result.json"),
        pretty(&PickSummary {
            outcome: res.outcome,
            iterations_used: res.iterations_used,
            directive: &a.directive,
            seed: a.seed,
            selected_candidate: res.selected_candidate.as_ref(),
            final_pose: res.final_pose(),
        }),
    )?;
    if verbose > 0 {
        eprint!("{}", res.episode_log_jsonl());
    }
    eprintln!("{:?} after {} iteration(s)", res.outcome, res.iterations_used);
    Ok(outcome_code(res.outcome))
}

fn cmd_eval(cfg: FileConfig, what: &EvalCommand) -> Result<u8> {
    match what {
        EvalCommand::Selection {
            manifest,
            rule,
            k,
            seed,
            decider,
            out_dir,
        } => {
            let mut exec = cfg.executor;
            apply_decider_flags(&mut exec, decider);
            apply_clustering(&mut exec, *k, *seed);
            let entries = load_manifest(manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let pcfg = ProposalConfig {
                clustering: exec.clustering.clone(),
                workspace: cfg.workspace,
                transform: RigidTransform::identity(),
            };
            let scenes = entries
                .iter()
                .map(|e| SelectionScene::load(e, base, &pcfg))
                .collect::<Result<Vec<_>, _>>()?;
            let mut dec = build_decider(&exec.decider)?;
            let rule = match rule {
                RuleArg::Head => ScoringRule::HeadOfList,
                RuleArg::Any => ScoringRule::AnyIntersection,
            };
            let (records, report) = evaluate_selection(&scenes, dec.as_mut(), rule, &exec.prompts)?;
            create_dir(out_dir)?;
            write(&out_dir.join("records.jsonl"), records_to_jsonl(&records))?;
            write(&out_dir.join("report.json"), report.to_json())?;
            write(&out_dir.join("report.txt"), report.to_table())?;
            let viz = out_dir.join("decisions");
            create_dir(&viz)?;
            for (s, r) in scenes.iter().zip(sorted_by_id(&scenes).iter().map(|&i| &records[i])) {
                if let Some(d) = &r.decision {
                    let img = visualize_decision(&s.color, &s.candidates, d, &MarkerStyle::for_width(s.color.width));
                    img.pixels.save_png(&viz.join(format!("{}.png", s.scene_id)))?;
                }
            }
            print!("{}", report.to_table());
            Ok(0)
        }
        EvalCommand::Picking {
            specs,
            kind,
            scenes,
            objects,
            episodes,
            seed,
            k,
            decider,
            out_dir,
        } => {
            let mut exec = cfg.executor;
            apply_decider_flags(&mut exec, decider);
            apply_clustering(&mut exec, *k, None);
            let mut plan = cfg.picking;
            plan.model = cfg.suction;
            if let Some(e) = episodes {
                plan.episodes_per_spec = *e;
            }
            if let Some(s) = seed {
                plan.base_seed = *s;
            }
            let specs: Vec<SceneSpec> = match specs {
                Some(p) => read_json(p)?,
                None => (0..*scenes)
                    .map(|i| SceneSpec::sampled((*kind).into(), *objects, plan.base_seed.wrapping_add(i as u64)))
                    .collect(),
            };
            let (records, report) = evaluate_picking(&specs, &plan, &exec)?;
            create_dir(out_dir)?;
            write(&out_dir.join("records.jsonl"), records_to_jsonl(&records))?;
            write(&out_dir.join("report.json"), report.to_json())?;
            write(&out_dir.join("report.txt"), report.to_table())?;
            print!("{}", report.to_table());
            Ok(0)
        }
    }
}

/// Maps each scene (manifest order) to its record index (scene-id order).
fn sorted_by_id(scenes: &[SelectionScene]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| scenes[a].scene_id.cmp(&scenes[b].scene_id));
    let mut pos = vec![0; scenes.len()];
    for (rank, &i) in order.iter().enumerate() {
        pos[i] = rank;
    }
    pos
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8> {
    let spec = scene_spec(&a.scene, a.kind, a.objects, a.seed)?;
    let scene = generate_scene(&spec, a.seed)?;
    let cam = scene.camera_pose(&scene.start_pose());
    let r = render_depth(&scene, &cam);
    create_dir(&a.out_dir)?;
    r.color.save_png(&a.out_dir.join("color.png"))?;
    r.depth.save_png(&a.out_dir.join("depth.png"))?;
    r.save_ids_png(&a.out_dir.join("ids.png"))?;
    write(&a.out_dir.join("intrinsics.json"), pretty(&scene.camera.intrinsics))?;
    write(&a.out_dir.join("transform.json"), pretty(&cam))?;
    write(&a.out_dir.join("scene.json"), pretty(&scene))?;
    for o in &scene.objects {
        r.save_mask_png(o.id, &a.out_dir.join(format!("mask_{}.png", o.id)))?;
    }
    eprintln!("{} objects", scene.objects.len());
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    if let Command::SimulateScene(a) = &cli.cmd {
        return cmd_simulate(a);
    }
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Command::Propose(a) => cmd_propose(cfg, a),
        Command::Pick(a) => cmd_pick(cfg, a, cli.verbose),
        Command::Eval(a) => cmd_eval(cfg, &a.what),
        Command::SimulateScene(_) => bail!("unreachable"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
