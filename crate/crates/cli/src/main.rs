use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use femseg::adapt::StepStats;
use femseg::datacost::Observations;
use femseg::energy::Flavor;
use femseg::extract::{
    accuracy, interfaces_to_off, interfaces_to_svg, marching_interfaces, rasterize_labels, Accuracy, LabelMap,
};
use femseg::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use femseg::scene::{generate, observe, perturb, Perturbation, Scene, SceneSpec, N_LABELS};
use femseg::snapshot::Snapshot;

#[derive(Parser)]
#[command(
    name = "femseg",
    version,
    about = "Convex multi-label segmentation on simplicial meshes"
)]
struct Cli {
    /// TOML (or JSON) run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the solver (1 gives byte-identical reruns).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// p1 | p1-metric | rt
    #[arg(long, global = true)]
    flavor: Option<String>,
    /// Refinement steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic scene, its observations and the ground truth.
    Gen,
    /// Solve on the control mesh.
    Solve,
    /// Solve and run the refinement loop.
    Refine,
    /// Write label raster and interfaces of a state snapshot.
    Extract {
        /// Snapshot to read; defaults to the latest refine or solve output.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a predicted label raster against the ground truth.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Clean runs for both flavors plus the perturbation sweep.
    Bench,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BenchConfig {
    flavors: Vec<String>,
    /// Perturbation kinds swept by the bench.
    sweep_kinds: Vec<String>,
    sweep_amounts: Vec<f64>,
    /// Pipeline used for the sweep (a lighter configuration is typical).
    sweep_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            flavors: vec!["p1".into(), "rt".into()],
            sweep_kinds: vec!["wrong_class".into(), "missing_data".into()],
            sweep_amounts: vec![0.0, 0.1, 0.3, 0.5, 0.7],
            sweep_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    workers: usize,
    flavor: String,
    out: PathBuf,
    scene: SceneSpec,
    pipeline: PipelineConfig,
    /// Applied in order to the observations of solve and refine.
    perturbations: Vec<Perturbation>,
    bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            flavor: "p1".into(),
            out: PathBuf::from("out"),
            scene: SceneSpec::default(),
            pipeline: PipelineConfig::default(),
            perturbations: Vec::new(),
            bench: BenchConfig::default(),
        }
    }
}

/// Overlays `user` onto `base`, table by table, so partial sections keep
/// the remaining defaults.
fn merge(base: &mut serde_json::Value, user: serde_json::Value) {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                serde_json::to_value(toml::from_str::<toml::Value>(&text)?)?
            };
            let mut merged = serde_json::to_value(RunConfig::default())?;
            merge(&mut merged, user);
            serde_json::from_value(merged).with_context(|| format!("parsing {}", path.display()))?
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(f) = &cli.flavor {
        cfg.flavor = f.clone();
    }
    if let Some(s) = cli.steps {
        cfg.pipeline.refine.steps = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cfg.workers == 0 {
        bail!("--workers must be at least 1");
    }
    Flavor::parse(&cfg.flavor)?;
    cfg.scene.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    files: Vec<String>,
}

impl Ctx {
    fn new(cfg: RunConfig, sub: &str) -> Result<Self> {
        let dir = cfg.out.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Ctx {
            cfg,
            dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(v)? + "\n")
    }

    /// Effective configuration and the list of written files.
    fn finish(mut self, command: &str, extra: serde_json::Value) -> Result<()> {
        let cfg_text = toml::to_string(&self.cfg)?;
        self.write("config.toml", cfg_text)?;
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "workers": self.cfg.workers,
            "flavor": self.cfg.flavor,
            "files": self.files,
            "summary": extra,
        });
        fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }
}

fn scene_and_obs(cfg: &RunConfig) -> Result<(Scene, Observations)> {
    let scene = generate(&cfg.scene, cfg.seed)?;
    let mut obs = observe(&scene);
    for (k, p) in cfg.perturbations.iter().enumerate() {
        obs = perturb(&obs, p, cfg.seed.wrapping_add(k as u64))?;
    }
    Ok((scene, obs))
}

fn cmd_gen(cfg: RunConfig) -> Result<()> {
    let (scene, obs) = scene_and_obs(&cfg)?;
    let mut ctx = Ctx::new(cfg, "scene")?;
    ctx.write_json("scene.json", &scene)?;
    ctx.write_json("observations.json", &obs)?;
    ctx.write("gt.pgm", scene.gt.to_pgm(N_LABELS as u8))?;
    let areas = scene.spec.label_areas();
    ctx.finish("gen", json!({ "observations": obs.count(), "label_areas": areas }))
}

fn steps_csv(steps: &[StepStats], with_timing: bool) -> String {
    let mut s = String::from(StepStats::csv_header());
    s.push('\n');
    for st in steps {
        s.push_str(&st.csv_row(with_timing));
        s.push('\n');
    }
    s
}

fn accuracy_json(a: &Accuracy) -> serde_json::Value {
    json!({ "overall": a.overall, "average": a.average, "per_class": a.per_class, "confusion": a.confusion, "pixels": a.pixels })
}

fn run_flavor(cfg: &RunConfig, scene: &Scene, obs: &Observations, flavor: Flavor, steps: usize) -> Result<PipelineRun> {
    let mut pc = cfg.pipeline.clone();
    pc.refine.steps = steps;
    Ok(run_pipeline(scene, obs, flavor, &pc)?)
}

fn cmd_solve(cfg: RunConfig, refine: bool) -> Result<()> {
    let flavor = Flavor::parse(&cfg.flavor)?;
    let (scene, obs) = scene_and_obs(&cfg)?;
    let steps = if refine { cfg.pipeline.refine.steps } else { 0 };
    let sub = if refine { "refine" } else { "solve" };
    let mut ctx = Ctx::new(cfg, sub)?;
    let start = Instant::now();
    let run = run_flavor(&ctx.cfg, &scene, &obs, flavor, steps)?;
    let wall = start.elapsed().as_secs_f64();
    ctx.write("state.json", Snapshot::new(&run.problem, Some(&run.state)).to_json()?)?;
    let pred = rasterize_labels(&run.problem, &run.state, &scene.gt)?;
    ctx.write("labels.pgm", pred.to_pgm(N_LABELS as u8))?;
    ctx.write("trace.csv", run.base_trace.to_csv(false))?;
    if refine {
        ctx.write("steps.csv", steps_csv(&run.steps, false))?;
    }
    ctx.write_json("energy.json", &run.problem.primal_energy(&run.state)?)?;
    let summary = json!({
        "vertices": run.problem.mesh.n_vertices(),
        "simplices": run.problem.mesh.n_simplices(),
        "base_iterations": run.base_iterations,
        "base_accuracy": accuracy_json(&run.base_accuracy),
        "accuracy": accuracy_json(&run.accuracy),
        "wall_seconds": wall,
    });
    ctx.write_json("summary.json", &summary)?;
    println!(
        "{sub}: overall {:.4} average {:.4} ({:.1} s)",
        run.accuracy.overall, run.accuracy.average, wall
    );
    ctx.finish(sub, summary)
}

fn latest_snapshot(out: &Path) -> Result<PathBuf> {
    for sub in ["refine", "solve"] {
        let p = out.join(sub).join("state.json");
        if p.exists() {
            return Ok(p);
        }
    }
    bail!(
        "no snapshot under {}; run solve or refine first or pass --input",
        out.display()
    )
}

fn cmd_extract(cfg: RunConfig, input: Option<PathBuf>) -> Result<()> {
    let path = match input {
        Some(p) => p,
        None => latest_snapshot(&cfg.out)?,
    };
    let (problem, state) = Snapshot::load(&path)
        .with_context(|| format!("loading {}", path.display()))?
        .restore()?;
    let state = state.context("snapshot holds no state")?;
    let scene = generate(&cfg.scene, cfg.seed)?;
    let mut ctx = Ctx::new(cfg, "extract")?;
    let m = problem.n_labels();
    if problem.flavor.is_p1() {
        let ifs = marching_interfaces(&problem.mesh, problem.indicators(&state), m);
        let (lo, hi) = problem.mesh.bounding_box();
        if problem.dim() == 2 {
            ctx.write(
                "interfaces.svg",
                interfaces_to_svg(&ifs, [lo[0], lo[1]], [hi[0], hi[1]], 512.0),
            )?;
        } else {
            ctx.write("interfaces.off", interfaces_to_off(&ifs)?)?;
        }
    }
    if problem.dim() == 2 {
        let pred = rasterize_labels(&problem, &state, &scene.gt)?;
        ctx.write("labels.pgm", pred.to_pgm(m as u8))?;
    }
    ctx.finish("extract", json!({ "input": path.display().to_string() }))
}

fn cmd_eval(cfg: RunConfig, pred: Option<PathBuf>, gt: Option<PathBuf>) -> Result<()> {
    let scene = generate(&cfg.scene, cfg.seed)?;
    let max = N_LABELS as u8;
    let (lo, hi) = (cfg.scene.lo, cfg.scene.hi);
    let read = |p: &Path| -> Result<LabelMap> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(LabelMap::from_pgm(&text, max, lo, hi)?)
    };
    let gt_map = match &gt {
        Some(p) => read(p)?,
        None => scene.gt.clone(),
    };
    let pred_path = match pred {
        Some(p) => p,
        None => {
            let e = cfg.out.join("extract").join("labels.pgm");
            if e.exists() {
                e
            } else {
                latest_snapshot(&cfg.out)?.with_file_name("labels.pgm")
            }
        }
    };
    let pred_map = read(&pred_path)?;
    let a = accuracy(&pred_map, &gt_map, N_LABELS)?;
    let mut ctx = Ctx::new(cfg, "eval")?;
    let metrics = accuracy_json(&a);
    ctx.write_json("metrics.json", &metrics)?;
    println!("eval: overall {:.4} average {:.4}", a.overall, a.average);
    ctx.finish(
        "eval",
        json!({ "pred": pred_path.display().to_string(), "overall": a.overall, "average": a.average }),
    )
}

fn sweep_perturbation(kind: &str, amount: f64) -> Result<Perturbation> {
    Ok(match kind {
        "depth_noise" => Perturbation::DepthNoise(amount),
        "wrong_class" => Perturbation::WrongClass(amount),
        "ambiguous_class" => Perturbation::AmbiguousClass(amount),
        "missing_data" => Perturbation::MissingData(amount),
        "sparsify" => Perturbation::Sparsify(1.0 - amount),
        other => bail!("unknown perturbation kind {other:?}"),
    })
}

fn cmd_bench(cfg: RunConfig) -> Result<()> {
    let scene = generate(&cfg.scene, cfg.seed)?;
    let clean = observe(&scene);
    let mut ctx = Ctx::new(cfg, "bench")?;
    let mut rows = Vec::new();
    let mut table =
        String::from("| run | flavor | vertices | overall | average | seconds |\n|---|---|---|---|---|---|\n");
    for f in ctx.cfg.bench.flavors.clone() {
        let flavor = Flavor::parse(&f)?;
        let start = Instant::now();
        let run = run_flavor(&ctx.cfg, &scene, &clean, flavor, ctx.cfg.pipeline.refine.steps)?;
        let wall = start.elapsed().as_secs_f64();
        table.push_str(&format!(
            "| clean | {} | {} | {:.4} | {:.4} | {:.1} |\n",
            flavor.name(),
            run.problem.mesh.n_vertices(),
            run.accuracy.overall,
            run.accuracy.average,
            wall
        ));
        ctx.write(&format!("steps_{}.csv", flavor.name()), steps_csv(&run.steps, false))?;
        rows.push(json!({ "run": "clean", "flavor": flavor.name(), "accuracy": accuracy_json(&run.accuracy), "vertices": run.problem.mesh.n_vertices() }));
    }
    let flavor = Flavor::parse(&ctx.cfg.flavor)?;
    for kind in ctx.cfg.bench.sweep_kinds.clone() {
        for &amount in &ctx.cfg.bench.sweep_amounts.clone() {
            let p = sweep_perturbation(&kind, amount)?;
            let obs = perturb(&clean, &p, ctx.cfg.seed)?;
            let run = run_flavor(&ctx.cfg, &scene, &obs, flavor, ctx.cfg.bench.sweep_steps)?;
            table.push_str(&format!(
                "| {kind} {amount} | {} | {} | {:.4} | {:.4} | |\n",
                flavor.name(),
                run.problem.mesh.n_vertices(),
                run.accuracy.overall,
                run.accuracy.average
            ));
            rows.push(json!({ "run": kind, "amount": amount, "flavor": flavor.name(), "accuracy": accuracy_json(&run.accuracy) }));
        }
    }
    print!("{table}");
    ctx.write("summary.md", &table)?;
    ctx.write_json("summary.json", &rows)?;
    ctx.finish("bench", json!({ "runs": rows.len() }))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .ok();
    match cli.cmd {
        Cmd::Gen => cmd_gen(cfg),
        Cmd::Solve => cmd_solve(cfg, false),
        Cmd::Refine => cmd_solve(cfg, true),
        Cmd::Extract { input } => cmd_extract(cfg, input),
        Cmd::Eval { pred, gt } => cmd_eval(cfg, pred, gt),
        Cmd::Bench => cmd_bench(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": chain.first(), "causes": &chain[1..] }));
            ExitCode::FAILURE
        }
    }
}
