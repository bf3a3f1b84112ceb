//! End-to-end assembly of the 2D benchmark: observations to mesh, costs,
//! regularizer and solved labeling.

use serde::{Deserialize, Serialize};

use crate::adapt::{refine_loop, RefineConfig, StepStats};
use crate::datacost::{
    integrate_simplex_costs, integrate_vertex_costs, rho_point, CostField, DataCostParams, Observations, Sampler,
};
use crate::energy::{assemble, Flavor, Problem};
use crate::error::Result;
use crate::extract::{accuracy, rasterize_labels, Accuracy};
use crate::geometry::GeometryCache;
use crate::mesh::SimplexMesh;
use crate::scene::{build_control_mesh, ControlMeshParams, Scene, CLASSES};
use crate::shapes::{PresetParams, WulffTable};
use crate::solver::{SolveOutcome, SolverConfig, SolverState, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataCostParams,
    pub control: ControlMeshParams,
    pub preset: PresetParams,
    /// Global weight of the regularizer.
    pub weight: f64,
    /// Sample spacing of the data integration; a quarter of `eps` if unset.
    pub sample_spacing: Option<f64>,
    pub solver: SolverConfig,
    /// Start from the data-driven labeling instead of the uniform one.
    pub warm_start: bool,
    /// Neighbour pooling rounds of the costs before picking warm-start labels.
    pub warm_rings: usize,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataCostParams {
                eps: 0.005,
                beta: 1.0,
                ..DataCostParams::default()
            },
            control: ControlMeshParams {
                background: 32,
                min_spacing: 0.008,
                ..ControlMeshParams::default()
            },
            preset: PresetParams::default(),
            weight: 0.02,
            sample_spacing: None,
            solver: SolverConfig {
                max_iters: 2000,
                step_ratio: 10.0,
                restart_every: 64,
                rebalance: true,
                ..SolverConfig::default()
            },
            warm_start: true,
            warm_rings: 2,
            refine: RefineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn sampler(&self) -> Sampler {
        self.sample_spacing
            .map_or(Sampler::for_eps(self.data.eps), |spacing| Sampler { spacing })
    }

    /// Class-preset transition shapes scaled by `weight`, with `up` along +y.
    pub fn table(&self) -> Result<WulffTable> {
        Ok(WulffTable::preset(&CLASSES, &[0.0, 1.0], self.preset)?.scaled(self.weight))
    }
}

/// Integrated costs for `flavor` on `mesh`: per vertex for P1, per simplex for RT.
pub fn data_costs(
    flavor: Flavor,
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    obs: &Observations,
    params: &DataCostParams,
    sampler: &Sampler,
) -> CostField {
    let rho = |p: &[f64], out: &mut [f64]| rho_point(obs, params, p, out);
    if flavor.is_p1() {
        integrate_vertex_costs(mesh, geo, sampler, obs.n_labels, rho)
    } else {
        integrate_simplex_costs(mesh, geo, sampler, obs.n_labels, rho)
    }
}

pub fn build_problem(flavor: Flavor, mesh: SimplexMesh, obs: &Observations, cfg: &PipelineConfig) -> Result<Problem> {
    let geo = GeometryCache::new(&mesh)?;
    let costs = data_costs(flavor, &mesh, &geo, obs, &cfg.data, &cfg.sampler());
    assemble(flavor, mesh, costs, cfg.table()?)
}

/// Control mesh and problem for an observed scene.
pub fn scene_problem(scene: &Scene, obs: &Observations, flavor: Flavor, cfg: &PipelineConfig) -> Result<Problem> {
    let mesh = build_control_mesh(obs, scene.spec.lo, scene.spec.hi, &cfg.control)?;
    build_problem(flavor, mesh, obs, cfg)
}

#[derive(Debug, Clone)]
pub struct Solved {
    pub problem: Problem,
    pub outcome: SolveOutcome,
    pub accuracy: Accuracy,
}

/// Solves and scores against the scene's ground truth.
pub fn solve_and_score(
    problem: Problem,
    scene: &Scene,
    cfg: &SolverConfig,
    init: Option<SolverState>,
) -> Result<Solved> {
    let outcome = problem.solve(cfg, init)?;
    let accuracy = score(&problem, &outcome.state, scene)?;
    Ok(Solved {
        problem,
        outcome,
        accuracy,
    })
}

pub fn score(problem: &Problem, state: &SolverState, scene: &Scene) -> Result<Accuracy> {
    let pred = rasterize_labels(problem, state, &scene.gt)?;
    accuracy(&pred, &scene.gt, problem.n_labels())
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub problem: Problem,
    pub state: SolverState,
    /// Accuracy on the control mesh before refinement.
    pub base_accuracy: Accuracy,
    pub base_iterations: usize,
    pub base_trace: Trace,
    pub accuracy: Accuracy,
    pub steps: Vec<StepStats>,
}

/// Control mesh, base solve and `cfg.refine.steps` refinement steps, scored
/// against the ground truth.
pub fn run_pipeline(scene: &Scene, obs: &Observations, flavor: Flavor, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let problem = scene_problem(scene, obs, flavor, cfg)?;
    let init = if cfg.warm_start {
        Some(problem.state_from_indicators(&problem.data_indicators(cfg.warm_rings))?)
    } else {
        None
    };
    let base = solve_and_score(problem, scene, &cfg.solver, init)?;
    if cfg.refine.steps == 0 {
        return Ok(PipelineRun {
            problem: base.problem,
            state: base.outcome.state,
            base_accuracy: base.accuracy.clone(),
            base_iterations: base.outcome.iterations,
            base_trace: base.outcome.trace,
            accuracy: base.accuracy,
            steps: Vec::new(),
        });
    }
    let r = refine_loop(base.problem, base.outcome.state, obs, cfg.data, &cfg.refine)?;
    let accuracy = score(&r.problem, &r.state, scene)?;
    Ok(PipelineRun {
        problem: r.problem,
        state: r.state,
        base_accuracy: base.accuracy,
        base_iterations: base.outcome.iterations,
        base_trace: base.outcome.trace,
        accuracy,
        steps: r.stats,
    })
}
