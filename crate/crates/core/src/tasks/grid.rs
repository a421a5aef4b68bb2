use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{gen_copy, gen_rocketman, SplitSizes, TaskKind, SUCCESS_THRESHOLD};
use super::TaskError;
use crate::engine::{
    evaluate_mse, train, Activation, MessagePassing, Model, ModelConfig, TemporalKind, TrainSchedule,
};
use crate::spatial::{build_lollipop, build_ring, SpatialGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "fig3")]
    Fig3,
    #[serde(rename = "fig4-tts")]
    Fig4Tts,
    #[serde(rename = "fig4-tas")]
    Fig4Tas,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig3 => "fig3",
            Experiment::Fig4Tts => "fig4-tts",
            Experiment::Fig4Tas => "fig4-tas",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig3" => Ok(Experiment::Fig3),
            "fig4-tts" => Ok(Experiment::Fig4Tts),
            "fig4-tas" => Ok(Experiment::Fig4Tas),
            other => Err(TaskError::Invalid(format!(
                "unknown experiment {other:?}; expected fig3, fig4-tts or fig4-tas"
            ))),
        }
    }
}

/// Temporal topologies compared on the copy tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyTopology {
    /// `R` with `P = 4`.
    Standard,
    /// `R_N` with `P = 4`.
    Normalized,
    /// `R_D` with `P = 2` and reset period 4.
    Dilated,
}

impl CopyTopology {
    pub const ALL: [CopyTopology; 3] = [CopyTopology::Standard, CopyTopology::Normalized, CopyTopology::Dilated];

    pub fn name(self) -> &'static str {
        match self {
            CopyTopology::Standard => "R",
            CopyTopology::Normalized => "R_N",
            CopyTopology::Dilated => "R_D",
        }
    }

    pub fn kernel_size(self) -> usize {
        match self {
            CopyTopology::Dilated => 2,
            _ => 4,
        }
    }

    pub fn temporal_kind(self) -> TemporalKind {
        match self {
            CopyTopology::Standard => TemporalKind::Standard,
            CopyTopology::Normalized => TemporalKind::Normalized,
            CopyTopology::Dilated => TemporalKind::Dilated { reset: 4 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphName {
    Ring,
    Lollipop,
}

impl GraphName {
    pub fn name(self) -> &'static str {
        match self {
            GraphName::Ring => "ring",
            GraphName::Lollipop => "lollipop",
        }
    }

    /// The 16-node benchmark graph and its target node: node 0 of the ring,
    /// or the path tail of an 8-clique + 8-path lollipop.
    pub fn build(self) -> Result<(SpatialGraph, usize), TaskError> {
        Ok(match self {
            GraphName::Ring => (build_ring(16)?, 0),
            GraphName::Lollipop => (build_lollipop(8, 8)?, 15),
        })
    }
}

/// Grid shape and training budget. Unset lists mean "the full paper grid".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub seeds: usize,
    pub first_seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_batches: Option<usize>,
    pub stop_below: Option<f64>,
    pub lr: f64,
    pub hidden_dim: usize,
    pub sizes: SplitSizes,
    /// fig3: temporal depths `L_T`.
    pub depths: Vec<usize>,
    pub tasks: Vec<TaskKind>,
    pub topologies: Vec<CopyTopology>,
    /// fig4: graphs, kernel sizes and `(k, i)` cells.
    pub graphs: Vec<GraphName>,
    pub kernel_sizes: Vec<usize>,
    pub lattice: Option<Vec<(usize, usize)>>,
    pub copy_window: usize,
    pub rocket_window: usize,
    pub jobs: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            seeds: 5,
            first_seed: 0,
            epochs: 50,
            patience: 15,
            batch_size: 32,
            max_batches: None,
            stop_below: None,
            lr: 1e-3,
            hidden_dim: 16,
            sizes: SplitSizes::default(),
            depths: (1..=20).collect(),
            tasks: vec![TaskKind::CopyFirst, TaskKind::CopyLast],
            topologies: CopyTopology::ALL.to_vec(),
            graphs: vec![GraphName::Ring, GraphName::Lollipop],
            kernel_sizes: vec![2, 3],
            lattice: None,
            copy_window: 16,
            rocket_window: 9,
            jobs: 1,
        }
    }
}

impl GridOptions {
    /// Defaults for an experiment: fig4 caps epochs at 400 batches.
    pub fn for_experiment(experiment: Experiment) -> Self {
        match experiment {
            Experiment::Fig3 => Self::default(),
            Experiment::Fig4Tts | Experiment::Fig4Tas => Self {
                max_batches: Some(400),
                ..Self::default()
            },
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub experiment: Experiment,
    pub task: TaskKind,
    pub graph: Option<GraphName>,
    pub topology: String,
    pub temporal: TemporalKind,
    pub kernel_size: usize,
    pub outer_layers: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub k: Option<usize>,
    pub i: Option<usize>,
    pub window: usize,
    pub hidden_dim: usize,
    pub sizes: SplitSizes,
    pub schedule: TrainSchedule,
    pub seed: u64,
}

impl CellSpec {
    /// Hash of the canonical JSON form; names the cell's marker file.
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("cell spec serializes");
        Sha256::digest(&json).iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    fn graph_and_target(&self) -> Result<(SpatialGraph, usize), TaskError> {
        match self.graph {
            Some(g) => g.build(),
            None => Ok((SpatialGraph::new(1, false, vec![])?, 0)),
        }
    }

    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            window: self.window,
            input_dim: 1,
            hidden_dim: self.hidden_dim,
            horizon: 1,
            outer_layers: self.outer_layers,
            temporal_layers: self.temporal_layers,
            spatial_layers: self.spatial_layers,
            kernel_size: self.kernel_size,
            temporal: self.temporal,
            activation: Activation::Gelu,
            message_passing: MessagePassing::Diffusion { hops: 1 },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub test_mse: Option<f64>,
    pub success: bool,
    pub epochs_run: usize,
    pub error: Option<String>,
}

/// Trains and evaluates one cell. Failures are recorded, not propagated.
pub fn run_cell(spec: &CellSpec) -> CellResult {
    let outcome = (|| -> Result<(f64, usize), TaskError> {
        let (graph, target) = spec.graph_and_target()?;
        let data = match spec.task {
            TaskKind::RocketMan => gen_rocketman(
                &graph,
                spec.k.unwrap_or(0),
                spec.i.unwrap_or(0),
                target,
                spec.window,
                spec.sizes,
                spec.seed,
            )?,
            kind => gen_copy(kind, spec.window, spec.sizes, spec.seed)?,
        };
        let mut model = Model::init(spec.model_config(graph.num_nodes()), graph)?;
        let history = train(&mut model, &data.train, &data.val, &spec.schedule)?;
        let mse = evaluate_mse(&model, &data.test, 256)?;
        Ok((mse, history.epochs.len()))
    })();
    match outcome {
        Ok((mse, epochs)) => CellResult {
            spec: spec.clone(),
            test_mse: Some(mse),
            success: mse < SUCCESS_THRESHOLD,
            epochs_run: epochs,
            error: None,
        },
        Err(e) => CellResult {
            spec: spec.clone(),
            test_mse: None,
            success: false,
            epochs_run: 0,
            error: Some(e.to_string()),
        },
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Every cell of an experiment, in a fixed order.
pub fn plan_cells(experiment: Experiment, options: &GridOptions) -> Result<Vec<CellSpec>, TaskError> {
    if options.seeds == 0 {
        return Err(TaskError::Invalid("need at least one seed".into()));
    }
    let seeds = options.first_seed..options.first_seed + options.seeds as u64;
    let schedule = |seed: u64| TrainSchedule {
        epochs: options.epochs,
        batch_size: options.batch_size,
        lr: options.lr,
        patience: options.patience,
        max_batches: options.max_batches,
        stop_below: options.stop_below,
        seed,
        ..TrainSchedule::default()
    };
    let mut cells = Vec::new();
    match experiment {
        Experiment::Fig3 => {
            for &topology in &options.topologies {
                for &task in &options.tasks {
                    if task == TaskKind::RocketMan {
                        return Err(TaskError::Invalid("fig3 runs the copy tasks only".into()));
                    }
                    for &depth in &options.depths {
                        for seed in seeds.clone() {
                            cells.push(CellSpec {
                                experiment,
                                task,
                                graph: None,
                                topology: topology.name().into(),
                                temporal: topology.temporal_kind(),
                                kernel_size: topology.kernel_size(),
                                outer_layers: 1,
                                temporal_layers: depth,
                                spatial_layers: 0,
                                k: None,
                                i: None,
                                window: options.copy_window,
                                hidden_dim: options.hidden_dim,
                                sizes: options.sizes,
                                schedule: schedule(seed),
                                seed,
                            });
                        }
                    }
                }
            }
        }
        Experiment::Fig4Tts | Experiment::Fig4Tas => {
            let t = options.rocket_window;
            for &name in &options.graphs {
                let (graph, target) = name.build()?;
                let diameter = graph
                    .diameter()
                    .ok_or_else(|| TaskError::Invalid(format!("{} is disconnected", name.name())))?;
                for &p in &options.kernel_sizes {
                    if p < 2 {
                        return Err(TaskError::Invalid("fig4 needs kernel size >= 2".into()));
                    }
                    // just enough layers to span the window and the graph
                    let budget_t = ceil_div(t - 1, p - 1);
                    let budget_s = diameter;
                    let (outer, lt, ls) = match experiment {
                        Experiment::Fig4Tts => (1, budget_t, budget_s),
                        _ => (budget_s, ceil_div(budget_t, budget_s), 1),
                    };
                    assert!((p - 1) * outer * lt >= t - 1 && outer * ls >= diameter);
                    let lattice: Vec<(usize, usize)> = match &options.lattice {
                        Some(l) => l.clone(),
                        None => (0..=diameter).flat_map(|k| (0..t).map(move |i| (k, i))).collect(),
                    };
                    for &(k, i) in &lattice {
                        if k > diameter || i >= t {
                            continue;
                        }
                        if graph.k_hop_set(target, k)?.is_empty() {
                            continue;
                        }
                        for seed in seeds.clone() {
                            cells.push(CellSpec {
                                experiment,
                                task: TaskKind::RocketMan,
                                graph: Some(name),
                                topology: "R".into(),
                                temporal: TemporalKind::Standard,
                                kernel_size: p,
                                outer_layers: outer,
                                temporal_layers: lt,
                                spatial_layers: ls,
                                k: Some(k),
                                i: Some(i),
                                window: t,
                                hidden_dim: options.hidden_dim,
                                sizes: options.sizes,
                                schedule: schedule(seed),
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Success statistics of all seeds sharing a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub task: TaskKind,
    pub graph: Option<GraphName>,
    pub topology: String,
    pub kernel_size: usize,
    pub outer_layers: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub k: Option<usize>,
    pub i: Option<usize>,
    pub runs: usize,
    pub failed: usize,
    pub success_rate: f64,
    pub mean_test_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub cells: Vec<CellResult>,
    pub groups: Vec<GroupSummary>,
}

type GroupKey = (TaskKind, Option<GraphName>, String, usize, usize, usize, usize, Option<usize>, Option<usize>);

fn group_key(s: &CellSpec) -> GroupKey {
    (
        s.task,
        s.graph,
        s.topology.clone(),
        s.kernel_size,
        s.outer_layers,
        s.temporal_layers,
        s.spatial_layers,
        s.k,
        s.i,
    )
}

impl ExperimentResult {
    pub fn new(experiment: Experiment, cells: Vec<CellResult>) -> Self {
        let mut grouped: BTreeMap<GroupKey, Vec<&CellResult>> = BTreeMap::new();
        for c in &cells {
            grouped.entry(group_key(&c.spec)).or_default().push(c);
        }
        let groups = grouped
            .into_iter()
            .map(|((task, graph, topology, p, l, lt, ls, k, i), runs)| {
                let mses: Vec<f64> = runs.iter().filter_map(|r| r.test_mse).collect();
                GroupSummary {
                    task,
                    graph,
                    topology,
                    kernel_size: p,
                    outer_layers: l,
                    temporal_layers: lt,
                    spatial_layers: ls,
                    k,
                    i,
                    runs: runs.len(),
                    failed: runs.len() - mses.len(),
                    success_rate: 100.0 * runs.iter().filter(|r| r.success).count() as f64
                        / runs.len() as f64,
                    mean_test_mse: (!mses.is_empty()).then(|| mses.iter().sum::<f64>() / mses.len() as f64),
                }
            })
            .collect();
        Self {
            experiment,
            cells,
            groups,
        }
    }

    /// One row per run.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("task,graph,topology,P,L,L_T,L_S,k,i,seed,test_mse,success,epochs,error\n");
        for c in &self.cells {
            let s = &c.spec;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                s.task.name(),
                s.graph.map_or("", GraphName::name),
                s.topology,
                s.kernel_size,
                s.outer_layers,
                s.temporal_layers,
                s.spatial_layers,
                opt(s.k),
                opt(s.i),
                s.seed,
                c.test_mse.map_or(String::new(), |m| format!("{m:.16e}")),
                c.success,
                c.epochs_run,
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        out
    }

    pub fn group<'a>(&'a self, pred: impl Fn(&GroupSummary) -> bool + 'a) -> impl Iterator<Item = &'a GroupSummary> {
        self.groups.iter().filter(move |g| pred(g))
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), TaskError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs (or resumes) an experiment grid.
///
/// With an output directory, every finished cell leaves a marker
/// `cells/<key>.json`; rerunning skips cells whose marker exists. The per-run
/// CSV and the aggregate JSON are written as `<experiment>.csv/.json`.
pub fn run_grid(
    experiment: Experiment,
    options: &GridOptions,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, TaskError> {
    let cells = plan_cells(experiment, options)?;
    let marker_dir: Option<PathBuf> = match out_dir {
        Some(dir) => {
            let d = dir.join("cells");
            fs::create_dir_all(&d)?;
            Some(d)
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| TaskError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<CellResult, TaskError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|spec| {
                let marker = marker_dir.as_ref().map(|d| d.join(format!("{}.json", spec.key())));
                if let Some(path) = &marker {
                    if let Ok(bytes) = fs::read(path) {
                        if let Ok(done) = serde_json::from_slice::<CellResult>(&bytes) {
                            if done.spec == *spec {
                                return Ok(done);
                            }
                        }
                    }
                }
                let result = run_cell(spec);
                if let Some(path) = &marker {
                    write_atomic(path, &serde_json::to_vec_pretty(&result)?)?;
                }
                Ok(result)
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if !results.is_empty() && results.iter().all(|r| r.error.is_some()) {
        return Err(TaskError::AllCellsFailed(
            results[0].error.clone().unwrap_or_default(),
        ));
    }
    let result = ExperimentResult::new(experiment, results);
    if let Some(dir) = out_dir {
        write_atomic(&dir.join(format!("{}.csv", experiment.name())), result.to_csv().as_bytes())?;
        let aggregate = serde_json::json!({
            "experiment": experiment,
            "options": options,
            "groups": result.groups,
        });
        write_atomic(
            &dir.join(format!("{}.json", experiment.name())),
            &serde_json::to_vec_pretty(&aggregate)?,
        )?;
    }
    Ok(result)
}
