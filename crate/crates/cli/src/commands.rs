use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use stos_core::engine::{
    gradcheck::gradient_check, train as train_model, evaluate_mse, Activation, Batch, Dataset, ModelConfig,
    Model, TemporalKind, TensorBundle, TrainSchedule,
};
use stos_core::sensitivity::{factorization_check, fingerprint, verify_bounds, complexity_estimate, CostMode};
use stos_core::spatial::{build_lollipop, build_ring, SpatialGraph};
use stos_core::tasks::{
    gen_copy, gen_rocketman, run_grid, Experiment, GraphName, GridOptions, SplitSizes, TaskKind,
    SUCCESS_THRESHOLD,
};
use stos_core::temporal::{build_causal, build_dilated, layer_product, matrix_to_csv, power, row_normalize};

use crate::config::{resolve, RunConfig};
use crate::output::OutDir;
use crate::{BoundsArgs, CliError, ExperimentArgs, GradcheckArgs, ModelFlags, TopologyArgs, TopologyKind, TrainArgs};

/// Factorization deviations above this fail `bounds --check-factorization`.
const FACTORIZATION_TOLERANCE: f64 = 1e-10;

pub fn topology(args: &TopologyArgs, out: &Path) -> Result<(), CliError> {
    let (t, p) = (args.window, args.kernel);
    if args.layers.0.is_empty() || args.layers.0.contains(&0) {
        return Err(CliError::Config("layer counts must be positive".into()));
    }
    let reset = args.reset.unwrap_or(usize::MAX);
    if reset == 0 {
        return Err(CliError::Config("reset period must be positive".into()));
    }
    let base = build_causal(t, p, None)?;
    let normalized = row_normalize(&base)?;
    let dir = OutDir::create(out.to_path_buf())?;
    let mut files = Vec::new();
    for &kind in &args.kind {
        let name = match kind {
            TopologyKind::Standard => "standard",
            TopologyKind::Normalized => "normalized",
            TopologyKind::Dilated => "dilated",
        };
        let mut profile = String::from("layers,step,influence\n");
        for &l in &args.layers.0 {
            let m = match kind {
                TopologyKind::Standard => power(&base, l),
                TopologyKind::Normalized => power(&normalized, l),
                TopologyKind::Dilated => {
                    let stack = (1..=l)
                        .map(|layer| build_dilated(t, p, layer, reset))
                        .collect::<Result<Vec<_>, _>>()?;
                    layer_product(&stack)?
                }
            };
            if m.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Numeric(format!("{name} receptive field overflows at {l} layers")));
            }
            files.push(dir.write(&format!("{name}_l{l}.csv"), matrix_to_csv(&m))?);
            for (i, v) in m.column(0).iter().enumerate() {
                profile.push_str(&format!("{l},{i},{v:.16e}\n"));
            }
        }
        files.push(dir.write(&format!("{name}_column0.csv"), profile)?);
    }
    dir.write_meta("topology", &files)?;
    println!("wrote {} files to {}", files.len(), dir.path().display());
    Ok(())
}

/// `ring:N`, `lollipop:C,P`, the fig4 names `ring` / `lollipop`, or an
/// edge-list file (`u v w` per line).
pub fn parse_graph(spec: &str) -> Result<SpatialGraph, CliError> {
    let sizes = |s: &str| -> Result<Vec<usize>, CliError> {
        s.split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|e| CliError::Config(format!("graph {spec:?}: {e}"))))
            .collect()
    };
    match spec.split_once(':') {
        Some(("ring", n)) => match sizes(n)?.as_slice() {
            [n] => Ok(build_ring(*n)?),
            _ => Err(CliError::Config(format!("graph {spec:?}: expected ring:N"))),
        },
        Some(("lollipop", n)) => match sizes(n)?.as_slice() {
            [c, p] => Ok(build_lollipop(*c, *p)?),
            _ => Err(CliError::Config(format!("graph {spec:?}: expected lollipop:CLIQUE,PATH"))),
        },
        _ if spec == "ring" => Ok(GraphName::Ring.build()?.0),
        _ if spec == "lollipop" => Ok(GraphName::Lollipop.build()?.0),
        _ => {
            let text = std::fs::read_to_string(spec)
                .map_err(|e| CliError::Io(format!("reading graph {spec}: {e}")))?;
            Ok(SpatialGraph::from_edge_list(&text, false, None)?)
        }
    }
}

fn parse_activation(name: &str) -> Result<Activation, CliError> {
    serde_json::from_value(json!(name)).map_err(|_| {
        CliError::Config(format!("unknown activation {name:?}; expected relu, gelu, tanh or identity"))
    })
}

/// Command default, then the config's `model` section and `seed`, then flags.
fn model_config(
    defaults: ModelConfig,
    flags: &ModelFlags,
    run: &RunConfig,
    nodes: usize,
) -> Result<ModelConfig, CliError> {
    let mut c = resolve(&defaults, run.model.as_ref(), "model")?;
    if let Some(seed) = run.seed {
        c.seed = seed;
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut c.window, flags.window);
    set(&mut c.kernel_size, flags.kernel);
    set(&mut c.hidden_dim, flags.hidden_dim);
    set(&mut c.outer_layers, flags.outer);
    set(&mut c.temporal_layers, flags.temporal_layers);
    set(&mut c.spatial_layers, flags.spatial_layers);
    if let Some(a) = &flags.activation {
        c.activation = parse_activation(a)?;
    }
    if let Some(seed) = flags.seed {
        c.seed = seed;
    }
    c.nodes = nodes;
    c.validate()?;
    Ok(c)
}

fn graph_for(flags: &ModelFlags, run: &RunConfig, default: &str) -> Result<SpatialGraph, CliError> {
    parse_graph(flags.graph.as_deref().or(run.graph.as_deref()).unwrap_or(default))
}

/// What `train` leaves behind and `bounds --checkpoint` reads back.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub graph: String,
    pub params: TensorBundle,
}

fn load_checkpoint(path: &Path) -> Result<Model, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    let directed = ckpt.graph.lines().next().is_some_and(|l| l.contains("directed") && !l.contains("undirected"));
    let nodes = ckpt.config.nodes;
    let graph = SpatialGraph::from_edge_list(&ckpt.graph, directed, Some(nodes))?;
    let mut model = Model::init(ckpt.config, graph)?;
    let mut params = model.params().clone();
    params.load_bundle(&ckpt.params)?;
    model.set_params(params)?;
    Ok(model)
}

fn random_state(model: &Model, seed: u64) -> Array3<f64> {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c.window, c.nodes, c.hidden_dim), |_| rng.gen_range(-1.0..=1.0))
}

pub fn bounds(args: &BoundsArgs, run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let model = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let graph = graph_for(&args.model, run, "ring:8")?;
            let defaults = ModelConfig {
                window: 8,
                hidden_dim: 8,
                outer_layers: 1,
                temporal_layers: 2,
                spatial_layers: 2,
                kernel_size: 2,
                ..ModelConfig::default()
            };
            let config = model_config(defaults, &args.model, run, graph.num_nodes())?;
            Model::init(config, graph)?
        }
    };
    if args.inputs == 0 {
        return Err(CliError::Config("--inputs must be positive".into()));
    }
    let seed = model.config().seed;
    let report = verify_bounds(&model, args.inputs, seed, None)?;
    let dir = OutDir::create(out.to_path_buf())?;
    let mut files = vec![
        dir.write("bounds.csv", report.to_csv())?,
        dir.write_json("bounds.json", &report)?,
    ];
    println!(
        "{} entries, worst slack {:.3e}, fingerprint {}",
        report.entries.len(),
        report.worst_slack,
        &report.fingerprint[..12]
    );
    let costs = json!({
        "naive": complexity_estimate(model.config(), model.graph().num_edges(), CostMode::Naive),
        "optimized": complexity_estimate(model.config(), model.graph().num_edges(), CostMode::Optimized),
    });
    files.push(dir.write_json("cost.json", &costs)?);
    if args.check_factorization {
        let c = model.config().clone();
        let state = random_state(&model, seed ^ 0x5eed);
        let mut worst = 0.0f64;
        for v in 0..c.nodes {
            for j in 0..c.window {
                for u in 0..c.nodes {
                    for i in 0..c.window {
                        worst = worst.max(factorization_check(&model, state.view(), (v, j), (u, i))?);
                    }
                }
            }
        }
        println!("factorization deviation {worst:.3e}");
        files.push(dir.write_json(
            "factorization.json",
            &json!({ "max_deviation": worst, "tolerance": FACTORIZATION_TOLERANCE }),
        )?);
        dir.write_meta("bounds", &files)?;
        if worst > FACTORIZATION_TOLERANCE {
            return Err(CliError::Numeric(format!(
                "factorization deviation {worst:.3e} exceeds {FACTORIZATION_TOLERANCE:e}"
            )));
        }
        return Ok(());
    }
    dir.write_meta("bounds", &files)?;
    Ok(())
}

pub fn experiment(args: &ExperimentArgs, run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let experiment: Experiment = args.name.parse()?;
    let mut options = resolve(&GridOptions::for_experiment(experiment), run.grid.as_ref(), "grid")?;
    if let Some(seed) = run.seed {
        options.first_seed = seed;
    }
    if let Some(jobs) = args.jobs.or(run.jobs) {
        options.jobs = jobs;
    }
    if let Some(v) = args.seeds {
        options.seeds = v;
    }
    if let Some(v) = args.epochs {
        options.epochs = v;
    }
    if let Some(v) = args.max_batches {
        options.max_batches = Some(v);
    }
    if let Some(v) = args.stop_below {
        options.stop_below = Some(v);
    }
    if let Some(v) = &args.depths {
        options.depths = v.0.clone();
    }
    if let Some(v) = &args.kernel {
        options.kernel_sizes = v.clone();
    }
    if let Some(g) = &args.graph {
        let name: GraphName = serde_json::from_value(json!(g))
            .map_err(|_| CliError::Config(format!("unknown graph {g:?}; expected ring or lollipop")))?;
        options.graphs = vec![name];
    }
    let dir = OutDir::create(out.to_path_buf())?;
    let result = run_grid(experiment, &options, Some(dir.path()))?;
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    for g in &result.groups {
        println!("{}", serde_json::to_string(g).map_err(|e| CliError::Io(e.to_string()))?);
    }
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see {}.csv", result.cells.len(), experiment.name());
    }
    let files = [
        dir.path().join(format!("{}.csv", experiment.name())),
        dir.path().join(format!("{}.json", experiment.name())),
    ];
    dir.write_meta(experiment.name(), &files)?;
    Ok(())
}

fn random_batch(model: &Model, size: usize, seed: u64) -> Result<Batch, CliError> {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array4::from_shape_fn((size, c.nodes, c.window, c.input_dim), |_| rng.gen_range(-1.0..=1.0));
    let targets = Array3::from_shape_fn((size, c.nodes, c.output_dim()), |_| rng.gen_range(-1.0..=1.0));
    Ok(Dataset::new(inputs, targets, None)?)
}

pub fn gradcheck(args: &GradcheckArgs, run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let graph = graph_for(&args.model, run, "ring:4")?;
    let defaults = ModelConfig {
        window: 6,
        hidden_dim: 4,
        temporal_layers: 2,
        spatial_layers: 1,
        ..ModelConfig::default()
    };
    let config = model_config(defaults, &args.model, run, graph.num_nodes())?;
    if !(args.step > 0.0) || args.batch == 0 {
        return Err(CliError::Config("--step and --batch must be positive".into()));
    }
    let model = Model::init(config, graph)?;
    let batch = random_batch(&model, args.batch, model.config().seed.wrapping_add(1))?;
    let corrupt = |w: &mut stos_core::engine::Weights| {
        w.readout[0][[0, 0]] += 1.0;
    };
    let hook: Option<&dyn Fn(&mut stos_core::engine::Weights)> = if args.corrupt { Some(&corrupt) } else { None };
    let report = gradient_check(&model, &batch, args.step, hook)?;
    let dir = OutDir::create(out.to_path_buf())?;
    let file = dir.write_json("gradcheck.json", &report)?;
    dir.write_meta("gradcheck", &[file])?;
    println!(
        "max relative error {:.3e} over {} parameters (worst {}[{}])",
        report.max_relative_error, report.parameters, report.worst_tensor, report.worst_index
    );
    if report.passes(args.tolerance) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {:.3e} >= {:e}",
            report.max_relative_error, args.tolerance
        )))
    }
}

/// The `task` section of a run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTask {
    pub kind: TaskKind,
    /// RocketMan hop distance and lag.
    pub k: usize,
    pub i: usize,
    /// RocketMan target node.
    pub target: usize,
    pub sizes: SplitSizes,
}

impl Default for TrainTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::CopyLast,
            k: 0,
            i: 0,
            target: 0,
            sizes: SplitSizes::default(),
        }
    }
}

pub fn train(args: &TrainArgs, run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut task = resolve(&TrainTask::default(), run.task.as_ref(), "task")?;
    if let Some(name) = &args.task {
        task.kind = serde_json::from_value(json!(name))
            .map_err(|_| CliError::Config(format!("unknown task {name:?}")))?;
    }
    task.k = args.k.unwrap_or(task.k);
    task.i = args.i.unwrap_or(task.i);
    let mut schedule = resolve(&TrainSchedule::default(), run.schedule.as_ref(), "schedule")?;
    if let Some(seed) = run.seed {
        schedule.seed = seed;
    }
    if let Some(e) = args.epochs {
        schedule.epochs = e;
    }
    if let Some(b) = args.max_batches {
        schedule.max_batches = Some(b);
    }
    let defaults = ModelConfig {
        hidden_dim: 16,
        kernel_size: 4,
        temporal_layers: 4,
        temporal: TemporalKind::Standard,
        ..ModelConfig::default()
    };
    let (graph, spatial) = match task.kind {
        TaskKind::RocketMan => (graph_for(&args.model, run, "ring")?, true),
        _ => (SpatialGraph::new(1, false, vec![])?, false),
    };
    let mut config = model_config(defaults, &args.model, run, graph.num_nodes())?;
    if !spatial {
        config.spatial_layers = 0;
    }
    config.input_dim = 1;
    config.horizon = 1;
    config.validate()?;
    let data = match task.kind {
        TaskKind::RocketMan => gen_rocketman(&graph, task.k, task.i, task.target, config.window, task.sizes, schedule.seed)?,
        kind => gen_copy(kind, config.window, task.sizes, schedule.seed)?,
    };
    let mut model = Model::init(config, graph.clone())?;
    let history = train_model(&mut model, &data.train, &data.val, &schedule)?;
    let test_mse = evaluate_mse(&model, &data.test, 256)?;
    let dir = OutDir::create(out.to_path_buf())?;
    let ckpt = Checkpoint {
        config: model.config().clone(),
        graph: graph.to_edge_list(),
        params: model.params().to_bundle(),
    };
    let metrics = json!({
        "task": task,
        "schedule": schedule,
        "test_mse": test_mse,
        "success": test_mse < SUCCESS_THRESHOLD,
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss,
        "epochs_run": history.epochs.len(),
        "fingerprint": fingerprint(&model),
    });
    let files: Vec<PathBuf> = vec![
        dir.write_json("checkpoint.json", &ckpt)?,
        dir.write("history.csv", history.to_csv())?,
        dir.write_json("metrics.json", &metrics)?,
    ];
    dir.write_meta("train", &files)?;
    println!("test mse {test_mse:.3e} after {} epochs", history.epochs.len());
    Ok(())
}
