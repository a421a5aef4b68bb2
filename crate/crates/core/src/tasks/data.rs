use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::engine::Dataset;
use crate::spatial::SpatialGraph;

/// Test MSE below which a run counts as solving the task.
pub const SUCCESS_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopyFirst,
    CopyLast,
    RocketMan,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CopyFirst => "copy_first",
            TaskKind::CopyLast => "copy_last",
            TaskKind::RocketMan => "rocket_man",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 20_000,
            val: 320,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn split<F>(sizes: SplitSizes, seed: u64, mut make: F) -> Result<TaskData, TaskError>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Result<Dataset, TaskError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TaskData {
        train: make(&mut rng, sizes.train)?,
        val: make(&mut rng, sizes.val)?,
        test: make(&mut rng, sizes.test)?,
    })
}

/// Single-node sequences of i.i.d. uniform values. Inputs are
/// `[sample, 1, lag, 1]` with lag 0 the most recent value; the target is the
/// value at lag `T - 1` (CopyFirst) or lag 0 (CopyLast).
pub fn gen_copy(kind: TaskKind, window: usize, sizes: SplitSizes, seed: u64) -> Result<TaskData, TaskError> {
    let lag = match kind {
        TaskKind::CopyFirst => window.checked_sub(1).ok_or(TaskError::Invalid("window must be positive".into()))?,
        TaskKind::CopyLast => 0,
        TaskKind::RocketMan => {
            return Err(TaskError::Invalid("gen_copy handles the copy tasks only".into()))
        }
    };
    split(sizes, seed, |rng, count| {
        let x = Array4::from_shape_fn((count, 1, window, 1), |_| rng.gen::<f64>());
        let y = Array3::from_shape_fn((count, 1, 1), |(s, _, _)| x[[s, 0, lag, 0]]);
        Ok(Dataset::new(x, y, None)?)
    })
}

/// Per-node uniform sequences; node `target`'s label is the mean of the
/// values at lag `i` over the nodes exactly `k` hops away, and only that node
/// enters the loss.
pub fn gen_rocketman(
    graph: &SpatialGraph,
    k: usize,
    i: usize,
    target: usize,
    window: usize,
    sizes: SplitSizes,
    seed: u64,
) -> Result<TaskData, TaskError> {
    if i >= window {
        return Err(TaskError::Invalid(format!("temporal distance {i} needs a window longer than {window}")));
    }
    let sources: Vec<usize> = graph.k_hop_set(target, k)?.into_iter().collect();
    if sources.is_empty() {
        return Err(TaskError::EmptyNeighbourhood { k, node: target });
    }
    let n = graph.num_nodes();
    split(sizes, seed, |rng, count| {
        let x = Array4::from_shape_fn((count, n, window, 1), |_| rng.gen::<f64>());
        let mut y = Array3::zeros((count, n, 1));
        for s in 0..count {
            let sum: f64 = sources.iter().map(|&u| x[[s, u, i, 0]]).sum();
            y[[s, target, 0]] = sum / sources.len() as f64;
        }
        let mask = Array2::from_shape_fn((count, n), |(_, v)| v == target);
        Ok(Dataset::new(x, y, Some(mask))?)
    })
}

/// Percentage of runs whose test MSE is below [`SUCCESS_THRESHOLD`].
pub fn evaluate_success(test_mse: &[f64]) -> Result<f64, TaskError> {
    if test_mse.is_empty() {
        return Err(TaskError::Invalid("no runs to evaluate".into()));
    }
    let solved = test_mse.iter().filter(|&&m| m < SUCCESS_THRESHOLD).count();
    Ok(100.0 * solved as f64 / test_mse.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::build_ring;

    fn small() -> SplitSizes {
        SplitSizes {
            train: 50,
            val: 10,
            test: 500,
        }
    }

    #[test]
    fn copy_targets_and_baseline() {
        let first = gen_copy(TaskKind::CopyFirst, 16, small(), 3).unwrap();
        let last = gen_copy(TaskKind::CopyLast, 16, small(), 3).unwrap();
        assert_eq!(first.train.inputs, last.train.inputs);
        assert_eq!(first.train.targets[[4, 0, 0]], first.train.inputs[[4, 0, 15, 0]]);
        assert_eq!(last.train.targets[[4, 0, 0]], last.train.inputs[[4, 0, 0, 0]]);
        let baseline = first.test.targets.mapv(|y| (y - 0.5) * (y - 0.5)).mean().unwrap();
        assert!((0.075..=0.092).contains(&baseline), "{baseline}");

        let a = gen_copy(TaskKind::CopyFirst, 1, small(), 9).unwrap();
        let b = gen_copy(TaskKind::CopyLast, 1, small(), 9).unwrap();
        assert_eq!(a.train.targets, b.train.targets);
        assert_eq!(a, gen_copy(TaskKind::CopyFirst, 1, small(), 9).unwrap());
    }

    #[test]
    fn rocketman_labels() {
        let ring = build_ring(16).unwrap();
        let d = gen_rocketman(&ring, 3, 2, 0, 9, small(), 1).unwrap();
        let x = &d.train.inputs;
        for s in 0..5 {
            let expected = (x[[s, 3, 2, 0]] + x[[s, 13, 2, 0]]) / 2.0;
            assert_eq!(d.train.targets[[s, 0, 0]], expected);
        }
        let mask = d.train.mask.as_ref().unwrap();
        assert!(mask[[0, 0]] && !mask[[0, 1]]);

        let own = gen_rocketman(&ring, 0, 0, 0, 9, small(), 1).unwrap();
        assert_eq!(own.val.targets[[2, 0, 0]], own.val.inputs[[2, 0, 0, 0]]);
        let anti = gen_rocketman(&ring, 8, 4, 0, 9, small(), 1).unwrap();
        assert_eq!(anti.test.targets[[7, 0, 0]], anti.test.inputs[[7, 8, 4, 0]]);
        assert!(matches!(
            gen_rocketman(&ring, 9, 0, 0, 9, small(), 1),
            Err(TaskError::EmptyNeighbourhood { .. })
        ));
    }

    #[test]
    fn success_rates() {
        assert!((evaluate_success(&[0.0005, 0.002, 0.0009]).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(evaluate_success(&[0.0833; 4]).unwrap(), 0.0);
        assert_eq!(evaluate_success(&[0.0; 3]).unwrap(), 100.0);
        assert!(evaluate_success(&[]).is_err());
    }
}
