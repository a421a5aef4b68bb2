//! Temporal topology operators.
//!
//! Every operator is a `T x T` lower-triangular matrix. Index `i` stands for
//! time step `t - i`, so row 0 is the most recent observation and entry
//! `(i, j)` weights the edge carrying information from input step `t - i` to
//! output step `t - j`. Column 0 therefore describes what the readout step
//! sees.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_lower_triangular, matrix_power};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("window length must be at least 1")]
    InvalidSize,
    #[error("kernel size {kernel} is invalid for window length {window}")]
    InvalidKernel { kernel: usize, window: usize },
    #[error("expected {expected} coefficients, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("row {row} sums to zero and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("operator sizes differ: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("matrix is not square and lower-triangular")]
    NotCausal,
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Shift,
    CausalBand,
    DilatedBand,
    RowNormalized,
    General,
}

/// A causal temporal operator together with its structural metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalOperator {
    kind: OperatorKind,
    kernel_size: Option<usize>,
    dilation: Option<usize>,
    coefficients: Option<Vec<f64>>,
    entries: Array2<f64>,
}

/// One nonzero lower diagonal of an operator, as consumed by a convolution.
///
/// `coeffs[j]` is the entry `(j + offset, j)`, i.e. the weight with which input
/// step `t - j - offset` enters output step `t - j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub offset: usize,
    pub kernel: usize,
    pub coeffs: Vec<f64>,
}

impl Tap {
    /// Whether every coefficient on this diagonal is the same value.
    pub fn uniform(&self) -> Option<f64> {
        let first = *self.coeffs.first()?;
        self.coeffs.iter().all(|&c| c == first).then_some(first)
    }
}

impl TemporalOperator {
    /// Wraps an arbitrary lower-triangular matrix.
    pub fn from_matrix(entries: Array2<f64>) -> Result<Self, TopologyError> {
        if entries.nrows() == 0 {
            return Err(TopologyError::InvalidSize);
        }
        if !is_lower_triangular(&entries) {
            return Err(TopologyError::NotCausal);
        }
        Ok(Self {
            kind: OperatorKind::General,
            kernel_size: None,
            dilation: None,
            coefficients: None,
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn kernel_size(&self) -> Option<usize> {
        self.kernel_size
    }

    pub fn dilation(&self) -> Option<usize> {
        self.dilation
    }

    /// Toeplitz coefficients `r_0..r_{P-1}`, when the operator has them.
    pub fn coefficients(&self) -> Option<&[f64]> {
        self.coefficients.as_deref()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn is_toeplitz(&self) -> bool {
        let n = self.size();
        (0..n).all(|offset| {
            let first = self.entries[[offset, 0]];
            (1..n - offset).all(|j| self.entries[[j + offset, j]] == first)
        })
    }

    /// Number of distinct kernel matrices a convolution over this operator uses.
    pub fn kernel_count(&self) -> usize {
        match self.kind {
            OperatorKind::Shift => 2,
            OperatorKind::General => self.size(),
            _ => self.kernel_size.unwrap_or(self.size()),
        }
    }

    fn kernel_index(&self, offset: usize) -> usize {
        offset / self.dilation.unwrap_or(1)
    }

    /// Nonzero lower diagonals, ordered by offset.
    pub fn taps(&self) -> Vec<Tap> {
        let n = self.size();
        (0..n)
            .filter_map(|offset| {
                let coeffs: Vec<f64> = (0..n - offset)
                    .map(|j| self.entries[[j + offset, j]])
                    .collect();
                coeffs.iter().any(|&c| c != 0.0).then(|| Tap {
                    offset,
                    kernel: self.kernel_index(offset),
                    coeffs,
                })
            })
            .collect()
    }

    /// Largest offset with a nonzero entry (the one-layer receptive reach).
    pub fn reach(&self) -> usize {
        self.taps().last().map_or(0, |t| t.offset)
    }

    /// Row-major CSV with a header row; values carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.entries)
    }

    pub fn to_export(&self) -> MatrixExport {
        MatrixExport::new(self.kind, &self.entries)
    }
}

/// JSON shape for exported operators and receptive-field matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixExport {
    pub size: usize,
    pub kind: OperatorKind,
    pub entries: Vec<Vec<f64>>,
}

impl MatrixExport {
    pub fn new(kind: OperatorKind, m: &Array2<f64>) -> Self {
        Self {
            size: m.nrows(),
            kind,
            entries: m.outer_iter().map(|row| row.to_vec()).collect(),
        }
    }
}

pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::from("row");
    for j in 0..m.ncols() {
        let _ = write!(out, ",col_{j}");
    }
    out.push('\n');
    for (i, row) in m.outer_iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Backward shift operator: entry `(i, j)` is 1 iff `i - j = 1`.
pub fn build_shift(window: usize) -> Result<TemporalOperator, TopologyError> {
    if window == 0 {
        return Err(TopologyError::InvalidSize);
    }
    let entries = Array2::from_shape_fn((window, window), |(i, j)| {
        if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    Ok(TemporalOperator {
        kind: OperatorKind::Shift,
        kernel_size: None,
        dilation: None,
        coefficients: None,
        entries,
    })
}

/// Causal Toeplitz band `R = sum_p r_p T^p` with kernel size `P`.
///
/// Coefficients default to ones, which gives the standard causal convolution.
pub fn build_causal(
    window: usize,
    kernel: usize,
    coeffs: Option<&[f64]>,
) -> Result<TemporalOperator, TopologyError> {
    if window == 0 {
        return Err(TopologyError::InvalidSize);
    }
    if kernel == 0 || kernel > window {
        return Err(TopologyError::InvalidKernel { kernel, window });
    }
    let coefficients = match coeffs {
        Some(c) if c.len() != kernel => {
            return Err(TopologyError::Arity {
                expected: kernel,
                got: c.len(),
            })
        }
        Some(c) => c.to_vec(),
        None => vec![1.0; kernel],
    };
    let entries = Array2::from_shape_fn((window, window), |(i, j)| {
        if i >= j && i - j < kernel {
            coefficients[i - j]
        } else {
            0.0
        }
    });
    Ok(TemporalOperator {
        kind: OperatorKind::CausalBand,
        kernel_size: Some(kernel),
        dilation: Some(1),
        coefficients: Some(coefficients),
        entries,
    })
}

/// Dilation used by layer `layer` (1-based) when the rate resets every `reset` layers.
pub fn dilation_rate(kernel: usize, layer: usize, reset: usize) -> Option<usize> {
    kernel.checked_pow(((layer - 1) % reset) as u32)
}

/// Dilated causal band for layer `layer` with `d = P^((layer - 1) mod reset)`.
///
/// Taps that fall outside the window are dropped, so once `d >= T` the operator
/// degenerates to the identity.
pub fn build_dilated(
    window: usize,
    kernel: usize,
    layer: usize,
    reset: usize,
) -> Result<TemporalOperator, TopologyError> {
    if window == 0 {
        return Err(TopologyError::InvalidSize);
    }
    if kernel == 0 {
        return Err(TopologyError::InvalidKernel { kernel, window });
    }
    if layer == 0 || reset == 0 {
        return Err(TopologyError::Precondition(
            "layer index and reset period must be at least 1".into(),
        ));
    }
    // An overflowing rate behaves like any rate beyond the window.
    let dilation = dilation_rate(kernel, layer, reset).unwrap_or(usize::MAX);
    let entries = Array2::from_shape_fn((window, window), |(i, j)| {
        if i < j {
            return 0.0;
        }
        let gap = i - j;
        let on_tap = if gap == 0 {
            true
        } else {
            gap % dilation == 0 && gap / dilation < kernel
        };
        if on_tap {
            1.0
        } else {
            0.0
        }
    });
    Ok(TemporalOperator {
        kind: OperatorKind::DilatedBand,
        kernel_size: Some(kernel),
        dilation: Some(dilation),
        coefficients: Some(vec![1.0; kernel]),
        entries,
    })
}

/// `diag(R 1)^{-1} R`: every row divided by its sum.
pub fn row_normalize(op: &TemporalOperator) -> Result<TemporalOperator, TopologyError> {
    let mut entries = op.entries.clone();
    for (row, mut values) in entries.outer_iter_mut().enumerate() {
        let sum = values.sum();
        if sum == 0.0 {
            return Err(TopologyError::ZeroRow { row });
        }
        values.mapv_inplace(|v| v / sum);
    }
    Ok(TemporalOperator {
        kind: OperatorKind::RowNormalized,
        kernel_size: op.kernel_size,
        dilation: op.dilation,
        coefficients: None,
        entries,
    })
}

pub fn power(op: &TemporalOperator, exponent: usize) -> Array2<f64> {
    matrix_power(&op.entries, exponent)
}

/// Receptive-field matrix of a layer stack, `R^(1) R^(2) ... R^(L)`.
///
/// Entry `(i, j)` sums over every path from input step `t - i` through the
/// first layer, then the second, and so on up to output step `t - j`.
pub fn layer_product(ops: &[TemporalOperator]) -> Result<Array2<f64>, TopologyError> {
    let (first, rest) = ops
        .split_first()
        .ok_or_else(|| TopologyError::Precondition("empty layer stack".into()))?;
    let mut acc = first.entries.clone();
    for op in rest {
        if op.size() != first.size() {
            return Err(TopologyError::DimensionMismatch {
                expected: first.size(),
                got: op.size(),
            });
        }
        acc = acc.dot(&op.entries);
    }
    Ok(acc)
}

/// Column `j` of a receptive-field matrix: influence of every input step on
/// output step `t - j`.
pub fn receptive_column(m: &Array2<f64>, j: usize) -> Result<Array1<f64>, TopologyError> {
    if j >= m.ncols() {
        return Err(TopologyError::IndexOutOfRange {
            index: j,
            size: m.ncols(),
        });
    }
    Ok(m.column(j).to_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSample {
    pub depth: usize,
    /// `|(R^l)_{j0} / (R^l)_{i0}|`, or `None` when either entry vanishes.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioDecay {
    pub slope: f64,
    pub samples: Vec<RatioSample>,
}

/// Fits the log-log decay of `|(R^l)_{j0} / (R^l)_{i0}|` over `depths`.
///
/// The least-squares fit uses only the upper half of the depth range, where
/// the leading-order term dominates.
pub fn ratio_decay_estimate(
    kernel: usize,
    coeffs: Option<&[f64]>,
    i: usize,
    j: usize,
    depths: RangeInclusive<usize>,
) -> Result<RatioDecay, TopologyError> {
    if i <= j {
        return Err(TopologyError::Precondition(format!(
            "need i > j, got i={i}, j={j}"
        )));
    }
    if kernel < 2 {
        return Err(TopologyError::Precondition("need kernel size >= 2".into()));
    }
    if let Some(c) = coeffs {
        if c.len() == kernel && (c[0] == 0.0 || c[1] == 0.0) {
            return Err(TopologyError::Precondition(
                "need r_0 != 0 and r_1 != 0".into(),
            ));
        }
    }
    let (lo, hi) = (*depths.start(), *depths.end());
    if lo == 0 || hi < lo {
        return Err(TopologyError::Precondition(format!(
            "invalid depth range {lo}..={hi}"
        )));
    }
    // Column 0 entries up to row i only depend on the leading (i+1)x(i+1) block.
    let window = (i + 1).max(kernel);
    let r = build_causal(window, kernel, coeffs)?;

    let mut samples = Vec::with_capacity(hi - lo + 1);
    let mut column = Array1::<f64>::zeros(window);
    column[0] = 1.0;
    // column <- R^l e_0, advanced one layer at a time
    let entries = r.entries();
    for depth in 1..=hi {
        column = entries.dot(&column);
        if depth < lo {
            continue;
        }
        let (num, den) = (column[j], column[i]);
        let ratio = (num != 0.0 && den != 0.0 && num.is_finite() && den.is_finite())
            .then(|| (num / den).abs());
        samples.push(RatioSample { depth, ratio });
    }

    let mid = lo + (hi - lo) / 2;
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.depth >= mid)
        .filter_map(|s| s.ratio.map(|r| ((s.depth as f64).ln(), r.ln())))
        .collect();
    let slope = ols_slope(&points).ok_or_else(|| {
        TopologyError::Precondition("fewer than two defined ratios in the fitted range".into())
    })?;
    Ok(RatioDecay { slope, samples })
}

fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
