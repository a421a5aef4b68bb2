use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative; ReLU uses the subgradient 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    /// `(f(x), f'(x))` sharing the transcendental evaluations.
    #[inline]
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let cdf = std_normal_cdf(x);
                (x * cdf, cdf + x * std_normal_pdf(x))
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            _ => (self.apply(x), self.derivative(x)),
        }
    }

    /// `sup |f'|`, the constant that enters the sensitivity bounds.
    pub fn derivative_bound(self) -> f64 {
        match self {
            Activation::Relu | Activation::Identity | Activation::Tanh => 1.0,
            Activation::Gelu => gelu_derivative_bound(),
        }
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Maximum of `|GELU'|` over a dense grid on `[-10, 10]`.
///
/// The grid maximum sits at `x ~ sqrt(2)`; the result is rounded up by one
/// part in 1e9 so that it remains an upper bound between grid points.
pub fn gelu_derivative_bound() -> f64 {
    static BOUND: OnceLock<f64> = OnceLock::new();
    *BOUND.get_or_init(|| {
        const POINTS: usize = 2_000_001;
        let step = 20.0 / (POINTS - 1) as f64;
        let max = (0..POINTS)
            .map(|k| Activation::Gelu.derivative(-10.0 + k as f64 * step).abs())
            .fold(0.0, f64::max);
        max * (1.0 + 1e-9)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_bound_value() {
        let c = gelu_derivative_bound();
        assert!((c - 1.1290).abs() < 1e-3, "{c}");
        // the analytic maximiser is x = sqrt(2)
        let peak = Activation::Gelu.derivative(2f64.sqrt());
        assert!(peak <= c && c - peak < 1e-8);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh, Activation::Identity] {
            for &x in &[-3.0, -0.7, 0.1, 1.3, 4.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(2.0), 1.0);
    }

    #[test]
    fn fused_evaluation_matches() {
        for act in [Activation::Relu, Activation::Gelu, Activation::Identity, Activation::Tanh] {
            for k in -40..=40 {
                let x = k as f64 * 0.17;
                let (y, dy) = act.apply_with_derivative(x);
                assert_eq!(y, act.apply(x));
                assert!((dy - act.derivative(x)).abs() <= 1e-15, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn bounds_dominate_derivatives() {
        for act in [Activation::Relu, Activation::Gelu, Activation::Identity, Activation::Tanh] {
            let c = act.derivative_bound();
            for k in -400..=400 {
                let x = k as f64 * 0.025;
                assert!(act.derivative(x).abs() <= c);
            }
        }
    }
}
