use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Logarithmic,
    Gaussian,
}

/// Distance-to-reward shaping `f(d / sigma)`. Both kernels give `f(0) = 0`
/// and decrease strictly in `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: KernelKind::Logarithmic,
            sigma: 1.0,
        }
    }
}

impl KernelSpec {
    pub fn new(kind: KernelKind, sigma: f64) -> Result<Self> {
        let k = KernelSpec { kind, sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Logarithmic: `-ln(1 + d / sigma)`; Gaussian: `exp(-(d / sigma)^2 / 2) - 1`.
    pub fn eval(&self, d: f64) -> f64 {
        let x = d / self.sigma;
        match self.kind {
            KernelKind::Logarithmic => -x.ln_1p(),
            KernelKind::Gaussian => (-0.5 * x * x).exp_m1(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LOG1: KernelSpec = KernelSpec {
        kind: KernelKind::Logarithmic,
        sigma: 1.0,
    };
    const GAUSS1: KernelSpec = KernelSpec {
        kind: KernelKind::Gaussian,
        sigma: 1.0,
    };

    #[test]
    fn log_kernel_values() {
        assert_eq!(LOG1.eval(0.0), 0.0);
        assert!((LOG1.eval(std::f64::consts::E - 1.0) + 1.0).abs() < 1e-15);
        assert!((LOG1.eval(2.0) + 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_tail_is_bounded_log_tail_is_not() {
        assert_eq!(GAUSS1.eval(0.0), 0.0);
        assert!((GAUSS1.eval(1e6) + 1.0).abs() < 1e-15);
        assert!(LOG1.eval(10.0).abs() > GAUSS1.eval(10.0).abs());
        assert!(LOG1.eval(1e6) < -13.0);
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(KernelSpec::new(KernelKind::Gaussian, 0.0)
            .unwrap_err()
            .is_config());
        assert!(KernelSpec::new(KernelKind::Logarithmic, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn strictly_decreasing_on_sphere_range(a in 0.0f64..2.0, b in 0.0f64..2.0, sigma in 0.1f64..5.0, gauss in any::<bool>()) {
            prop_assume!((a - b).abs() > 1e-6);
            // The Gaussian saturates to -1 in floating point once d / sigma is large.
            let (kind, sigma) = if gauss { (KernelKind::Gaussian, sigma.max(0.5)) } else { (KernelKind::Logarithmic, sigma) };
            let k = KernelSpec { kind, sigma };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(k.eval(lo) > k.eval(hi));
        }

        #[test]
        fn graded_signal_bound(d1 in 0.0f64..2.0, gap in 1e-3f64..1.0, sigma in 0.05f64..5.0) {
            let d2 = (d1 + gap).min(2.0);
            prop_assume!(d2 > d1);
            let k = KernelSpec { kind: KernelKind::Logarithmic, sigma };
            let diff = k.eval(d1) - k.eval(d2);
            prop_assert!(diff >= ((sigma + d2) / (sigma + d1)).ln() * (1.0 - 1e-12));
            prop_assert!(diff > 0.0);
        }
    }

    #[test]
    fn gaussian_plateaus_far_from_experts() {
        let k = KernelSpec {
            kind: KernelKind::Gaussian,
            sigma: 0.1,
        };
        assert!((k.eval(1.5) - k.eval(2.0)).abs() < 1e-12);
        let l = KernelSpec {
            kind: KernelKind::Logarithmic,
            sigma: 0.1,
        };
        assert!(l.eval(1.5) - l.eval(2.0) > 0.2);
    }
}
