//! Link functions for binary regression.
//!
//! The GEV link maps a default probability μ to the linear predictor through
//! the GEV quantile function, η = ((−ln μ)^(−τ) − 1)/τ. Its inverse is the GEV
//! cdf, PD = exp(−(1 + τη)^(−1/τ)), which is asymmetric around 0.5. The τ → 0
//! limit is the log-log (Gumbel) link, PD = exp(−exp(−η)).
//!
//! All probabilities leaving this module are clamped to `[ε, 1 − ε]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability clamp.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// |τ| below this is redirected to the log-log link by [`LinkSpec::gev`].
pub const GUMBEL_REDIRECT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinkKind {
    Logit,
    LogLog,
    Gev { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    #[serde(flatten)]
    pub kind: LinkKind,
    pub epsilon: f64,
}

impl LinkSpec {
    pub fn logit() -> Self {
        Self {
            kind: LinkKind::Logit,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn loglog() -> Self {
        Self {
            kind: LinkKind::LogLog,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// GEV link with tail parameter `tau`. Values with |τ| < 10⁻³ are
    /// redirected to the log-log link.
    pub fn gev(tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be finite, got {tau}")));
        }
        if tau.abs() < GUMBEL_REDIRECT {
            return Ok(Self::loglog());
        }
        Self::gev_exact(tau)
    }

    /// GEV link without the log-log redirect; only τ = 0 is rejected.
    pub fn gev_exact(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "GEV tail parameter must be finite and non-zero, got {tau}"
            )));
        }
        Ok(Self {
            kind: LinkKind::Gev { tau },
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1e-4) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1e-4), got {epsilon}"
            )));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    /// Checks the invariants of a spec built outside the constructors
    /// (e.g. deserialized).
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1e-4) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1e-4), got {}",
                self.epsilon
            )));
        }
        if let LinkKind::Gev { tau } = self.kind {
            if !tau.is_finite() || tau == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "GEV tail parameter must be finite and non-zero, got {tau}"
                )));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> Option<f64> {
        match self.kind {
            LinkKind::Gev { tau } => Some(tau),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            LinkKind::Logit => "logit".to_string(),
            LinkKind::LogLog => "loglog".to_string(),
            LinkKind::Gev { tau } => format!("gev(tau={tau})"),
        }
    }

    #[inline]
    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }

    /// True when 1 + τη > 0 (always true for logit and log-log).
    #[inline]
    pub fn in_support(&self, eta: f64) -> bool {
        match self.kind {
            LinkKind::Gev { tau } => eta.is_finite() && 1.0 + tau * eta > 0.0,
            _ => eta.is_finite(),
        }
    }

    /// μ ↦ η. Inputs outside `[ε, 1 − ε]` are clamped first.
    pub fn forward(&self, mu: f64) -> f64 {
        let mu = self.clamp(mu);
        match self.kind {
            LinkKind::Logit => mu.ln() - (-mu).ln_1p(),
            LinkKind::LogLog => -(-mu.ln()).ln(),
            LinkKind::Gev { tau } => {
                let t = -mu.ln();
                (-tau * t.ln()).exp_m1() / tau
            }
        }
    }

    /// η ↦ PD, clamped to `[ε, 1 − ε]`. Outside the GEV support the cdf
    /// saturates at its endpoint value.
    pub fn inverse(&self, eta: f64) -> f64 {
        let p = match self.kind {
            LinkKind::Logit => logistic(eta),
            LinkKind::LogLog => (-(-eta).exp()).exp(),
            LinkKind::Gev { tau } => {
                if 1.0 + tau * eta <= 0.0 {
                    if tau < 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let t = (-(tau * eta).ln_1p() / tau).exp();
                    (-t).exp()
                }
            }
        };
        self.clamp(p)
    }

    /// dPD/dη. Fails at or beyond the GEV support boundary.
    pub fn dmu_deta(&self, eta: f64) -> Result<f64> {
        match self.kind {
            LinkKind::Logit => {
                let e = (-eta.abs()).exp();
                Ok(e / ((1.0 + e) * (1.0 + e)))
            }
            LinkKind::LogLog => {
                let t = (-eta).exp();
                Ok(t * (-t).exp())
            }
            LinkKind::Gev { tau } => {
                let a = 1.0 + tau * eta;
                if !(a > 0.0) {
                    return Err(Error::OutsideSupport { eta });
                }
                let t = (-(tau * eta).ln_1p() / tau).exp();
                Ok((-t).exp() * t / a)
            }
        }
    }
}

#[inline]
fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}
