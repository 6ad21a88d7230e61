//! Ventricle pixel-weighting term: rewards warped ventricle voxels that
//! fall on dark fluid (lumen) or bright choroid plexus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::LABEL_PLEXUS;
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PTermParams {
    pub c1: f64,
    pub c2: f64,
    pub i_low: f64,
    pub i_high: f64,
}

/// Offsets of the intensity thresholds at a mean intensity of 100.
pub const I_LOW_AT_100: f64 = 85.0;
pub const I_HIGH_AT_100: f64 = 115.0;

impl PTermParams {
    /// Defaults with thresholds shifted by the mean of non-zero voxels.
    pub fn for_mean(i_mean: f64) -> Self {
        Self {
            c1: 0.02,
            c2: 0.25,
            i_low: I_LOW_AT_100 + (i_mean - 100.0),
            i_high: I_HIGH_AT_100 + (i_mean - 100.0),
        }
    }

    pub fn for_volume(us: &Volume) -> Result<Self> {
        Ok(Self::for_mean(us.nonzero_mean()?))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i_low < self.i_high) || !(self.c1 > 0.0) || !self.c2.is_finite() {
            return Err(Error::InvalidArgument("P term needs i_low < i_high and c1 > 0".into()));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.i_low + self.i_high)
    }

    /// Hinge deviation of one voxel with intensity `i`; `lumen` selects the
    /// hypoechoic branch.
    #[inline]
    pub fn deviation(&self, i: f64, lumen: bool) -> f64 {
        if lumen {
            (self.i_low - i).max(0.0)
        } else {
            (i - self.i_high).max(0.0)
        }
    }
}

/// How voxels are split into hypoechoic and hyperechoic classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// Lumen and plexus sub-labels carried by the atlas.
    #[default]
    SubLabels,
    /// Intensity below the midpoint of `i_low` and `i_high` counts as lumen.
    Midpoint,
}

impl EpsilonRule {
    /// Sub-labels when the label actually distinguishes plexus, midpoint otherwise.
    pub fn for_label(label: &LabelMap) -> Self {
        if label.data.iter().any(|&v| v == LABEL_PLEXUS) {
            EpsilonRule::SubLabels
        } else {
            EpsilonRule::Midpoint
        }
    }

    #[inline]
    pub fn is_lumen(&self, label: u8, intensity: f64, p: &PTermParams) -> bool {
        match self {
            EpsilonRule::SubLabels => label != LABEL_PLEXUS,
            EpsilonRule::Midpoint => intensity < p.midpoint(),
        }
    }
}

/// Running sums for the P term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PSums {
    pub count: f64,
    pub deviation: f64,
}

impl PSums {
    #[inline]
    pub fn add(&mut self, label: u8, intensity: f64, p: &PTermParams, rule: EpsilonRule, sign: f64) {
        if label == 0 {
            return;
        }
        self.count += sign;
        self.deviation += sign * p.deviation(intensity, rule.is_lumen(label, intensity, p));
    }

    pub fn value(&self, p: &PTermParams) -> Result<f64> {
        if self.count < 0.5 {
            return Err(Error::EmptyLabel);
        }
        Ok((p.c1 * self.deviation + p.c2) / self.count)
    }
}

/// `P = (C₁ Σᵢ dᵢ + C₂) / N` over the `N` voxels of `warped_label`.
pub fn p_term(us: &Volume, warped_label: &LabelMap, p: &PTermParams, rule: EpsilonRule) -> Result<f64> {
    if us.grid != warped_label.grid {
        return Err(Error::GridMismatch("P term label must share the ultrasound grid".into()));
    }
    let mut sums = PSums::default();
    for (idx, &l) in warped_label.data.iter().enumerate() {
        sums.add(l, us.data[idx] as f64, p, rule, 1.0);
    }
    sums.value(p)
}

/// `P·(V_k / V_M)^¼`, penalizing labels smaller than the bank mean.
pub fn p_adjust(p: f64, label_volume: f64, mean_label_volume: f64) -> Result<f64> {
    if !(label_volume > 0.0) || !(mean_label_volume > 0.0) {
        return Err(Error::InvalidArgument("label volumes must be positive".into()));
    }
    Ok(p * (label_volume / mean_label_volume).powf(0.25))
}
