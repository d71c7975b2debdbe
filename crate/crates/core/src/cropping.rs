//! Search-region sampling: optimized random cropping, the legacy fixed-γ
//! cropper, and deterministic template cropping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gda::GdaConfig;
use crate::geometry::{
    center_crop, jitter, practical_min_gamma, shift_to_boundary, BBox, CropKind, CropWindow,
    Direction, JitterParams, MIN_PATCH_SIZE,
};
use crate::mixing::TfmixConfig;
use crate::rng::uniform;

/// Every augmentation knob of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Probability of simulating a boundary sample.
    pub p_boundary: f64,
    pub jitter: JitterParams,
    pub search_out_size: u32,
    pub template_out_size: u32,
    pub template_gamma: f64,
    /// Minimum visible target fraction of boundary samples.
    pub v_min: f64,
    pub max_retries: u32,
    pub gda: GdaConfig,
    pub tfmix: TfmixConfig,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            gamma_min: 2.0,
            gamma_max: 6.0,
            p_boundary: 0.05,
            jitter: JitterParams::default(),
            search_out_size: 256,
            template_out_size: 128,
            template_gamma: 2.0,
            v_min: 0.3,
            max_retries: 20,
            gda: GdaConfig::default(),
            tfmix: TfmixConfig::default(),
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma_min.is_finite() && self.gamma_max.is_finite())
            || self.gamma_min <= 0.0
            || self.gamma_min > self.gamma_max
        {
            return bad(format!(
                "policy: need 0 < gamma_min <= gamma_max, got [{}, {}]",
                self.gamma_min, self.gamma_max
            ));
        }
        if !(0.0..=1.0).contains(&self.p_boundary) {
            return bad(format!("policy.p_boundary {} not in [0, 1]", self.p_boundary));
        }
        self.jitter
            .validate()
            .map_err(|e| Error::Config(format!("policy.jitter: {e}")))?;
        for (name, v) in [
            ("search_out_size", self.search_out_size),
            ("template_out_size", self.template_out_size),
        ] {
            if v < MIN_PATCH_SIZE {
                return bad(format!("policy.{name} {v} below {MIN_PATCH_SIZE}"));
            }
        }
        if !self.template_gamma.is_finite() || self.template_gamma <= 0.0 {
            return bad(format!("policy.template_gamma {} must be > 0", self.template_gamma));
        }
        if !(self.v_min > 0.0 && self.v_min < 1.0) {
            return bad(format!("policy.v_min {} not in (0, 1)", self.v_min));
        }
        if self.max_retries < 1 {
            return bad("policy.max_retries must be >= 1".into());
        }
        self.gda.validate()?;
        self.tfmix.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropOutcome {
    pub window: CropWindow,
    pub gamma: f64,
    pub kind: CropKind,
    /// Rejected jitter draws (normal kind) or infeasible boundary attempts.
    pub retries_used: u32,
    /// The jittered box the window is centered on, when one was drawn.
    pub jittered: Option<BBox>,
    pub direction: Option<Direction>,
}

/// Optimized random cropping.
///
/// Draw order: γ, boundary coin, then either the boundary branch or the
/// jitter/reject loop. Normal-kind windows always contain the target
/// center.
pub fn orc_sample<R: Rng + ?Sized>(
    target: &BBox,
    policy: &AugPolicy,
    rng: &mut R,
) -> Result<CropOutcome> {
    target.validate()?;
    let mut gamma = uniform(rng, policy.gamma_min, policy.gamma_max);
    let coin: f64 = rng.random();
    if coin < policy.p_boundary {
        for attempt in 0..policy.max_retries {
            if attempt > 0 {
                gamma = uniform(rng, policy.gamma_min, policy.gamma_max);
            }
            let crop = center_crop(target, gamma)?;
            let direction = Direction::random(rng);
            match shift_to_boundary(&crop, target, direction, policy.v_min, rng) {
                Ok(window) => {
                    return Ok(CropOutcome {
                        window,
                        gamma,
                        kind: CropKind::Boundary,
                        retries_used: attempt,
                        jittered: None,
                        direction: Some(direction),
                    })
                }
                Err(Error::InfeasibleBoundary(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    for attempt in 0..policy.max_retries {
        let b_jit = jitter(target, &policy.jitter, rng)?;
        let gamma_p = practical_min_gamma(target, &b_jit, policy.gamma_min)?;
        if gamma_p <= policy.gamma_max {
            let gamma = uniform(rng, gamma_p, policy.gamma_max);
            let window = center_crop(&b_jit, gamma)?;
            return Ok(CropOutcome {
                window,
                gamma,
                kind: CropKind::Normal,
                retries_used: attempt,
                jittered: Some(b_jit),
                direction: None,
            });
        }
    }

    let gamma = uniform(rng, policy.gamma_min, policy.gamma_max);
    Ok(CropOutcome {
        window: center_crop(target, gamma)?,
        gamma,
        kind: CropKind::Normal,
        retries_used: policy.max_retries,
        jittered: None,
        direction: None,
    })
}

/// Fixed-γ cropping around a jittered box, with no rejection step.
pub fn legacy_sample<R: Rng + ?Sized>(
    target: &BBox,
    gamma_fix: f64,
    jitter_params: &JitterParams,
    rng: &mut R,
) -> Result<CropOutcome> {
    let b_jit = jitter(target, jitter_params, rng)?;
    let mut window = center_crop(&b_jit, gamma_fix)?;
    window.kind = CropKind::Legacy;
    Ok(CropOutcome {
        window,
        gamma: gamma_fix,
        kind: CropKind::Legacy,
        retries_used: 0,
        jittered: Some(b_jit),
        direction: None,
    })
}

pub fn template_crop(target: &BBox, policy: &AugPolicy) -> Result<CropOutcome> {
    let mut window = center_crop(target, policy.template_gamma)?;
    window.kind = CropKind::Template;
    Ok(CropOutcome {
        window,
        gamma: policy.template_gamma,
        kind: CropKind::Template,
        retries_used: 0,
        jittered: None,
        direction: None,
    })
}

/// Search-side cropping strategy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Cropper {
    /// Optimized random cropping driven by the policy's γ range.
    #[default]
    Orc,
    Legacy { gamma_fix: f64 },
}

impl Cropper {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        target: &BBox,
        policy: &AugPolicy,
        rng: &mut R,
    ) -> Result<CropOutcome> {
        match *self {
            Cropper::Orc => orc_sample(target, policy, rng),
            Cropper::Legacy { gamma_fix } => legacy_sample(target, gamma_fix, &policy.jitter, rng),
        }
    }
}
