//! Guards applied to every payload before execution: speed-and-separation
//! monitoring (`S = K T + C`), a stiffness cap for fragile objects, and a
//! speed cap when a human is in the workspace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impedance::{fallback_payload, ImpedancePayload};
use crate::perception::NormalizedDescriptor;
use crate::scenario_db::{Fragility, HumanPresence, NominalSpeed, KP_MAX, KP_MIN};

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("invalid safety parameter: {0}")]
    Invalid(String),
}

/// Approach-speed model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmParams {
    /// Human approach speed K, mm/s.
    pub approach_speed: f64,
    /// System stopping time T, s.
    pub stopping_time: f64,
    /// Intrusion distance C, mm.
    pub intrusion: f64,
}

impl Default for SsmParams {
    fn default() -> Self {
        Self {
            approach_speed: 1600.0,
            stopping_time: 0.5,
            intrusion: 100.0,
        }
    }
}

impl SsmParams {
    pub fn validate(&self) -> Result<(), SafetyError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.approach_speed > 0.0 && ok(self.stopping_time) && ok(self.intrusion)) {
            return Err(SafetyError::Invalid(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Minimum protective separation `S = K T + C`, in mm.
pub fn protective_distance(p: &SsmParams) -> f64 {
    p.approach_speed * p.stopping_time + p.intrusion
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyLimits {
    /// Kp cap (N·m/rad) for fragile objects.
    pub fragile_kp_cap: f64,
    /// Speed cap while a human is present or inside the protective distance.
    pub human_present_max_v: NominalSpeed,
    /// Below this separation (mm) `normal` speed is not allowed.
    pub min_separation_for_normal_v: f64,
    pub ssm: SsmParams,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            fragile_kp_cap: 30.0,
            human_present_max_v: NominalSpeed::Slow,
            min_separation_for_normal_v: 1500.0,
            ssm: SsmParams::default(),
        }
    }
}

impl SafetyLimits {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(KP_MIN..=KP_MAX).contains(&self.fragile_kp_cap) {
            return Err(SafetyError::Invalid(format!(
                "fragile_kp_cap {} outside [{KP_MIN}, {KP_MAX}]",
                self.fragile_kp_cap
            )));
        }
        if !(self.min_separation_for_normal_v >= 0.0) {
            return Err(SafetyError::Invalid("min_separation_for_normal_v".into()));
        }
        self.ssm.validate()
    }
}

/// Applies the fragility, presence and separation guards.
///
/// Guards only ever lower Kp and speed and never touch Kd. A payload that
/// fails the range checks on entry is replaced by the fallback profile.
/// `separation` is the measured human distance in mm, when available.
pub fn apply_guards(
    payload: &ImpedancePayload,
    scene: &NormalizedDescriptor,
    separation: Option<f64>,
    limits: &SafetyLimits,
) -> ImpedancePayload {
    if !payload.validate().is_ok() {
        log::warn!(
            "payload `{}` failed range checks; using fallback",
            payload.scenario_id
        );
        return fallback_payload();
    }
    let mut out = payload.clone();
    if scene.object_fragility == Fragility::Fragile {
        for kp in out.kp.iter_mut() {
            *kp = kp.min(limits.fragile_kp_cap);
        }
    }
    let inside_protective = separation.is_some_and(|s| !(s >= protective_distance(&limits.ssm)));
    if scene.human_presence == HumanPresence::HandVisible || inside_protective {
        out.nominal_v = out.nominal_v.min(limits.human_present_max_v);
    }
    if separation.is_some_and(|s| !(s >= limits.min_separation_for_normal_v)) {
        out.nominal_v = out.nominal_v.min(NominalSpeed::Mid);
    }
    debug_assert!(out.validate().is_ok());
    out
}
