//! Joint-space impedance law, torque-to-wrench mapping, the command payload
//! exchanged with the offboard server, and slew-limited gain scheduling.

use std::fmt;
use std::str::FromStr;

use nalgebra::{SVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{jacobian, ArmModel, JointVector, Side};
use crate::scenario_db::{
    validate_record, GainSet, NominalSpeed, ScenarioRecord, ValidationReport, KD_MAX, KP_MIN,
    NUM_JOINTS,
};

/// Numbers in a serialized payload: 14 Kp, 14 Kd, 1 speed code.
pub const PAYLOAD_VALUES: usize = 2 * NUM_JOINTS + 1;

pub const FALLBACK_SCENARIO_ID: &str = "fallback";

#[derive(Debug, Error, PartialEq)]
pub enum ImpedanceError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("degenerate configuration: Jacobian condition number {condition:e} exceeds {limit:e}")]
    Degenerate { condition: f64, limit: f64 },
    #[error("payload needs {PAYLOAD_VALUES} values, got {0}")]
    PayloadLength(usize),
    #[error("invalid speed code {0}")]
    SpeedCode(f64),
}

/// Why a payload is what it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadReason {
    /// Retrieved from a database match.
    Ok,
    /// Two candidates were too close to call.
    Tie,
    /// Best match was too far away.
    LowConfidence,
    EmptyDb,
    /// Server pipeline failed.
    Error,
    /// The conservative profile itself (startup, stale link).
    Fallback,
}

impl PayloadReason {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadReason::Ok => "ok",
            PayloadReason::Tie => "tie",
            PayloadReason::LowConfidence => "low_confidence",
            PayloadReason::EmptyDb => "empty_db",
            PayloadReason::Error => "error",
            PayloadReason::Fallback => "fallback",
        }
    }

    pub fn is_fallback(self) -> bool {
        self != PayloadReason::Ok
    }
}

impl fmt::Display for PayloadReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PayloadReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ok" => PayloadReason::Ok,
            "tie" => PayloadReason::Tie,
            "low_confidence" => PayloadReason::LowConfidence,
            "empty_db" => PayloadReason::EmptyDb,
            "error" => PayloadReason::Error,
            "fallback" => PayloadReason::Fallback,
            other => return Err(format!("unknown payload reason `{other}`")),
        })
    }
}

/// Gains and nominal speed sent from the offboard server to the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedancePayload {
    pub kp: [f64; NUM_JOINTS],
    pub kd: [f64; NUM_JOINTS],
    pub nominal_v: NominalSpeed,
    pub scenario_id: String,
    pub reason: PayloadReason,
}

impl ImpedancePayload {
    pub fn from_record(record: &ScenarioRecord) -> Self {
        let mut kp = [0.0; NUM_JOINTS];
        let mut kd = [0.0; NUM_JOINTS];
        kp.copy_from_slice(&record.gains.kp[..NUM_JOINTS]);
        kd.copy_from_slice(&record.gains.kd[..NUM_JOINTS]);
        Self {
            kp,
            kd,
            nominal_v: record.nominal_v,
            scenario_id: record.scenario_id.clone(),
            reason: PayloadReason::Ok,
        }
    }

    /// The 29 numbers in wire order: Kp left 0-6, right 0-6, Kd in the same
    /// order, then the speed code.
    pub fn to_values(&self) -> [f64; PAYLOAD_VALUES] {
        let mut out = [0.0; PAYLOAD_VALUES];
        out[..NUM_JOINTS].copy_from_slice(&self.kp);
        out[NUM_JOINTS..2 * NUM_JOINTS].copy_from_slice(&self.kd);
        out[2 * NUM_JOINTS] = f64::from(self.nominal_v.code());
        out
    }

    pub fn from_values(
        values: &[f64],
        scenario_id: impl Into<String>,
        reason: PayloadReason,
    ) -> Result<Self, ImpedanceError> {
        if values.len() != PAYLOAD_VALUES {
            return Err(ImpedanceError::PayloadLength(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ImpedanceError::NonFinite("payload value"));
        }
        let code = values[2 * NUM_JOINTS];
        let nominal_v = (code.fract() == 0.0 && (0.0..=2.0).contains(&code))
            .then(|| NominalSpeed::from_code(code as u8))
            .flatten()
            .ok_or(ImpedanceError::SpeedCode(code))?;
        let mut kp = [0.0; NUM_JOINTS];
        let mut kd = [0.0; NUM_JOINTS];
        kp.copy_from_slice(&values[..NUM_JOINTS]);
        kd.copy_from_slice(&values[NUM_JOINTS..2 * NUM_JOINTS]);
        Ok(Self {
            kp,
            kd,
            nominal_v,
            scenario_id: scenario_id.into(),
            reason,
        })
    }

    pub fn gains(&self) -> GainSet {
        GainSet {
            kp: self.kp.to_vec(),
            kd: self.kd.to_vec(),
        }
    }

    /// Range checks shared with database rows.
    pub fn validate(&self) -> ValidationReport {
        validate_record(&ScenarioRecord {
            scenario_id: self.scenario_id.clone(),
            task_enum: crate::scenario_db::TaskKind::Other,
            main_object: crate::scenario_db::MainObject::Other,
            object_fragility: crate::scenario_db::Fragility::NonFragile,
            human_presence: crate::scenario_db::HumanPresence::None,
            nominal_v: self.nominal_v,
            gains: self.gains(),
            description: String::new(),
        })
    }

    /// Same gains and speed, ignoring metadata.
    pub fn same_profile(&self, other: &ImpedancePayload) -> bool {
        self.kp == other.kp && self.kd == other.kd && self.nominal_v == other.nominal_v
    }

    pub fn with_reason(mut self, reason: PayloadReason) -> Self {
        self.reason = reason;
        self
    }
}

/// Minimum stiffness, maximum damping, slow speed on every joint.
pub fn fallback_payload() -> ImpedancePayload {
    ImpedancePayload {
        kp: [KP_MIN; NUM_JOINTS],
        kd: [KD_MAX; NUM_JOINTS],
        nominal_v: NominalSpeed::Slow,
        scenario_id: FALLBACK_SCENARIO_ID.to_string(),
        reason: PayloadReason::Fallback,
    }
}

/// Per-joint command set `{q_ref, qd_ref, tau_ff, Kp, Kd}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCommand {
    pub q_ref: JointVector,
    pub qd_ref: JointVector,
    pub tau_ff: JointVector,
    pub kp: JointVector,
    pub kd: JointVector,
}

impl JointCommand {
    pub fn hold(q_ref: JointVector, tau_ff: JointVector, payload: &ImpedancePayload) -> Self {
        Self {
            q_ref,
            qd_ref: JointVector::zeros(),
            tau_ff,
            kp: JointVector::from_row_slice(&payload.kp),
            kd: JointVector::from_row_slice(&payload.kd),
        }
    }
}

/// Measured joint positions and velocities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub q: JointVector,
    pub qd: JointVector,
}

/// `tau = Kp (q_ref - q) + Kd (qd_ref - qd) + tau_ff`, per joint.
pub fn impedance_torque(
    cmd: &JointCommand,
    state: &JointState,
) -> Result<JointVector, ImpedanceError> {
    let all_finite = [
        &cmd.q_ref,
        &cmd.qd_ref,
        &cmd.tau_ff,
        &cmd.kp,
        &cmd.kd,
        &state.q,
        &state.qd,
    ]
    .iter()
    .all(|v| v.iter().all(|x| x.is_finite()));
    if !all_finite {
        return Err(ImpedanceError::NonFinite("impedance input"));
    }
    Ok(cmd.kp.component_mul(&(cmd.q_ref - state.q))
        + cmd.kd.component_mul(&(cmd.qd_ref - state.qd))
        + cmd.tau_ff)
}

/// Condition number above which the torque-to-wrench map is refused.
pub const MAX_CONDITION: f64 = 1e6;

/// End-effector wrench `[force; moment]` produced by one arm's joint torques.
///
/// Solves `J^T F = tau` in the least-squares sense through the
/// pseudo-inverse of `J^T`.
pub fn force_map(
    model: &ArmModel,
    q: &JointVector,
    tau_arm: &SVector<f64, 7>,
    side: Side,
) -> Result<Vector6<f64>, ImpedanceError> {
    if !tau_arm.iter().all(|v| v.is_finite()) || !q.iter().all(|v| v.is_finite()) {
        return Err(ImpedanceError::NonFinite("force_map input"));
    }
    let jt = jacobian(model, q, side).transpose();
    let svd = jt.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition < MAX_CONDITION) {
        return Err(ImpedanceError::Degenerate {
            condition,
            limit: MAX_CONDITION,
        });
    }
    svd.solve(tau_arm, 0.0)
        .map_err(|_| ImpedanceError::NonFinite("pseudo-inverse"))
}

/// Slew-limited transition between two payloads.
///
/// Gains ramp linearly from `active` to `target` over `slew_duration`; the
/// speed switches at the midpoint. When the ramp completes `active` becomes
/// `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainScheduler {
    active: ImpedancePayload,
    target: ImpedancePayload,
    slew_duration: f64,
    elapsed: f64,
}

impl GainScheduler {
    pub const DEFAULT_SLEW: f64 = 0.3;

    pub fn new(initial: ImpedancePayload, slew_duration: f64) -> Self {
        Self {
            target: initial.clone(),
            active: initial,
            slew_duration,
            elapsed: 0.0,
        }
    }

    pub fn active(&self) -> &ImpedancePayload {
        &self.active
    }

    pub fn target(&self) -> &ImpedancePayload {
        &self.target
    }

    pub fn slew_duration(&self) -> f64 {
        self.slew_duration
    }

    pub fn in_transition(&self) -> bool {
        self.target != self.active
    }

    fn fraction(&self) -> f64 {
        if self.slew_duration <= 0.0 {
            return 1.0;
        }
        // tolerate accumulated rounding in the elapsed sum
        let f = self.elapsed / self.slew_duration;
        if f > 1.0 - 1e-9 {
            1.0
        } else {
            f
        }
    }

    /// Current interpolated payload, without advancing time.
    pub fn current(&self) -> ImpedancePayload {
        let f = self.fraction();
        if f >= 1.0 || !self.in_transition() {
            return if f >= 1.0 {
                self.target.clone()
            } else {
                self.active.clone()
            };
        }
        let lerp = |a: &[f64; NUM_JOINTS], b: &[f64; NUM_JOINTS]| {
            let mut out = [0.0; NUM_JOINTS];
            for i in 0..NUM_JOINTS {
                out[i] = a[i] + (b[i] - a[i]) * f;
            }
            out
        };
        let second_half = f >= 0.5;
        ImpedancePayload {
            kp: lerp(&self.active.kp, &self.target.kp),
            kd: lerp(&self.active.kd, &self.target.kd),
            nominal_v: if second_half {
                self.target.nominal_v
            } else {
                self.active.nominal_v
            },
            scenario_id: if second_half {
                self.target.scenario_id.clone()
            } else {
                self.active.scenario_id.clone()
            },
            reason: if second_half {
                self.target.reason
            } else {
                self.active.reason
            },
        }
    }

    /// Starts a transition from the current output toward `target`.
    /// Re-setting the same target is a no-op.
    pub fn set_target(&mut self, target: ImpedancePayload) {
        if target == self.target {
            return;
        }
        self.active = self.current();
        self.target = target;
        self.elapsed = 0.0;
    }

    /// Advances by `dt` and returns the interpolated payload.
    pub fn step(&mut self, dt: f64) -> ImpedancePayload {
        debug_assert!(dt > 0.0);
        if self.in_transition() {
            self.elapsed += dt;
            if self.fraction() >= 1.0 {
                self.active = self.target.clone();
                self.elapsed = 0.0;
            }
        }
        self.current()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use approx::assert_relative_eq;

    fn uniform(kp: f64, kd: f64, v: NominalSpeed) -> ImpedancePayload {
        ImpedancePayload {
            kp: [kp; NUM_JOINTS],
            kd: [kd; NUM_JOINTS],
            nominal_v: v,
            scenario_id: format!("u{kp}"),
            reason: PayloadReason::Ok,
        }
    }

    fn command(kp: f64, kd: f64, dq: f64, tau_ff: f64) -> (JointCommand, JointState) {
        let cmd = JointCommand {
            q_ref: JointVector::repeat(dq),
            qd_ref: JointVector::zeros(),
            tau_ff: JointVector::repeat(tau_ff),
            kp: JointVector::repeat(kp),
            kd: JointVector::repeat(kd),
        };
        let state = JointState {
            q: JointVector::zeros(),
            qd: JointVector::zeros(),
        };
        (cmd, state)
    }

    #[test]
    fn zero_error_gives_feed_forward() {
        let (mut cmd, _) = command(40.0, 1.0, 0.3, 0.0);
        cmd.tau_ff = JointVector::from_fn(|i, _| i as f64 * 0.5);
        cmd.qd_ref = JointVector::repeat(0.2);
        let state = JointState {
            q: cmd.q_ref,
            qd: cmd.qd_ref,
        };
        assert_eq!(impedance_torque(&cmd, &state).unwrap(), cmd.tau_ff);
    }

    #[test]
    fn hand_evaluated_torque() {
        // 40 * 0.1 + 1.0 * 0 + 2.0
        let (cmd, state) = command(40.0, 1.0, 0.1, 2.0);
        let tau = impedance_torque(&cmd, &state).unwrap();
        for t in tau.iter() {
            assert_relative_eq!(*t, 6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn doubling_kp_doubles_torque() {
        let (cmd, state) = command(20.0, 1.0, 0.1, 0.0);
        let (cmd2, _) = command(40.0, 1.0, 0.1, 0.0);
        let t1 = impedance_torque(&cmd, &state).unwrap();
        let t2 = impedance_torque(&cmd2, &state).unwrap();
        assert_relative_eq!(t2, t1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let (cmd, mut state) = command(20.0, 1.0, 0.1, 0.0);
        state.qd[3] = f64::NAN;
        assert!(impedance_torque(&cmd, &state).is_err());
    }

    #[test]
    fn fallback_profile() {
        let f = fallback_payload();
        assert!(f.validate().is_ok());
        assert!(f.kp.iter().all(|&k| k == 10.0));
        assert!(f.kd.iter().all(|&k| k == 2.0));
        assert_eq!(f.nominal_v, NominalSpeed::Slow);
        assert_eq!(f.reason, PayloadReason::Fallback);
        for r in data::seed_database().records() {
            assert!(f.nominal_v <= r.nominal_v);
        }
    }

    #[test]
    fn payload_values_layout() {
        let rec = &data::seed_database().records()[0].clone();
        let p = ImpedancePayload::from_record(rec);
        let v = p.to_values();
        assert_eq!(v.len(), 29);
        assert_eq!(v[0], rec.gains.kp[0]);
        assert_eq!(v[14], rec.gains.kd[0]);
        assert_eq!(v[28], 2.0);
        let back = ImpedancePayload::from_values(&v, p.scenario_id.clone(), p.reason).unwrap();
        assert_eq!(back, p);
        assert_eq!(
            ImpedancePayload::from_values(&v[..28], "x", PayloadReason::Ok).unwrap_err(),
            ImpedanceError::PayloadLength(28)
        );
        let mut bad = v;
        bad[28] = 1.5;
        assert!(ImpedancePayload::from_values(&bad, "x", PayloadReason::Ok).is_err());
    }

    #[test]
    fn zero_torque_gives_zero_wrench() {
        let model = data::arm_model();
        let f = force_map(&model, &model.home, &SVector::<f64, 7>::zeros(), Side::Left).unwrap();
        assert_eq!(f, Vector6::zeros());
    }

    #[test]
    fn stretched_pose_is_degenerate() {
        let model = data::arm_model();
        let tau = SVector::<f64, 7>::repeat(1.0);
        let err = force_map(&model, &JointVector::zeros(), &tau, Side::Right).unwrap_err();
        assert!(matches!(err, ImpedanceError::Degenerate { .. }));
    }

    #[test]
    fn scheduler_identity() {
        let p = uniform(40.0, 1.0, NominalSpeed::Mid);
        let mut s = GainScheduler::new(p.clone(), 0.3);
        s.set_target(p.clone());
        for _ in 0..30 {
            assert_eq!(s.step(0.02), p);
        }
    }

    #[test]
    fn scheduler_ramp_reaches_target_in_15_steps() {
        let mut s = GainScheduler::new(uniform(60.0, 0.5, NominalSpeed::Normal), 0.3);
        s.set_target(uniform(10.0, 2.0, NominalSpeed::Slow));
        let mut prev = 60.0;
        let mut outputs = Vec::new();
        for _ in 0..15 {
            let out = s.step(0.02);
            assert!(out.kp[0] <= prev);
            prev = out.kp[0];
            outputs.push(out);
        }
        assert_relative_eq!(outputs[0].kp[0], 60.0 - 50.0 / 15.0, epsilon = 1e-9);
        assert_eq!(outputs[14].kp, [10.0; NUM_JOINTS]);
        assert_eq!(outputs[14].kd, [2.0; NUM_JOINTS]);
        // speed switches at the midpoint (7.5 steps)
        assert_eq!(outputs[6].nominal_v, NominalSpeed::Normal);
        assert_eq!(outputs[7].nominal_v, NominalSpeed::Slow);
        assert!(!s.in_transition());
    }

    #[test]
    fn retarget_mid_ramp_starts_from_current_output() {
        let mut s = GainScheduler::new(uniform(60.0, 0.5, NominalSpeed::Normal), 0.3);
        s.set_target(uniform(10.0, 2.0, NominalSpeed::Slow));
        for _ in 0..5 {
            s.step(0.02);
        }
        let before = s.current();
        s.set_target(uniform(60.0, 0.5, NominalSpeed::Normal));
        assert_eq!(s.current().kp, before.kp);
        let next = s.step(0.02);
        assert!(next.kp[0] > before.kp[0]);
    }
}
