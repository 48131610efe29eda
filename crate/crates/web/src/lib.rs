//! Browser bindings: step response of the shipped plant, scene retrieval
//! with its nearest candidates, and the separation/fragility guards.
//!
//! Every export has a plain Rust counterpart returning JSON so it can be
//! tested natively.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN inputs must fail the range checks

use std::sync::OnceLock;

use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use safehumanoid::comms::{Pipeline, SceneQuery, SceneSource};
use safehumanoid::config::{Assets, RunConfig};
use safehumanoid::data;
use safehumanoid::impedance::{ImpedancePayload, PayloadReason};
use safehumanoid::perception::from_query_text;
use safehumanoid::safety::{apply_guards, protective_distance, SafetyLimits, SsmParams};
use safehumanoid::scenario_db::{
    Fragility, HumanPresence, NominalSpeed, KD_MAX, KD_MIN, KP_MAX, KP_MIN, NUM_JOINTS,
};
use safehumanoid::sim::{step_response, SimConfig};

/// Longest step response the page may request, s.
pub const MAX_DURATION: f64 = 20.0;

fn pipeline() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let cfg = RunConfig::default();
        Assets::load(&cfg)
            .and_then(|a| a.pipeline(&cfg))
            .expect("bundled assets load")
    })
}

#[derive(Serialize)]
struct Trace {
    time: Vec<f64>,
    /// Max over joints of |q - q_ref|, rad.
    error: Vec<f64>,
    /// Shoulder pitch of each arm, rad.
    left_shoulder: Vec<f64>,
    right_shoulder: Vec<f64>,
    target_left: f64,
    target_right: f64,
    settled_at: Option<f64>,
    final_error: f64,
}

/// Uniform-gain step on every joint from the home pose.
pub fn step_response_json(kp: f64, kd: f64, step: f64, duration: f64) -> Result<Value, String> {
    if !(KP_MIN..=KP_MAX).contains(&kp) || !(KD_MIN..=KD_MAX).contains(&kd) {
        return Err(format!(
            "gains must lie in Kp [{KP_MIN}, {KP_MAX}], Kd [{KD_MIN}, {KD_MAX}]"
        ));
    }
    if !(step.abs() <= 0.5) {
        return Err("step must be within ±0.5 rad".into());
    }
    if !(duration > 0.0 && duration <= MAX_DURATION) {
        return Err(format!("duration must be in (0, {MAX_DURATION}] s"));
    }
    let model = data::arm_model();
    let sim = SimConfig::default();
    let q_ref = model.home.add_scalar(step);
    let traj = step_response(&model, kp, kd, step, duration, &sim).map_err(|e| e.to_string())?;
    // every other tick is plenty for a plot
    let stride = 2;
    let mut t = Trace {
        time: Vec::new(),
        error: Vec::new(),
        left_shoulder: Vec::new(),
        right_shoulder: Vec::new(),
        target_left: q_ref[0],
        target_right: q_ref[7],
        settled_at: None,
        final_error: 0.0,
    };
    let errors: Vec<f64> = traj.iter().map(|q| (q - q_ref).amax()).collect();
    for (i, q) in traj.iter().enumerate().step_by(stride) {
        t.time.push(i as f64 * sim.dt);
        t.error.push(errors[i]);
        t.left_shoulder.push(q[0]);
        t.right_shoulder.push(q[7]);
    }
    // first time after which the error stays below 0.01 rad
    t.settled_at = errors
        .iter()
        .rposition(|&e| e >= 0.01)
        .map_or(Some(0.0), |i| {
            (i + 1 < errors.len()).then(|| (i + 1) as f64 * sim.dt)
        });
    t.final_error = *errors.last().unwrap_or(&0.0);
    serde_json::to_value(t).map_err(|e| e.to_string())
}

fn payload_json(p: &ImpedancePayload) -> Value {
    json!({
        "scenario_id": p.scenario_id,
        "reason": p.reason.as_str(),
        "speed": p.nominal_v.as_str(),
        "kp": p.kp.to_vec(),
        "kd": p.kd.to_vec(),
    })
}

/// Names of the bundled mock scenes.
pub fn stubs_json() -> Value {
    json!(pipeline().known_stubs().unwrap_or_default())
}

/// Runs the retrieval pipeline for a stub name or a JSON descriptor and
/// reports the payload plus the three nearest scenarios.
pub fn explain_json(scene: &str, separation_mm: Option<f64>) -> Result<Value, String> {
    let p = pipeline();
    let text = scene.trim();
    let source = if text.starts_with('{') {
        let descriptor: Value =
            serde_json::from_str(text).map_err(|e| format!("descriptor: {e}"))?;
        SceneSource::Descriptor { descriptor }
    } else {
        SceneSource::Stub {
            name: text.to_string(),
        }
    };
    let processed = p
        .process(&SceneQuery {
            source,
            separation_mm: separation_mm.filter(|s| s.is_finite()),
        })
        .map_err(|e| e.to_string())?;
    let vector = p
        .embedder
        .embed(&processed.query_text)
        .map_err(|e| e.to_string())?;
    let db = p.index.db();
    let candidates: Vec<Value> = p
        .index
        .nearest(&vector, 3)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(i, d)| {
            let r = &db.records()[i];
            json!({"scenario_id": r.scenario_id, "distance": d, "speed": r.nominal_v.as_str()})
        })
        .collect();
    Ok(json!({
        "query": processed.query_text,
        "distance": processed.distance,
        "payload": payload_json(&processed.payload),
        "candidates": candidates,
        "threshold": p.retrieval.distance_threshold,
        "tie_margin": p.retrieval.tie_margin,
    }))
}

/// Inputs to [`guard_json`].
#[derive(Debug, Clone, Copy)]
pub struct GuardInput {
    pub kp: f64,
    pub kd: f64,
    pub speed: NominalSpeed,
    pub fragile: bool,
    pub hand_visible: bool,
    pub separation_mm: Option<f64>,
    pub ssm: SsmParams,
}

/// Applies the guards to a uniform-gain payload and explains which fired.
pub fn guard_json(input: &GuardInput) -> Result<Value, String> {
    input.ssm.validate().map_err(|e| e.to_string())?;
    let payload = ImpedancePayload {
        kp: [input.kp; NUM_JOINTS],
        kd: [input.kd; NUM_JOINTS],
        nominal_v: input.speed,
        scenario_id: "manual".into(),
        reason: PayloadReason::Ok,
    };
    let report = payload.validate();
    if !report.is_ok() {
        return Err(report
            .findings
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join("; "));
    }
    let mut scene = from_query_text(&data::seed_database().records()[0].description)
        .map_err(|e| e.to_string())?;
    scene.object_fragility = if input.fragile {
        Fragility::Fragile
    } else {
        Fragility::NonFragile
    };
    scene.human_presence = if input.hand_visible {
        HumanPresence::HandVisible
    } else {
        HumanPresence::None
    };
    let limits = SafetyLimits {
        ssm: input.ssm,
        ..SafetyLimits::default()
    };
    let out = apply_guards(&payload, &scene, input.separation_mm, &limits);
    let s = protective_distance(&input.ssm);
    let mut fired = Vec::new();
    if input.fragile && input.kp > limits.fragile_kp_cap {
        fired.push(format!(
            "fragile object: Kp capped at {}",
            limits.fragile_kp_cap
        ));
    }
    if input.hand_visible {
        fired.push("hand visible: speed capped at slow".to_string());
    }
    match input.separation_mm {
        Some(d) if !(d >= s) => fired.push(format!(
            "separation {d:.0} mm inside S = {s:.0} mm: speed capped at slow"
        )),
        Some(d) if !(d >= limits.min_separation_for_normal_v) => fired.push(format!(
            "separation {d:.0} mm below {:.0} mm: normal speed not allowed",
            limits.min_separation_for_normal_v
        )),
        _ => {}
    }
    Ok(json!({
        "protective_distance_mm": s,
        "payload": payload_json(&out),
        "fired": fired,
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = stepResponse)]
pub fn step_response_js(kp: f64, kd: f64, step: f64, duration: f64) -> Result<String, JsValue> {
    to_js(step_response_json(kp, kd, step, duration))
}

#[wasm_bindgen(js_name = sceneStubs)]
pub fn scene_stubs_js() -> String {
    stubs_json().to_string()
}

/// `separation_mm` may be NaN for "not measured".
#[wasm_bindgen(js_name = explainScene)]
pub fn explain_scene_js(scene: &str, separation_mm: f64) -> Result<String, JsValue> {
    to_js(explain_json(
        scene,
        separation_mm.is_finite().then_some(separation_mm),
    ))
}

#[wasm_bindgen(js_name = applyGuards)]
#[allow(clippy::too_many_arguments)]
pub fn apply_guards_js(
    kp: f64,
    kd: f64,
    speed: &str,
    fragile: bool,
    hand_visible: bool,
    separation_mm: f64,
    approach_speed: f64,
    stopping_time: f64,
    intrusion: f64,
) -> Result<String, JsValue> {
    let speed: NominalSpeed = speed.parse().map_err(|e: String| JsValue::from_str(&e))?;
    to_js(guard_json(&GuardInput {
        kp,
        kd,
        speed,
        fragile,
        hand_visible,
        separation_mm: separation_mm.is_finite().then_some(separation_mm),
        ssm: SsmParams {
            approach_speed,
            stopping_time,
            intrusion,
        },
    }))
}
