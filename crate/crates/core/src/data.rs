//! Bundled default data files.

use crate::kinematics::ArmModel;
use crate::perception::{MockVlm, NormalizationTable};
use crate::scenario_db::{read_database, ScenarioDatabase};

pub const SEED_CSV: &str = include_str!("../data/seed_scenarios.csv");
pub const NORMALIZATION_JSON: &str = include_str!("../data/normalization.json");
pub const MOCK_SCENES_JSON: &str = include_str!("../data/mock_scenes.json");
pub const ARM_MODEL_TOML: &str = include_str!("../data/arm_model.toml");

// The bundled files are checked by the test suite, so failing to parse them
// is a build defect rather than a runtime condition.

pub fn seed_database() -> ScenarioDatabase {
    read_database(SEED_CSV.as_bytes()).expect("bundled seed database is valid")
}

pub fn normalization_table() -> &'static NormalizationTable {
    static TABLE: std::sync::OnceLock<NormalizationTable> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        NormalizationTable::from_json(NORMALIZATION_JSON)
            .expect("bundled normalization table is valid")
    })
}

pub fn mock_vlm() -> MockVlm {
    MockVlm::from_json(MOCK_SCENES_JSON).expect("bundled mock scenes are valid")
}

pub fn arm_model() -> ArmModel {
    ArmModel::from_toml(ARM_MODEL_TOML).expect("bundled arm model is valid")
}

/// Shipped scenario scripts, by name.
pub const SCRIPTS: &[(&str, &str)] = &[
    (
        "wipe_baseline",
        include_str!("../data/scripts/wipe_baseline.toml"),
    ),
    ("wipe_hand", include_str!("../data/scripts/wipe_hand.toml")),
    (
        "pin_baseline",
        include_str!("../data/scripts/pin_baseline.toml"),
    ),
    ("pin_hand", include_str!("../data/scripts/pin_hand.toml")),
    (
        "cube_baseline",
        include_str!("../data/scripts/cube_baseline.toml"),
    ),
    ("cube_hand", include_str!("../data/scripts/cube_hand.toml")),
    ("soy", include_str!("../data/scripts/soy.toml")),
    (
        "latency_outage",
        include_str!("../data/scripts/latency_outage.toml"),
    ),
];

pub fn script(name: &str) -> Option<crate::sim::ScenarioScript> {
    SCRIPTS.iter().find(|(n, _)| *n == name).map(|(_, text)| {
        crate::sim::ScenarioScript::from_toml(text).expect("bundled script is valid")
    })
}
