//! Curated scenario database: typed CSV ingestion, range validation and
//! category statistics.
//!
//! Each row maps scene semantics to a validated set of 28 joint gains and a
//! nominal speed. The database is immutable once loaded.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Joints per arm.
pub const ARM_JOINTS: usize = 7;
/// Controlled upper-body joints (left arm 0-6, right arm 7-13).
pub const NUM_JOINTS: usize = 2 * ARM_JOINTS;

pub const KP_MIN: f64 = 10.0;
pub const KP_MAX: f64 = 60.0;
pub const KD_MIN: f64 = 0.1;
pub const KD_MAX: f64 = 2.0;

/// Identity and semantic columns, in file order.
pub const SEMANTIC_COLUMNS: [&str; 6] = [
    "scenario_id",
    "task_enum",
    "main_object",
    "object_fragility",
    "human_presence",
    "nominal_v",
];

pub const DESCRIPTION_COLUMN: &str = "description";

macro_rules! semantic_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "`{other}` is not one of {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

semantic_enum!(
    /// Task category of a scenario.
    TaskKind { Pick => "pick", Handover => "handover", Other => "other" }
);
semantic_enum!(
    MainObject { Cube => "cube", Fruit => "fruit", Other => "other" }
);
semantic_enum!(
    Fragility { Fragile => "fragile", NonFragile => "non_fragile" }
);
semantic_enum!(
    HumanPresence { None => "none", HandVisible => "hand_visible" }
);
semantic_enum!(
    /// Discrete nominal end-effector speed. Ordered `Slow < Mid < Normal`.
    NominalSpeed { Slow => "slow", Mid => "mid", Normal => "normal" }
);

impl NominalSpeed {
    /// Wire code: 0 = slow, 1 = mid, 2 = normal.
    pub fn code(self) -> u8 {
        match self {
            NominalSpeed::Slow => 0,
            NominalSpeed::Mid => 1,
            NominalSpeed::Normal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NominalSpeed::Slow),
            1 => Some(NominalSpeed::Mid),
            2 => Some(NominalSpeed::Normal),
            _ => None,
        }
    }
}

/// Per-joint impedance gains. Left arm joints 0-6, then right arm joints 0-6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl GainSet {
    pub fn uniform(kp: f64, kd: f64) -> Self {
        Self {
            kp: vec![kp; NUM_JOINTS],
            kd: vec![kd; NUM_JOINTS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario_id: String,
    pub task_enum: TaskKind,
    pub main_object: MainObject,
    pub object_fragility: Fragility,
    pub human_presence: HumanPresence,
    pub nominal_v: NominalSpeed,
    pub gains: GainSet,
    /// Canonical query text of the scene this row was validated in.
    pub description: String,
}

/// A single invariant violation found in a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub field: String,
    pub value: String,
    pub bound: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} violates {}", self.field, self.value, self.bound)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks the structural and range invariants of one record.
///
/// Findings are data: an invalid record yields a non-empty report, never an
/// error.
pub fn validate_record(record: &ScenarioRecord) -> ValidationReport {
    let mut findings = Vec::new();
    if record.scenario_id.trim().is_empty() {
        findings.push(Finding {
            field: "scenario_id".into(),
            value: format!("{:?}", record.scenario_id),
            bound: "non-empty".into(),
        });
    }
    check_gains("kp", &record.gains.kp, KP_MIN, KP_MAX, &mut findings);
    check_gains("kd", &record.gains.kd, KD_MIN, KD_MAX, &mut findings);
    ValidationReport { findings }
}

fn check_gains(name: &str, values: &[f64], lo: f64, hi: f64, findings: &mut Vec<Finding>) {
    if values.len() != NUM_JOINTS {
        findings.push(Finding {
            field: name.to_string(),
            value: format!("{} elements", values.len()),
            bound: format!("length == {NUM_JOINTS}"),
        });
    }
    for (i, &v) in values.iter().enumerate() {
        if !(v.is_finite() && v >= lo && v <= hi) {
            findings.push(Finding {
                field: gain_column(i, name),
                value: format!("{v}"),
                bound: format!("[{lo}, {hi}]"),
            });
        }
    }
}

/// Column name of gain `kind` ("kp" or "kd") for flat joint index `joint`.
pub fn gain_column(joint: usize, kind: &str) -> String {
    let side = if joint < ARM_JOINTS { 'L' } else { 'R' };
    format!("{side}{}_{kind}", joint % ARM_JOINTS)
}

/// The full header of the database file.
pub fn header() -> Vec<String> {
    let mut cols: Vec<String> = SEMANTIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    for j in 0..NUM_JOINTS {
        cols.push(gain_column(j, "kp"));
        cols.push(gain_column(j, "kd"));
    }
    cols.push(DESCRIPTION_COLUMN.to_string());
    cols
}

#[derive(Debug, Error)]
pub enum DbError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("row {row} ({scenario_id}): validation failed: {}", findings.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Validation {
        row: usize,
        scenario_id: String,
        findings: Vec<Finding>,
    },
    #[error("duplicate scenario_id `{0}`")]
    DuplicateId(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct Provenance {
    pub source: Option<PathBuf>,
}

/// Immutable, validated scenario table.
#[derive(Debug, Clone)]
pub struct ScenarioDatabase {
    records: Vec<ScenarioRecord>,
    provenance: Provenance,
}

impl ScenarioDatabase {
    /// Builds a database from in-memory records, applying the same checks as
    /// [`load_database`].
    pub fn from_records(records: Vec<ScenarioRecord>) -> Result<Self, DbError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let report = validate_record(r);
            if !report.is_ok() {
                return Err(DbError::Validation {
                    row: i,
                    scenario_id: r.scenario_id.clone(),
                    findings: report.findings,
                });
            }
            if !seen.insert(r.scenario_id.clone()) {
                return Err(DbError::DuplicateId(r.scenario_id.clone()));
            }
        }
        Ok(Self {
            records,
            provenance: Provenance { source: None },
        })
    }

    pub fn records(&self) -> &[ScenarioRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ScenarioRecord> {
        self.records.get(index)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Writes the database in the same CSV format it is loaded from.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DbError> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        w.write_record(header())?;
        for r in &self.records {
            let mut row: Vec<String> = vec![
                r.scenario_id.clone(),
                r.task_enum.to_string(),
                r.main_object.to_string(),
                r.object_fragility.to_string(),
                r.human_presence.to_string(),
                r.nominal_v.to_string(),
            ];
            for j in 0..NUM_JOINTS {
                row.push(format!("{:?}", r.gains.kp[j]));
                row.push(format!("{:?}", r.gains.kd[j]));
            }
            row.push(r.description.clone());
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| DbError::Io {
            path: PathBuf::from("<writer>"),
            source,
        })?;
        Ok(())
    }
}

/// Loads and validates a scenario database file.
pub fn load_database(path: impl AsRef<Path>) -> Result<ScenarioDatabase, DbError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut db = read_database(file)?;
    db.provenance.source = Some(path.to_path_buf());
    Ok(db)
}

/// Parses a database from any reader (the bundled seed uses this).
pub fn read_database<R: Read>(reader: R) -> Result<ScenarioDatabase, DbError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let found: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    check_header(&found)?;

    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = result.map_err(|e| DbError::Row {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != found.len() {
            return Err(DbError::Row {
                row,
                message: format!("expected {} fields, found {}", found.len(), rec.len()),
            });
        }
        records.push(parse_row(row, &rec)?);
    }
    ScenarioDatabase::from_records(records)
}

/// One problem found by [`audit_database`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    /// Zero-based data row, if the problem is tied to one.
    pub row: Option<usize>,
    pub scenario_id: String,
    pub message: String,
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(r) if self.scenario_id.is_empty() => write!(f, "row {r}: {}", self.message),
            Some(r) => write!(f, "row {r} ({}): {}", self.scenario_id, self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks a whole database file and reports every problem rather than
/// stopping at the first. Only I/O failures are errors.
pub fn audit_database<R: Read>(reader: R) -> Result<Vec<AuditEntry>, std::io::Error> {
    let io_or = |e: csv::Error,
                 row: Option<usize>,
                 out: &mut Vec<AuditEntry>|
     -> Result<(), std::io::Error> {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => return Err(io),
                _ => unreachable!("checked is_io_error"),
            }
        }
        out.push(AuditEntry {
            row,
            scenario_id: String::new(),
            message: e.to_string(),
        });
        Ok(())
    };
    let mut out = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let found: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|h| h.trim().to_string()).collect(),
        Err(e) => {
            io_or(e, None, &mut out)?;
            return Ok(out);
        }
    };
    if let Err(e) = check_header(&found) {
        out.push(AuditEntry {
            row: None,
            scenario_id: String::new(),
            message: e.to_string(),
        });
        return Ok(out);
    }
    let mut seen = HashSet::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                io_or(e, Some(row), &mut out)?;
                continue;
            }
        };
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let entry = |message: String| AuditEntry {
            row: Some(row),
            scenario_id: id.clone(),
            message,
        };
        if rec.len() != found.len() {
            out.push(entry(format!(
                "expected {} fields, found {}",
                found.len(),
                rec.len()
            )));
            continue;
        }
        match parse_row(row, &rec) {
            Ok(record) => {
                for f in validate_record(&record).findings {
                    out.push(entry(f.to_string()));
                }
                if !seen.insert(record.scenario_id.clone()) {
                    out.push(entry("duplicate scenario_id".into()));
                }
            }
            Err(DbError::Row { message, .. }) => out.push(entry(message)),
            Err(e) => out.push(entry(e.to_string())),
        }
    }
    Ok(out)
}

fn check_header(found: &[String]) -> Result<(), DbError> {
    let expected = header();
    for col in &expected {
        if !found.iter().any(|f| f == col) {
            return Err(DbError::Schema(format!("missing column `{col}`")));
        }
    }
    for col in found {
        if !expected.iter().any(|e| e == col) {
            return Err(DbError::Schema(format!("unexpected column `{col}`")));
        }
    }
    for (i, (f, e)) in found.iter().zip(&expected).enumerate() {
        if f != e {
            return Err(DbError::Schema(format!(
                "column {} is `{f}`, expected `{e}`",
                i + 1
            )));
        }
    }
    if found.len() != expected.len() {
        return Err(DbError::Schema(format!(
            "expected {} columns, found {}",
            expected.len(),
            found.len()
        )));
    }
    Ok(())
}

fn parse_row(row: usize, rec: &csv::StringRecord) -> Result<ScenarioRecord, DbError> {
    fn field<T: FromStr<Err = String>>(
        row: usize,
        rec: &csv::StringRecord,
        idx: usize,
    ) -> Result<T, DbError> {
        rec[idx].trim().parse().map_err(|e| DbError::Row {
            row,
            message: format!("{}: {e}", SEMANTIC_COLUMNS[idx]),
        })
    }
    let mut kp = Vec::with_capacity(NUM_JOINTS);
    let mut kd = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        for (kind, out, offset) in [("kp", &mut kp, 0), ("kd", &mut kd, 1)] {
            let idx = SEMANTIC_COLUMNS.len() + 2 * j + offset;
            let raw = rec[idx].trim();
            let value: f64 = raw.parse().map_err(|_| DbError::Row {
                row,
                message: format!("{}: cannot parse `{raw}` as a number", gain_column(j, kind)),
            })?;
            out.push(value);
        }
    }
    Ok(ScenarioRecord {
        scenario_id: rec[0].trim().to_string(),
        task_enum: field(row, rec, 1)?,
        main_object: field(row, rec, 2)?,
        object_fragility: field(row, rec, 3)?,
        human_presence: field(row, rec, 4)?,
        nominal_v: field(row, rec, 5)?,
        gains: GainSet { kp, kd },
        description: rec[rec.len() - 1].to_string(),
    })
}

/// Per-field histogram of the semantic enums.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryCounts {
    pub task_enum: BTreeMap<TaskKind, usize>,
    pub main_object: BTreeMap<MainObject, usize>,
    pub object_fragility: BTreeMap<Fragility, usize>,
    pub human_presence: BTreeMap<HumanPresence, usize>,
    pub nominal_v: BTreeMap<NominalSpeed, usize>,
}

pub fn category_counts(db: &ScenarioDatabase) -> CategoryCounts {
    fn zeroed<K: Ord + Copy>(all: &[K]) -> BTreeMap<K, usize> {
        all.iter().map(|&k| (k, 0)).collect()
    }
    let mut c = CategoryCounts {
        task_enum: zeroed(TaskKind::ALL),
        main_object: zeroed(MainObject::ALL),
        object_fragility: zeroed(Fragility::ALL),
        human_presence: zeroed(HumanPresence::ALL),
        nominal_v: zeroed(NominalSpeed::ALL),
    };
    for r in db.records() {
        *c.task_enum.entry(r.task_enum).or_default() += 1;
        *c.main_object.entry(r.main_object).or_default() += 1;
        *c.object_fragility.entry(r.object_fragility).or_default() += 1;
        *c.human_presence.entry(r.human_presence).or_default() += 1;
        *c.nominal_v.entry(r.nominal_v).or_default() += 1;
    }
    c
}
