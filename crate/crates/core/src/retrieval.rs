//! Exact nearest-neighbour scenario retrieval with tie and threshold
//! rejection, and formatting of the selected row into a payload.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedder, EmbeddingError, EmbeddingVector, EMBEDDING_DIM};
use crate::impedance::{ImpedancePayload, PayloadReason};
use crate::scenario_db::ScenarioDatabase;

/// Floor on the best distance when computing the relative tie gap.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("query has {0} dimensions, index expects {EMBEDDING_DIM}")]
    Dimension(usize),
    #[error("record index {index} out of bounds for {len} records")]
    OutOfBounds { index: usize, len: usize },
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Largest accepted Euclidean distance to the best match.
    pub distance_threshold: f64,
    /// Minimum relative gap `(second - best) / best` for a match.
    pub tie_margin: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 0.9,
            tie_margin: 0.02,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.distance_threshold > 0.0 && self.distance_threshold.is_finite()) {
            return Err(RetrievalError::Config(format!(
                "distance_threshold {} must be positive",
                self.distance_threshold
            )));
        }
        if !(self.tie_margin > 0.0 && self.tie_margin < 1.0) {
            return Err(RetrievalError::Config(format!(
                "tie_margin {} must be in (0, 1)",
                self.tie_margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultKind {
    Match,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalReason {
    Ok,
    Tie,
    LowConfidence,
    EmptyDb,
}

impl From<RetrievalReason> for PayloadReason {
    fn from(r: RetrievalReason) -> Self {
        match r {
            RetrievalReason::Ok => PayloadReason::Ok,
            RetrievalReason::Tie => PayloadReason::Tie,
            RetrievalReason::LowConfidence => PayloadReason::LowConfidence,
            RetrievalReason::EmptyDb => PayloadReason::EmptyDb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    pub kind: ResultKind,
    /// Nearest record, also reported on fallback for diagnostics.
    pub record_index: Option<usize>,
    pub distance: f64,
    pub runner_up_distance: Option<f64>,
    pub reason: RetrievalReason,
}

/// Scenario embeddings aligned with database row order.
#[derive(Clone)]
pub struct ScenarioIndex {
    db: Arc<ScenarioDatabase>,
    vectors: Vec<EmbeddingVector>,
}

impl ScenarioIndex {
    /// Embeds every record's stored description.
    pub fn build(
        db: Arc<ScenarioDatabase>,
        embedder: &dyn Embedder,
    ) -> Result<Self, RetrievalError> {
        let texts: Vec<String> = db.records().iter().map(|r| r.description.clone()).collect();
        let vectors = embedder.embed_all(&texts)?;
        Ok(Self { db, vectors })
    }

    pub fn db(&self) -> &Arc<ScenarioDatabase> {
        &self.db
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Distances to every record, in record order.
    pub fn distances(&self, query: &[f64]) -> Result<Vec<f64>, RetrievalError> {
        if query.len() != EMBEDDING_DIM {
            return Err(RetrievalError::Dimension(query.len()));
        }
        Ok(self
            .vectors
            .iter()
            .map(|v| crate::embedding::euclidean(v, query))
            .collect())
    }

    /// The `k` nearest records as `(index, distance)`, nearest first. Ties
    /// in distance keep record order.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>, RetrievalError> {
        let mut ranked: Vec<(usize, f64)> =
            self.distances(query)?.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }
}

/// Full linear scan; accepts the best record only if it is close enough and
/// clearly separated from the runner-up.
pub fn retrieve(
    index: &ScenarioIndex,
    query: &[f64],
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let distances = index.distances(query)?;
    let mut best: Option<(usize, f64)> = None;
    let mut second: Option<f64> = None;
    for (i, &d) in distances.iter().enumerate() {
        match best {
            None => best = Some((i, d)),
            Some((_, bd)) if d < bd => {
                second = Some(bd);
                best = Some((i, d));
            }
            Some(_) => {
                if second.is_none_or(|s| d < s) {
                    second = Some(d);
                }
            }
        }
    }
    let Some((best_index, best_distance)) = best else {
        return Ok(RetrievalResult {
            kind: ResultKind::Fallback,
            record_index: None,
            distance: f64::INFINITY,
            runner_up_distance: None,
            reason: RetrievalReason::EmptyDb,
        });
    };
    let reason = if best_distance > cfg.distance_threshold {
        RetrievalReason::LowConfidence
    } else if second
        .is_some_and(|s| (s - best_distance) / best_distance.max(TIE_EPSILON) < cfg.tie_margin)
    {
        RetrievalReason::Tie
    } else {
        RetrievalReason::Ok
    };
    Ok(RetrievalResult {
        kind: if reason == RetrievalReason::Ok {
            ResultKind::Match
        } else {
            ResultKind::Fallback
        },
        record_index: Some(best_index),
        distance: best_distance,
        runner_up_distance: second,
        reason,
    })
}

/// Builds the payload for a retrieval result. A fallback result yields the
/// conservative profile tagged with the rejection reason.
pub fn format_payload(
    result: &RetrievalResult,
    db: &ScenarioDatabase,
    fallback: &ImpedancePayload,
) -> Result<ImpedancePayload, RetrievalError> {
    match result.kind {
        ResultKind::Match => {
            let index = result.record_index.ok_or(RetrievalError::OutOfBounds {
                index: usize::MAX,
                len: db.len(),
            })?;
            let record = db.get(index).ok_or(RetrievalError::OutOfBounds {
                index,
                len: db.len(),
            })?;
            Ok(ImpedancePayload::from_record(record))
        }
        ResultKind::Fallback => Ok(fallback.clone().with_reason(result.reason.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::embedding::HashEmbedder;
    use crate::impedance::fallback_payload;

    fn seed_index() -> ScenarioIndex {
        ScenarioIndex::build(Arc::new(data::seed_database()), &HashEmbedder).unwrap()
    }

    #[test]
    fn builds_one_vector_per_record() {
        let index = seed_index();
        assert_eq!(index.len(), 16);
        let again = seed_index();
        assert_eq!(index.vectors(), again.vectors());
        let empty = ScenarioIndex::build(
            Arc::new(ScenarioDatabase::from_records(vec![]).unwrap()),
            &HashEmbedder,
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn self_retrieval_of_record_3() {
        let index = seed_index();
        let q = index.vectors()[3].clone();
        let r = retrieve(&index, &q, &RetrievalConfig::default()).unwrap();
        assert_eq!(r.kind, ResultKind::Match);
        assert_eq!(r.record_index, Some(3));
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn empty_db_falls_back() {
        let index = ScenarioIndex::build(
            Arc::new(ScenarioDatabase::from_records(vec![]).unwrap()),
            &HashEmbedder,
        )
        .unwrap();
        let r = retrieve(
            &index,
            &EmbeddingVector::zeros(),
            &RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(r.reason, RetrievalReason::EmptyDb);
        let p = format_payload(&r, index.db(), &fallback_payload()).unwrap();
        assert_eq!(p.reason, PayloadReason::EmptyDb);
    }

    #[test]
    fn dimension_mismatch() {
        let index = seed_index();
        assert_eq!(
            retrieve(&index, &[0.0; 3], &RetrievalConfig::default()).unwrap_err(),
            RetrievalError::Dimension(3)
        );
    }

    #[test]
    fn match_payload_carries_record_gains() {
        let index = seed_index();
        let r = retrieve(
            &index,
            &index.vectors()[0].clone(),
            &RetrievalConfig::default(),
        )
        .unwrap();
        let p = format_payload(&r, index.db(), &fallback_payload()).unwrap();
        let rec = &index.db().records()[0];
        assert_eq!(p.kp.to_vec(), rec.gains.kp);
        assert_eq!(p.kd.to_vec(), rec.gains.kd);
        assert_eq!(p.nominal_v, rec.nominal_v);
        assert_eq!(p.scenario_id, rec.scenario_id);
    }

    #[test]
    fn out_of_bounds_record() {
        let index = seed_index();
        let r = RetrievalResult {
            kind: ResultKind::Match,
            record_index: Some(99),
            distance: 0.0,
            runner_up_distance: None,
            reason: RetrievalReason::Ok,
        };
        assert!(matches!(
            format_payload(&r, index.db(), &fallback_payload()),
            Err(RetrievalError::OutOfBounds { index: 99, .. })
        ));
    }

    #[test]
    fn config_bounds() {
        assert!(RetrievalConfig::default().validate().is_ok());
        assert!(RetrievalConfig {
            distance_threshold: 0.0,
            tie_margin: 0.02
        }
        .validate()
        .is_err());
        assert!(RetrievalConfig {
            distance_threshold: 0.9,
            tie_margin: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn nearest_is_sorted() {
        let index = seed_index();
        let top = index.nearest(&index.vectors()[5].clone(), 3).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].0, 5);
        assert!(top[0].1 <= top[1].1 && top[1].1 <= top[2].1);
    }
}
