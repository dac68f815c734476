use std::collections::{BTreeMap, HashMap};

use blocktower::eval::{binomial_ci, pearson, roc_curve, Roc};
use serde::{Deserialize, Serialize};

use crate::session::Session;
use crate::TrialError;

/// What the service knows about a test-split record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordInfo {
    pub id: String,
    pub n_blocks: usize,
    pub fell: bool,
    /// Model fall probability.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeAccuracy {
    pub n_blocks: usize,
    pub count: usize,
    pub accuracy: f64,
    pub accuracy_ci: f64,
    pub model_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub record_id: String,
    pub n_blocks: usize,
    pub fell: bool,
    pub predicted_fall: bool,
    pub model_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResults {
    pub session_id: String,
    pub subject_label: String,
    pub seed: u64,
    pub n_test: usize,
    pub accuracy: f64,
    pub accuracy_ci: f64,
    pub per_size: Vec<SizeAccuracy>,
    pub model_accuracy: f64,
    pub model_accuracy_ci: f64,
    /// Between the subject's 0/1 predictions and model confidences; null when
    /// either side is constant.
    pub pearson: Option<f64>,
    /// Model confidences against ground truth; null if the plan has one label.
    pub model_roc: Option<Roc>,
    pub trials: Vec<ScoredTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub record_id: String,
    pub n_blocks: usize,
    pub fell: bool,
    pub votes: usize,
    pub fall_votes: usize,
    pub fall_fraction: f64,
    pub model_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_sessions: usize,
    pub records: Vec<AggregateRecord>,
    /// Between vote fractions and model confidences.
    pub pearson: Option<f64>,
    pub human_roc: Option<Roc>,
    pub model_roc: Option<Roc>,
}

fn info<'a>(records: &'a HashMap<String, RecordInfo>, id: &str) -> Result<&'a RecordInfo, TrialError> {
    records
        .get(id)
        .ok_or_else(|| TrialError::Storage(format!("session refers to unknown record {id}")))
}

fn accuracy(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn session_results(session: &Session, records: &HashMap<String, RecordInfo>) -> Result<SessionResults, TrialError> {
    if !session.is_complete() {
        return Err(TrialError::SessionIncomplete {
            answered: session.responses.len(),
        });
    }
    let trials: Vec<ScoredTrial> = session
        .test_responses()
        .iter()
        .map(|r| {
            let rec = info(records, &r.record_id)?;
            Ok(ScoredTrial {
                record_id: r.record_id.clone(),
                n_blocks: rec.n_blocks,
                fell: rec.fell,
                predicted_fall: r.prediction.is_fall(),
                model_confidence: rec.confidence,
            })
        })
        .collect::<Result<_, TrialError>>()?;
    let n = trials.len();
    let human_hit = |t: &ScoredTrial| t.predicted_fall == t.fell;
    let model_hit = |t: &ScoredTrial| (t.model_confidence > 0.5) == t.fell;
    let acc = accuracy(trials.iter().filter(|t| human_hit(t)).count(), n);
    let model_acc = accuracy(trials.iter().filter(|t| model_hit(t)).count(), n);

    let mut by_size: BTreeMap<usize, Vec<&ScoredTrial>> = BTreeMap::new();
    for t in &trials {
        by_size.entry(t.n_blocks).or_default().push(t);
    }
    let per_size = by_size
        .into_iter()
        .map(|(n_blocks, ts)| {
            let a = accuracy(ts.iter().filter(|t| human_hit(t)).count(), ts.len());
            SizeAccuracy {
                n_blocks,
                count: ts.len(),
                accuracy: a,
                accuracy_ci: binomial_ci(a, ts.len()),
                model_accuracy: accuracy(ts.iter().filter(|t| model_hit(t)).count(), ts.len()),
            }
        })
        .collect();

    let human: Vec<f64> = trials.iter().map(|t| t.predicted_fall as u8 as f64).collect();
    let conf: Vec<f64> = trials.iter().map(|t| t.model_confidence).collect();
    let fell: Vec<bool> = trials.iter().map(|t| t.fell).collect();
    Ok(SessionResults {
        session_id: session.session_id.clone(),
        subject_label: session.subject_label.clone(),
        seed: session.seed,
        n_test: n,
        accuracy: acc,
        accuracy_ci: binomial_ci(acc, n),
        per_size,
        model_accuracy: model_acc,
        model_accuracy_ci: binomial_ci(model_acc, n),
        pearson: pearson(&human, &conf).ok(),
        model_roc: roc_curve(&conf, &fell).ok(),
        trials,
    })
}

/// Per-record fall-vote fractions over the test phases of complete sessions.
pub fn aggregate<'a>(
    sessions: impl IntoIterator<Item = &'a Session>,
    records: &HashMap<String, RecordInfo>,
) -> Result<AggregateReport, TrialError> {
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut n_sessions = 0;
    for s in sessions.into_iter().filter(|s| s.is_complete()) {
        n_sessions += 1;
        for r in s.test_responses() {
            let v = votes.entry(r.record_id.as_str()).or_default();
            v.0 += 1;
            v.1 += r.prediction.is_fall() as usize;
        }
    }
    if n_sessions == 0 {
        return Err(TrialError::NoCompleteSessions);
    }
    let records: Vec<AggregateRecord> = votes
        .into_iter()
        .map(|(id, (n, f))| {
            let rec = info(records, id)?;
            Ok(AggregateRecord {
                record_id: id.to_string(),
                n_blocks: rec.n_blocks,
                fell: rec.fell,
                votes: n,
                fall_votes: f,
                fall_fraction: f as f64 / n as f64,
                model_confidence: rec.confidence,
            })
        })
        .collect::<Result<_, TrialError>>()?;
    let frac: Vec<f64> = records.iter().map(|r| r.fall_fraction).collect();
    let conf: Vec<f64> = records.iter().map(|r| r.model_confidence).collect();
    let fell: Vec<bool> = records.iter().map(|r| r.fell).collect();
    Ok(AggregateReport {
        n_sessions,
        pearson: pearson(&frac, &conf).ok(),
        human_roc: roc_curve(&frac, &fell).ok(),
        model_roc: roc_curve(&conf, &fell).ok(),
        records,
    })
}
