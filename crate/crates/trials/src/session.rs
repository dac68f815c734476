use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use blocktower::rng::{derive_seed, SeededRng};
use serde::{Deserialize, Serialize};

use crate::TrialError;

pub const N_TRAINING: usize = 50;
pub const N_TEST: usize = 100;
pub const N_TRIALS: usize = N_TRAINING + N_TEST;

const PLAN_STREAM: u64 = 0x504c_414e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Fall,
    Stay,
}

impl Answer {
    pub fn is_fall(self) -> bool {
        self == Answer::Fall
    }
}

impl std::str::FromStr for Answer {
    type Err = TrialError;

    fn from_str(s: &str) -> Result<Self, TrialError> {
        match s {
            "fall" => Ok(Answer::Fall),
            "stay" => Ok(Answer::Stay),
            other => Err(TrialError::BadPrediction(format!("{other:?} is not fall or stay"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    InTraining,
    InTest,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub record_id: String,
    pub phase: Phase,
    pub prediction: Answer,
    pub correct: bool,
    pub timestamp_ms: u64,
}

/// How many records of each tower size went into each plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub training: BTreeMap<usize, usize>,
    pub test: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub subject_label: String,
    pub seed: u64,
    /// False when the seed was drawn by the server rather than supplied.
    pub seed_provided: bool,
    pub created_ms: u64,
    pub training_plan: Vec<String>,
    pub test_plan: Vec<String>,
    pub composition: Composition,
    pub state: SessionState,
    pub responses: Vec<Response>,
}

/// Candidate record for a plan: id and tower size.
#[derive(Debug, Clone)]
pub struct PlanRecord {
    pub id: String,
    pub n_blocks: usize,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A 64-bit value from the process's hash randomization.
pub fn fresh_u64() -> u64 {
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u64(now_ms());
    h.finish()
}

/// Draws disjoint training and test plans without replacement. Sizes are
/// taken round-robin from independently shuffled per-size pools, so each
/// plan is as even across sizes as the pools allow; each plan is then
/// shuffled.
pub fn draw_plans(records: &[PlanRecord], seed: u64) -> Result<(Vec<String>, Vec<String>, Composition), TrialError> {
    if records.len() < N_TRIALS {
        return Err(TrialError::InsufficientDataset {
            available: records.len(),
            needed: N_TRIALS,
        });
    }
    let mut rng = SeededRng::new(derive_seed(seed, PLAN_STREAM));
    let mut pools: BTreeMap<usize, Vec<&PlanRecord>> = BTreeMap::new();
    for r in records {
        pools.entry(r.n_blocks).or_default().push(r);
    }
    for pool in pools.values_mut() {
        rng.shuffle(pool);
    }
    let mut picked: Vec<&PlanRecord> = Vec::with_capacity(N_TRIALS);
    let mut cursor = 0;
    while picked.len() < N_TRIALS {
        for pool in pools.values() {
            if picked.len() < N_TRIALS && cursor < pool.len() {
                picked.push(pool[cursor]);
            }
        }
        cursor += 1;
    }
    let (mut training, mut test) = (picked[..N_TRAINING].to_vec(), picked[N_TRAINING..].to_vec());
    rng.shuffle(&mut training);
    rng.shuffle(&mut test);
    let count = |plan: &[&PlanRecord]| {
        let mut m = BTreeMap::new();
        for r in plan {
            *m.entry(r.n_blocks).or_insert(0) += 1;
        }
        m
    };
    let composition = Composition {
        training: count(&training),
        test: count(&test),
    };
    let ids = |plan: Vec<&PlanRecord>| plan.into_iter().map(|r| r.id.clone()).collect();
    Ok((ids(training), ids(test), composition))
}

impl Session {
    pub fn new(session_id: String, subject_label: String, seed: Option<u64>, records: &[PlanRecord]) -> Result<Self, TrialError> {
        let seed_provided = seed.is_some();
        let seed = seed.unwrap_or_else(fresh_u64);
        let (training_plan, test_plan, composition) = draw_plans(records, seed)?;
        Ok(Self {
            session_id,
            subject_label,
            seed,
            seed_provided,
            created_ms: now_ms(),
            training_plan,
            test_plan,
            composition,
            state: SessionState::InTraining,
            responses: Vec::new(),
        })
    }

    /// Index of the next unanswered trial, or `None` once complete.
    pub fn pending(&self) -> Option<usize> {
        let n = self.responses.len();
        (n < N_TRIALS).then_some(n)
    }

    pub fn trial(&self, index: usize) -> (Phase, usize, &str) {
        if index < N_TRAINING {
            (Phase::Training, index, &self.training_plan[index])
        } else {
            (Phase::Test, index - N_TRAINING, &self.test_plan[index - N_TRAINING])
        }
    }

    pub fn is_complete(&self) -> bool {
        self.state == SessionState::Complete
    }

    /// Records an answer to the pending trial.
    pub fn answer(&mut self, prediction: Answer, fell: bool) -> Result<&Response, TrialError> {
        let index = self.pending().ok_or(TrialError::NoPendingTrial)?;
        let (phase, _, id) = self.trial(index);
        let response = Response {
            record_id: id.to_string(),
            phase,
            prediction,
            correct: prediction.is_fall() == fell,
            timestamp_ms: now_ms(),
        };
        self.responses.push(response);
        self.state = match self.responses.len() {
            n if n < N_TRAINING => SessionState::InTraining,
            n if n < N_TRIALS => SessionState::InTest,
            _ => SessionState::Complete,
        };
        Ok(self.responses.last().expect("just pushed"))
    }

    /// Test-phase responses in plan order.
    pub fn test_responses(&self) -> &[Response] {
        &self.responses[N_TRAINING.min(self.responses.len())..]
    }

    pub fn path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.json"))
    }

    /// Writes to a temporary file, syncs, then renames over the old copy.
    pub fn persist(&self, dir: &Path) -> Result<(), TrialError> {
        let path = Self::path(dir, &self.session_id);
        let tmp = dir.join(format!("{}.json.tmp", self.session_id));
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| TrialError::Storage(e.to_string()))?;
        let io = |e: std::io::Error| TrialError::Storage(format!("{}: {e}", path.display()));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)?;
        Ok(())
    }

    /// Every `*.json` session in `dir`; leftover temporaries are ignored.
    pub fn load_all(dir: &Path) -> Result<Vec<Session>, TrialError> {
        let io = |e: std::io::Error| TrialError::Storage(format!("{}: {e}", dir.display()));
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let bytes = fs::read(&p).map_err(io)?;
            let s: Session = serde_json::from_slice(&bytes)
                .map_err(|e| TrialError::Storage(format!("{}: {e}", p.display())))?;
            out.push(s);
        }
        Ok(out)
    }
}
