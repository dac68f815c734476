use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use blocktower::dataset::{load_example, read_manifest, DatasetRecord};
use blocktower::learn::Model;
use blocktower::pnm;
use blocktower::scenegen::Split;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report::{aggregate, session_results, AggregateReport, RecordInfo, SessionResults};
use crate::session::{fresh_u64, Answer, Phase, PlanRecord, Session, N_TEST, N_TRAINING};
use crate::TrialError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub n_training: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub session_id: String,
    /// Position over all 150 trials.
    pub trial_index: usize,
    pub phase: Phase,
    pub phase_index: usize,
    pub phase_length: usize,
    /// URL of the t = 0 frame.
    pub image: String,
}

/// Reply to an answer. Test-phase replies serialize as `{}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Feedback {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_image: Option<String>,
}

pub fn image_url(id: &str, frame: u32) -> String {
    format!("/api/image/{id}/{frame}")
}

struct Record {
    info: RecordInfo,
    image_path: PathBuf,
    outcome_path: PathBuf,
}

/// Session bookkeeping shared by all request handlers. Each session sits
/// behind its own mutex, so answers to one session are serialized while
/// other sessions proceed.
pub struct TrialService {
    sessions_dir: PathBuf,
    records: HashMap<String, Record>,
    infos: HashMap<String, RecordInfo>,
    plan_pool: Vec<PlanRecord>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

/// Model fall probability for every test-split record, keyed by id.
pub fn model_confidences(dataset_dir: &Path, model: &dyn Model<f32>) -> Result<HashMap<String, f64>, TrialError> {
    let manifest = read_manifest(dataset_dir).map_err(|e| TrialError::Dataset(e.to_string()))?;
    manifest
        .records
        .par_iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| {
            let ex = load_example(dataset_dir, r).map_err(|e| TrialError::Dataset(e.to_string()))?;
            if ex.image.width != model.image_size() || ex.image.height != model.image_size() {
                return Err(TrialError::Dataset(format!(
                    "record {} is {}x{}, model expects {}",
                    r.id,
                    ex.image.width,
                    ex.image.height,
                    model.image_size()
                )));
            }
            Ok((r.id.clone(), model.fall_prob(&ex.image.to_chw_f32()) as f64))
        })
        .collect()
}

impl TrialService {
    /// Loads the test split of `dataset_dir` and every session already in
    /// `sessions_dir`. `confidences` must cover every test record.
    pub fn open(dataset_dir: &Path, sessions_dir: &Path, confidences: &HashMap<String, f64>) -> Result<Self, TrialError> {
        let manifest = read_manifest(dataset_dir).map_err(|e| TrialError::Dataset(e.to_string()))?;
        let test: Vec<&DatasetRecord> = manifest.records.iter().filter(|r| r.split == Split::Test).collect();
        let mut records = HashMap::new();
        let mut plan_pool = Vec::new();
        for r in test {
            let confidence = *confidences
                .get(&r.id)
                .ok_or_else(|| TrialError::Dataset(format!("no model confidence for {}", r.id)))?;
            plan_pool.push(PlanRecord {
                id: r.id.clone(),
                n_blocks: r.n_blocks,
            });
            let info = RecordInfo {
                id: r.id.clone(),
                n_blocks: r.n_blocks,
                fell: r.fell,
                confidence,
            };
            records.insert(
                r.id.clone(),
                Record {
                    info,
                    image_path: dataset_dir.join(&r.image_path),
                    outcome_path: dataset_dir.join(&r.outcome_image_path),
                },
            );
        }
        let infos = records.iter().map(|(k, v)| (k.clone(), v.info.clone())).collect();
        fs::create_dir_all(sessions_dir).map_err(|e| TrialError::Storage(format!("{}: {e}", sessions_dir.display())))?;
        let sessions = Session::load_all(sessions_dir)?
            .into_iter()
            .map(|s| (s.session_id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self {
            sessions_dir: sessions_dir.to_path_buf(),
            records,
            infos,
            plan_pool,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn test_record_count(&self) -> usize {
        self.plan_pool.len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, TrialError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| TrialError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self, subject_label: String, seed: Option<u64>) -> Result<CreatedSession, TrialError> {
        let mut table = self.sessions.write().expect("session table poisoned");
        let id = loop {
            let id = format!("{:016x}", fresh_u64());
            if !table.contains_key(&id) {
                break id;
            }
        };
        let session = Session::new(id.clone(), subject_label, seed, &self.plan_pool)?;
        session.persist(&self.sessions_dir)?;
        table.insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(CreatedSession {
            session_id: id,
            n_training: N_TRAINING,
            n_test: N_TEST,
        })
    }

    pub fn current_trial(&self, id: &str) -> Result<TrialView, TrialError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session poisoned");
        let index = s.pending().ok_or(TrialError::SessionComplete)?;
        let (phase, phase_index, record) = s.trial(index);
        Ok(TrialView {
            session_id: s.session_id.clone(),
            trial_index: index,
            phase,
            phase_index,
            phase_length: if phase == Phase::Training { N_TRAINING } else { N_TEST },
            image: image_url(record, 0),
        })
    }

    /// Records an answer and persists the session before returning.
    /// `trial_index`, when given, must name the pending trial; that is how a
    /// repeated submission for an already answered trial is detected.
    pub fn respond(&self, id: &str, prediction: Answer, trial_index: Option<usize>) -> Result<Feedback, TrialError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        let pending = s.pending().ok_or(TrialError::NoPendingTrial)?;
        if trial_index.is_some_and(|t| t != pending) {
            return Err(TrialError::NoPendingTrial);
        }
        let (_, _, record) = s.trial(pending);
        let fell = self
            .infos
            .get(record)
            .ok_or_else(|| TrialError::Storage(format!("session refers to unknown record {record}")))?
            .fell;
        let before = s.clone();
        let response = s.answer(prediction, fell)?.clone();
        if let Err(e) = s.persist(&self.sessions_dir) {
            *s = before;
            return Err(e);
        }
        Ok(match response.phase {
            Phase::Training => Feedback {
                correct: Some(response.correct),
                outcome_image: Some(image_url(&response.record_id, 4)),
            },
            Phase::Test => Feedback::default(),
        })
    }

    pub fn results(&self, id: &str) -> Result<SessionResults, TrialError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session poisoned");
        session_results(&s, &self.infos)
    }

    pub fn aggregate(&self) -> Result<AggregateReport, TrialError> {
        let handles: Vec<Arc<Mutex<Session>>> = self.sessions.read().expect("session table poisoned").values().cloned().collect();
        let sessions: Vec<Session> = handles
            .iter()
            .map(|h| h.lock().expect("session poisoned").clone())
            .collect();
        aggregate(&sessions, &self.infos)
    }

    /// PNG bytes of frame 0 (initial) or 4 (outcome at 4 s).
    pub fn image_png(&self, id: &str, frame: &str) -> Result<Vec<u8>, TrialError> {
        let rec = self.records.get(id).ok_or_else(|| TrialError::UnknownImage(id.to_string()))?;
        let path = match frame {
            "0" => &rec.image_path,
            "4" => &rec.outcome_path,
            other => return Err(TrialError::UnknownImage(format!("{id}/{other}"))),
        };
        let bytes = fs::read(path).map_err(|e| TrialError::Dataset(format!("{}: {e}", path.display())))?;
        let img = pnm::decode_ppm(&bytes).map_err(|e| TrialError::Dataset(format!("{}: {e}", path.display())))?;
        let rgb = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data)
            .ok_or_else(|| TrialError::Dataset(format!("{}: short raster", path.display())))?;
        let mut out = Cursor::new(Vec::new());
        rgb.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| TrialError::Dataset(e.to_string()))?;
        Ok(out.into_inner())
    }
}
