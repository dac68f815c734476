//! On-disk dataset: a `manifest.jsonl` with one record per line, a
//! `dataset.json` header, and one directory per example holding
//! `img0.ppm`, `img4.ppm`, `mask{0,1,2,4}.pgm` and `traj.csv`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{fell_label, simulate, PhysicsError, Trajectory};
use crate::pnm::{self, PnmError};
use crate::render::{render_sequence, Camera, Image, MaskImage, RenderError, MASK_TIMES};
use crate::scenegen::{GenConfig, SceneSample, Split};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HEADER_FILE: &str = "dataset.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("record {id}: {reason}")]
    ConsistencyFailure { id: String, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    fn corrupt(path: &Path, reason: impl ToString) -> Self {
        DatasetError::CorruptFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

impl SplitFilter {
    pub fn accepts(self, split: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Train => split == Split::Train,
            SplitFilter::Test => split == Split::Test,
        }
    }
}

impl std::str::FromStr for SplitFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One manifest line. Paths are relative to the dataset directory.
/// Imported images have no masks, no trajectory and no margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub seed: u64,
    pub index: u64,
    pub n_blocks: usize,
    pub fell: bool,
    pub margin: Option<f64>,
    pub split: Split,
    pub image_path: String,
    pub outcome_image_path: String,
    pub mask_paths: Vec<String>,
    pub trajectory_path: String,
}

impl DatasetRecord {
    pub fn has_masks(&self) -> bool {
        self.mask_paths.len() == MASK_TIMES.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub gen_config: GenConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub gen_config: GenConfig,
    pub records: Vec<DatasetRecord>,
}

/// A decoded example.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: DatasetRecord,
    pub image: Image,
    /// Masks at 0, 1, 2 and 4 s; `None` for imported images.
    pub masks: Option<[MaskImage; 4]>,
}

fn split_of(index: u64) -> Split {
    if index >> 62 == 1 {
        Split::Test
    } else {
        Split::Train
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|e| DatasetError::io(path, e))
}

/// Simulates, renders and writes every sample, then the manifest.
pub fn write_dataset(
    samples: &[SceneSample],
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
    let mut counters = [0usize; 2];
    let ids: Vec<String> = samples
        .iter()
        .map(|s| {
            let split = split_of(s.index);
            let k = &mut counters[split as usize];
            *k += 1;
            format!("{}-{:05}", split.as_str(), *k - 1)
        })
        .collect();

    let records: Vec<DatasetRecord> = samples
        .par_iter()
        .zip(ids.par_iter())
        .map(|(s, id)| write_example(s, id, cfg, out_dir))
        .collect::<Result<_, _>>()?;

    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        gen_config: cfg.clone(),
    };
    let header_json = serde_json::to_string_pretty(&header).expect("header serializes");
    write_file(&out_dir.join(HEADER_FILE), format!("{header_json}\n").as_bytes())?;
    write_manifest_lines(out_dir, &records)?;
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        gen_config: cfg.clone(),
        records,
    })
}

fn write_manifest_lines(dir: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn write_example(
    s: &SceneSample,
    id: &str,
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<DatasetRecord, DatasetError> {
    let traj = simulate(&s.scene)?;
    let fell = fell_label(&traj, s.scene.params());
    if fell != s.label_fell {
        return Err(DatasetError::ConsistencyFailure {
            id: id.to_string(),
            reason: format!("sample says fell={}, simulation says {fell}", s.label_fell),
        });
    }
    let side = s.scene.params().side;
    let cam = Camera::for_tower(s.n_blocks(), side, &s.render, cfg.image_size);
    let frames = render_sequence(&traj, s.scene.class_ids(), side, &cam, &s.render, &MASK_TIMES)?;

    let dir = out_dir.join(id);
    fs::create_dir_all(&dir).map_err(|e| DatasetError::io(&dir, e))?;
    let rel = |name: &str| format!("{id}/{name}");
    write_file(&dir.join("img0.ppm"), &pnm::encode_ppm(&frames[0].0))?;
    write_file(&dir.join("img4.ppm"), &pnm::encode_ppm(&frames[3].0))?;
    let mut mask_paths = Vec::with_capacity(4);
    for (t, (_, mask)) in MASK_TIMES.iter().zip(&frames) {
        let name = format!("mask{}.pgm", *t as u32);
        write_file(&dir.join(&name), &pnm::encode_mask_pgm(mask))?;
        mask_paths.push(rel(&name));
    }
    write_file(&dir.join("traj.csv"), traj.to_csv().as_bytes())?;

    Ok(DatasetRecord {
        id: id.to_string(),
        seed: s.seed,
        index: s.index,
        n_blocks: s.n_blocks(),
        fell,
        margin: s.margin.is_finite().then_some(s.margin),
        split: split_of(s.index),
        image_path: rel("img0.ppm"),
        outcome_image_path: rel("img4.ppm"),
        mask_paths,
        trajectory_path: rel("traj.csv"),
    })
}

/// Reads `dataset.json` and `manifest.jsonl`.
pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let header_path = dir.join(HEADER_FILE);
    let header: DatasetHeader = serde_json::from_slice(&read_file(&header_path)?)
        .map_err(|e| DatasetError::corrupt(&header_path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(DatasetError::corrupt(
            &header_path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|e| DatasetError::corrupt(&manifest_path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::corrupt(&manifest_path, format!("line {}: {e}", ln + 1)))?;
        if !ids.insert(r.id.clone()) {
            return Err(DatasetError::InvalidManifest(format!("duplicate id {}", r.id)));
        }
        records.push(r);
    }
    Ok(Manifest {
        format_version: header.format_version,
        gen_config: header.gen_config,
        records,
    })
}

fn load_image(dir: &Path, rel: &str) -> Result<Image, DatasetError> {
    let path = dir.join(rel);
    pnm::decode_ppm(&read_file(&path)?).map_err(|e: PnmError| DatasetError::corrupt(&path, e))
}

fn load_mask(dir: &Path, rel: &str) -> Result<MaskImage, DatasetError> {
    let path = dir.join(rel);
    pnm::decode_mask_pgm(&read_file(&path)?).map_err(|e| DatasetError::corrupt(&path, e))
}

pub fn load_example(dir: &Path, record: &DatasetRecord) -> Result<Example, DatasetError> {
    let image = load_image(dir, &record.image_path)?;
    let masks = if record.has_masks() {
        let m: Vec<MaskImage> = record
            .mask_paths
            .iter()
            .map(|p| load_mask(dir, p))
            .collect::<Result<_, _>>()?;
        for (mask, p) in m.iter().zip(&record.mask_paths) {
            if (mask.width, mask.height) != (image.width, image.height) {
                return Err(DatasetError::corrupt(&dir.join(p), "mask size differs from image"));
            }
        }
        Some(m.try_into().expect("four masks"))
    } else {
        None
    };
    Ok(Example {
        record: record.clone(),
        image,
        masks,
    })
}

/// Loads every record of `split` in manifest order.
pub fn load_dataset(dir: &Path, split: SplitFilter) -> Result<Vec<Example>, DatasetError> {
    let manifest = read_manifest(dir)?;
    manifest
        .records
        .par_iter()
        .filter(|r| split.accepts(r.split))
        .map(|r| load_example(dir, r))
        .collect()
}

pub fn load_trajectory(dir: &Path, record: &DatasetRecord, cfg: &GenConfig) -> Result<Trajectory, DatasetError> {
    let path = dir.join(&record.trajectory_path);
    let text = String::from_utf8(read_file(&path)?).map_err(|e| DatasetError::corrupt(&path, e))?;
    Trajectory::from_csv(&text, cfg.physics.sim_duration).map_err(|e| DatasetError::corrupt(&path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub records: usize,
    pub imported: usize,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Re-checks file presence and parsing, mask value ranges, image sizes and
/// label/trajectory agreement for every record.
pub fn verify(dir: &Path) -> Result<VerifyReport, DatasetError> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.gen_config;
    let checks: Vec<(bool, Vec<String>)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let mut problems = Vec::new();
            let imported = r.trajectory_path.is_empty();
            match load_example(dir, r) {
                Ok(ex) => {
                    if ex.image.width != cfg.image_size && !imported {
                        problems.push(format!("{}: image width {}", r.id, ex.image.width));
                    }
                }
                Err(e) => problems.push(format!("{}: {e}", r.id)),
            }
            if !imported {
                if !r.has_masks() {
                    problems.push(format!("{}: expected 4 masks", r.id));
                }
                match load_trajectory(dir, r, cfg) {
                    Ok(traj) => {
                        if traj.n_blocks() != r.n_blocks {
                            problems.push(format!("{}: trajectory has {} blocks", r.id, traj.n_blocks()));
                        }
                        if fell_label(&traj, &cfg.physics) != r.fell {
                            problems.push(format!("{}: label disagrees with trajectory", r.id));
                        }
                    }
                    Err(e) => problems.push(format!("{}: {e}", r.id)),
                }
            }
            (imported, problems)
        })
        .collect();
    let mut report = VerifyReport {
        records: manifest.records.len(),
        ..Default::default()
    };
    for (imported, problems) in checks {
        report.imported += imported as usize;
        report.problems.extend(problems);
    }
    Ok(report)
}

/// Adds an externally captured image as a fall-only record.
pub fn import_image(
    dir: &Path,
    id: &str,
    image: &Image,
    n_blocks: usize,
    fell: bool,
    split: Split,
) -> Result<DatasetRecord, DatasetError> {
    let manifest = read_manifest(dir)?;
    if manifest.records.iter().any(|r| r.id == id) {
        return Err(DatasetError::InvalidManifest(format!("duplicate id {id}")));
    }
    let sub = dir.join(id);
    fs::create_dir_all(&sub).map_err(|e| DatasetError::io(&sub, e))?;
    write_file(&sub.join("img0.ppm"), &pnm::encode_ppm(image))?;
    let record = DatasetRecord {
        id: id.to_string(),
        seed: 0,
        index: 0,
        n_blocks,
        fell,
        margin: None,
        split,
        image_path: format!("{id}/img0.ppm"),
        outcome_image_path: String::new(),
        mask_paths: Vec::new(),
        trajectory_path: String::new(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| DatasetError::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))
        .map_err(|e| DatasetError::io(&path, e))?;
    Ok(record)
}
