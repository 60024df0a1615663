//! Dataset tooling: synthetic corpora, JSONL manifests, parameter
//! statistics and normalization, and a CSV ingest adapter for recorded
//! acquisitions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonoError};
use crate::frame::Frame;
use crate::phantom::{
    derive_wrench, Class, Label, Phantom, Pose, PoseCondition, View, NUM_PARAMS, NUM_VIEWS, PARAM_NAMES, POSE_WEIGHTS,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATA_DIR_ENV: &str = "SONORL_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Relative to the manifest directory unless absolute.
    pub image_path: String,
    /// Acquisition units, ordered as [`PARAM_NAMES`].
    pub params: [f64; NUM_PARAMS],
    pub class: Class,
    pub grade: f64,
}

impl DatasetRecord {
    pub fn condition(&self) -> Result<PoseCondition> {
        PoseCondition::from_acquisition_units(&self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Manifest {
    pub fn image_path(&self, r: &DatasetRecord) -> PathBuf {
        let p = Path::new(&r.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a manifest, checking that every referenced image exists and
    /// every parameter is finite.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::load_unchecked(path)?;
        m.check()?;
        Ok(m)
    }

    /// Reads a manifest without touching the referenced images.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DatasetRecord = serde_json::from_str(&line)
                .map_err(|e| SonoError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        Ok(Self { root, records })
    }

    fn check(&self) -> Result<()> {
        for r in &self.records {
            if let Some(j) = r.params.iter().position(|v| !v.is_finite()) {
                return Err(SonoError::Data(format!("{}: {} is not finite", r.image_path, PARAM_NAMES[j])));
            }
            let p = self.image_path(r);
            if !p.exists() {
                return Err(SonoError::Data(format!("missing image {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_frame(&self, r: &DatasetRecord, size: usize) -> Result<Frame> {
        load_frame(&self.image_path(r), size)
    }
}

/// One synthetic sample held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub condition: PoseCondition,
    pub frame: Frame,
    pub label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: usize,
    /// Share of records drawn near each named view.
    pub per_view_fraction: f64,
    /// Range of the view score targeted by stratified draws.
    pub min_score: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            per_view_fraction: 0.16,
            min_score: 0.08,
            seed: 3,
        }
    }
}

/// Pose whose score for `view` is close to `score`: a random direction
/// in the weighted pose metric at the matching distance, clamped to the
/// cube.
pub fn pose_near_view(phantom: &Phantom, view: View, score: f64, rng: &mut impl Rng) -> Pose {
    let sigma = phantom.config().sigma;
    let dist = sigma * (-2.0 * score.ln()).sqrt();
    let dir: [f64; 6] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    let c = phantom.canonical_pose(view);
    std::array::from_fn(|i| (c[i] + dist * dir[i] / norm / POSE_WEIGHTS[i].sqrt()).clamp(-1.0, 1.0))
}

/// Poses for a corpus: `ceil(count * per_view_fraction)` per named view
/// with scores uniform in `[min_score, 1]`, the rest uniform on the cube.
pub fn sample_poses(phantom: &Phantom, cfg: &GenConfig) -> Result<Vec<PoseCondition>> {
    if cfg.count == 0 {
        return Err(SonoError::Contract("dataset count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_view = (cfg.count as f64 * cfg.per_view_fraction).ceil() as usize;
    let mut out = Vec::with_capacity(cfg.count);
    for v in View::ALL {
        for _ in 0..per_view {
            if out.len() == cfg.count {
                break;
            }
            let s = rng.gen_range(cfg.min_score..=1.0);
            let q = pose_near_view(phantom, v, s, &mut rng);
            out.push(PoseCondition::from_parts(derive_wrench(&q, &mut rng), q));
        }
    }
    while out.len() < cfg.count {
        let q: Pose = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        out.push(PoseCondition::from_parts(derive_wrench(&q, &mut rng), q));
    }
    Ok(out)
}

/// Renders `conds` across the available cores; output order follows input.
pub fn render_all(phantom: &Phantom, conds: &[PoseCondition]) -> Vec<Frame> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(conds.len().max(1));
    let chunk = conds.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = conds
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|x| phantom.render(x)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("render worker")).collect()
    })
}

pub fn synth_corpus(phantom: &Phantom, cfg: &GenConfig) -> Result<Vec<Sample>> {
    let conds = sample_poses(phantom, cfg)?;
    let frames = render_all(phantom, &conds);
    Ok(conds
        .into_iter()
        .zip(frames)
        .map(|(condition, frame)| Sample {
            label: phantom.label(&condition.pose()),
            condition,
            frame,
        })
        .collect())
}

/// Writes a synthetic corpus (`frames/NNNNNN.pgm` plus the manifest) into
/// `dir`.
pub fn gen_dataset(phantom: &Phantom, cfg: &GenConfig, dir: &Path) -> Result<Manifest> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let samples = synth_corpus(phantom, cfg)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("frames/{i:06}.pgm");
        s.frame.write_pgm(&dir.join(&rel))?;
        records.push(DatasetRecord {
            image_path: rel,
            params: s.condition.to_acquisition_units(),
            class: s.label.class,
            grade: s.label.grade,
        });
    }
    let m = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-column min, max, mean and population standard deviation.
pub fn compute_stats(records: &[DatasetRecord]) -> Result<[ParamStats; NUM_PARAMS]> {
    if records.is_empty() {
        return Err(SonoError::Data("statistics of an empty manifest".into()));
    }
    let n = records.len() as f64;
    Ok(std::array::from_fn(|j| {
        let col = records.iter().map(|r| r.params[j]);
        let min = col.clone().fold(f64::INFINITY, f64::min);
        let max = col.clone().fold(f64::NEG_INFINITY, f64::max);
        let mean = (col.clone().sum::<f64>() / n).clamp(min, max);
        let var = col.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        ParamStats {
            min,
            max,
            mean,
            std: var.sqrt(),
        }
    }))
}

pub fn format_stats_table(stats: &[ParamStats; NUM_PARAMS]) -> String {
    let mut s = format!("{:<12} {:>12} {:>12} {:>12} {:>12}\n", "parameter", "min", "max", "mean", "std");
    for (name, st) in PARAM_NAMES.iter().zip(stats) {
        s.push_str(&format!(
            "{name:<12} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
            st.min, st.max, st.mean, st.std
        ));
    }
    s
}

/// Min-max maps each column to `[-1, 1]`. Degenerate columns map to 0.
pub fn normalize_params(params: &[f64; NUM_PARAMS], stats: &[ParamStats; NUM_PARAMS]) -> [f64; NUM_PARAMS] {
    std::array::from_fn(|j| {
        let st = stats[j];
        if st.max > st.min {
            2.0 * (params[j] - st.min) / (st.max - st.min) - 1.0
        } else {
            log::warn!("{} is constant; normalizing to 0", PARAM_NAMES[j]);
            0.0
        }
    })
}

pub fn denormalize_params(norm: &[f64; NUM_PARAMS], stats: &[ParamStats; NUM_PARAMS]) -> [f64; NUM_PARAMS] {
    std::array::from_fn(|j| {
        let st = stats[j];
        (norm[j] + 1.0) / 2.0 * (st.max - st.min) + st.min
    })
}

/// 8-bit grayscale to a `[-1, 1]` frame, resized bilinearly to `size`.
pub fn normalize_image(gray: &image::GrayImage, size: usize) -> Frame {
    let s = size as u32;
    let img = if gray.width() == s && gray.height() == s {
        gray.clone()
    } else {
        image::imageops::resize(gray, s, s, FilterType::Triangle)
    };
    let data = img.pixels().map(|p| (f64::from(p.0[0]) / 255.0 - 0.5) / 0.5).collect();
    Frame::new(size, data).expect("resized image is square")
}

pub fn denormalize_image(frame: &Frame) -> Vec<u8> {
    frame.to_gray8()
}

pub fn load_frame(path: &Path, size: usize) -> Result<Frame> {
    let img = image::open(path)?.to_luma8();
    Ok(normalize_image(&img, size))
}

/// Header names accepted for the image column of an acquisition CSV.
const IMAGE_COLUMNS: [&str; 5] = ["image_path", "image", "filename", "file", "path"];
const CLASS_COLUMNS: [&str; 3] = ["class", "view", "label"];
const GRADE_COLUMNS: [&str; 2] = ["grade", "quality"];

fn find_column(idx: &HashMap<String, usize>, names: &[&str]) -> Option<usize> {
    names.iter().find_map(|n| idx.get(&n.to_ascii_lowercase()).copied())
}

/// Maps an acquisition CSV (one row per frame, the 12 parameter columns
/// by name, an image column and optional class and grade columns) into
/// a manifest rooted at the CSV's directory. Rows without a class are
/// recorded as Random with grade 0. With `require_images` false, rows are
/// accepted even when their image is absent.
pub fn ingest_csv(path: &Path, require_images: bool) -> Result<Manifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let idx: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_ascii_lowercase(), i))
        .collect();
    let param_cols: Vec<usize> = PARAM_NAMES
        .iter()
        .map(|n| {
            find_column(&idx, &[n]).ok_or_else(|| SonoError::Data(format!("{}: no `{n}` column", path.display())))
        })
        .collect::<Result<_>>()?;
    let image_col = find_column(&idx, &IMAGE_COLUMNS);
    let class_col = find_column(&idx, &CLASS_COLUMNS);
    let grade_col = find_column(&idx, &GRADE_COLUMNS);
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let mut params = [0.0; NUM_PARAMS];
        for (j, &c) in param_cols.iter().enumerate() {
            params[j] = field(c).parse().map_err(|_| {
                SonoError::Data(format!("{} row {}: bad {} `{}`", path.display(), line + 2, PARAM_NAMES[j], field(c)))
            })?;
        }
        let class = match class_col.map(field).filter(|s| !s.is_empty()) {
            Some(s) => s.parse()?,
            None => Class::Random,
        };
        let grade = match grade_col.map(field).filter(|s| !s.is_empty()) {
            Some(s) => s
                .parse()
                .map_err(|_| SonoError::Data(format!("{} row {}: bad grade `{s}`", path.display(), line + 2)))?,
            None => 0.0,
        };
        records.push(DatasetRecord {
            image_path: image_col.map(field).unwrap_or_default().to_string(),
            params,
            class,
            grade,
        });
    }
    let m = Manifest { root, records };
    if require_images {
        m.check()?;
    }
    Ok(m)
}

fn csv_err(e: csv::Error) -> SonoError {
    SonoError::Data(format!("csv: {e}"))
}

/// Finds a dataset under `dir`: a JSONL manifest, else the first CSV.
pub fn locate_dataset(dir: &Path) -> Option<PathBuf> {
    let m = dir.join(MANIFEST_FILE);
    if m.is_file() {
        return Some(m);
    }
    let mut csvs: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    csvs.sort();
    csvs.into_iter().next()
}

/// Loads whatever [`locate_dataset`] finds.
pub fn open_dataset(path: &Path, require_images: bool) -> Result<Manifest> {
    let file = if path.is_dir() {
        locate_dataset(path).ok_or_else(|| SonoError::Data(format!("no manifest or csv under {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    if file.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")) {
        ingest_csv(&file, require_images)
    } else if require_images {
        Manifest::load(&file)
    } else {
        Manifest::load_unchecked(&file)
    }
}

/// Class counts over a record set.
pub fn class_histogram(records: &[DatasetRecord]) -> [usize; NUM_VIEWS + 1] {
    let mut h = [0; NUM_VIEWS + 1];
    for r in records {
        h[r.class.index()] += 1;
    }
    h
}
