//! Synthetic two-view scene generation and the on-disk dataset container.
//!
//! Each pair samples a relative pose, 3D points visible in both views,
//! Gaussian pixel noise for inliers and uniform re-draws of the second view
//! point for outliers. Match distinctiveness ratios are simulated from two
//! overlapping Beta densities so the prior module has something to estimate.
//!
//! Generation is a pure function of `(config, pair index)`: every pair gets
//! its own counter-mode RNG stream, so datasets are reproducible and pairs
//! can be generated in parallel.

use std::fs;
use std::io::{Cursor, Read as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{
    essential_from_pose, CameraIntrinsics, Correspondence, EssentialMatrix, GeometryError, Pose,
};
use crate::linalg::{rotation_from_axis_angle, Mat3, Vec3};

const RECORD_MAGIC: &[u8; 4] = b"EPF1";
const MANIFEST_VERSION: u32 = 1;
const DEPTH_RANGE: (f64, f64) = (4.0, 12.0);
const MIN_DEPTH_SECOND_VIEW: f64 = 0.1;
const VISIBILITY_RETRIES: usize = 1000;

/// Distinctiveness ratio densities used for simulation: inliers concentrate
/// at low ratios, outliers at high ones.
pub const INLIER_RATIO_BETA: (f64, f64) = (2.0, 5.0);
pub const OUTLIER_RATIO_BETA: (f64, f64) = (5.0, 2.0);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place a 3D point visible in both views after {0} retries")]
    VisibilityFailure(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse failure: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported dataset version {found} (expected {MANIFEST_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checksum mismatch for record {file}")]
    ChecksumMismatch { file: String },
    #[error("bad record header in {file}")]
    BadRecord { file: String },
}

/// Parameters of the synthetic scene sampler.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_correspondences: usize,
    /// Per-pair outlier ratio is drawn uniformly from this closed interval;
    /// set both ends equal for a fixed ratio.
    pub outlier_ratio_min: f64,
    pub outlier_ratio_max: f64,
    pub noise_std_px: f64,
    pub rotation_range_deg: f64,
    pub baseline_range: (f64, f64),
    pub image_width: f64,
    pub image_height: f64,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl SceneConfig {
    /// 640x480 frame with f = 500 px and centered principal point.
    pub fn with_seed(seed: u64) -> Self {
        SceneConfig {
            num_correspondences: 500,
            outlier_ratio_min: 0.5,
            outlier_ratio_max: 0.9,
            noise_std_px: 0.5,
            rotation_range_deg: 30.0,
            baseline_range: (0.5, 2.0),
            image_width: 640.0,
            image_height: 480.0,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_correspondences < 16 {
            return Err(DataError::InvalidConfig(format!(
                "need at least 16 correspondences per pair, got {}",
                self.num_correspondences
            )));
        }
        let (lo, hi) = (self.outlier_ratio_min, self.outlier_ratio_max);
        if !(0.0..=0.95).contains(&lo) || !(0.0..=0.95).contains(&hi) || lo > hi {
            return Err(DataError::InvalidConfig(format!(
                "outlier ratio range [{lo}, {hi}] must sit inside [0, 0.95]"
            )));
        }
        if self.noise_std_px < 0.0 {
            return Err(DataError::InvalidConfig("negative pixel noise".into()));
        }
        if self.rotation_range_deg < 0.0 {
            return Err(DataError::InvalidConfig("negative rotation range".into()));
        }
        if !(self.baseline_range.0 > 0.0 && self.baseline_range.1 >= self.baseline_range.0) {
            return Err(DataError::InvalidConfig(
                "baseline range must be positive and ordered".into(),
            ));
        }
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(DataError::InvalidConfig("empty image frame".into()));
        }
        if self.intrinsics.fx <= 0.0 || self.intrinsics.fy <= 0.0 {
            return Err(DataError::InvalidConfig("invalid intrinsics".into()));
        }
        Ok(())
    }
}

/// One synthetic image pair: putative correspondences with labels,
/// simulated distinctiveness ratios and the ground truth geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub correspondences: Vec<Correspondence>,
    pub labels: Vec<bool>,
    pub lowe_ratios: Vec<f64>,
    pub gt_pose: Pose,
    pub gt_e: EssentialMatrix,
    pub intrinsics: CameraIntrinsics,
}

impl ScenePair {
    pub fn len(&self) -> usize {
        self.correspondences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }

    pub fn inlier_count(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// In-memory dataset with its generating config.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SceneConfig,
    pub pairs: Vec<ScenePair>,
}

fn pair_rng(seed: u64, pair_index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(pair_index);
    rng
}

fn sample_unit_vector(rng: &mut ChaCha20Rng) -> Vec3 {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v = Vec3::new(
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v.scaled(1.0 / n);
        }
    }
}

struct ProjectedPoint {
    view1_px: (f64, f64),
    view2_px: (f64, f64),
}

fn sample_visible_point(
    rng: &mut ChaCha20Rng,
    config: &SceneConfig,
    pose: &Pose,
) -> Result<ProjectedPoint, DataError> {
    let k = &config.intrinsics;
    for _ in 0..VISIBILITY_RETRIES {
        let u = rng.gen_range(0.0..config.image_width);
        let v = rng.gen_range(0.0..config.image_height);
        let z = rng.gen_range(DEPTH_RANGE.0..DEPTH_RANGE.1);
        let x = Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        let x2 = pose.rotation.mul_vec(&x).add(&pose.translation);
        if x2.0[2] <= MIN_DEPTH_SECOND_VIEW {
            continue;
        }
        let u2 = k.fx * x2.0[0] / x2.0[2] + k.cx;
        let v2 = k.fy * x2.0[1] / x2.0[2] + k.cy;
        if u2 < 0.0 || u2 >= config.image_width || v2 < 0.0 || v2 >= config.image_height {
            continue;
        }
        return Ok(ProjectedPoint {
            view1_px: (u, v),
            view2_px: (u2, v2),
        });
    }
    Err(DataError::VisibilityFailure(VISIBILITY_RETRIES))
}

/// Generates the pair with stream id `pair_index` under `config.seed`.
pub fn generate_scene_pair_indexed(
    config: &SceneConfig,
    pair_index: u64,
) -> Result<ScenePair, DataError> {
    config.validate()?;
    let mut rng = pair_rng(config.seed, pair_index);
    let k = config.intrinsics;
    let n = config.num_correspondences;

    let outlier_ratio = if config.outlier_ratio_max > config.outlier_ratio_min {
        rng.gen_range(config.outlier_ratio_min..config.outlier_ratio_max)
    } else {
        config.outlier_ratio_min
    };
    let num_outliers = (n as f64 * outlier_ratio).round() as usize;
    let num_inliers = n - num_outliers;

    let axis = sample_unit_vector(&mut rng);
    let angle = rng
        .gen_range(-config.rotation_range_deg..=config.rotation_range_deg)
        .to_radians();
    let rotation = rotation_from_axis_angle(&axis, angle);
    let direction = sample_unit_vector(&mut rng);
    let magnitude = rng.gen_range(config.baseline_range.0..=config.baseline_range.1);
    let pose = Pose::new(rotation, direction.scaled(magnitude))
        .map_err(|_| DataError::InvalidConfig("sampled rotation not orthonormal".into()))?;
    let gt_e = essential_from_pose(&pose)?;

    let noise = Normal::new(0.0, config.noise_std_px.max(f64::MIN_POSITIVE))
        .expect("valid noise distribution");
    let mut sample_noise = |rng: &mut ChaCha20Rng| -> f64 {
        if config.noise_std_px > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };

    let f_in = Beta::new(INLIER_RATIO_BETA.0, INLIER_RATIO_BETA.1).expect("valid beta");
    let f_out = Beta::new(OUTLIER_RATIO_BETA.0, OUTLIER_RATIO_BETA.1).expect("valid beta");

    let mut pixels: Vec<[f64; 4]> = Vec::with_capacity(n);
    let mut labels: Vec<bool> = Vec::with_capacity(n);
    let mut ratios: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        let is_inlier = i < num_inliers;
        let point = sample_visible_point(&mut rng, config, &pose)?;
        let (u1, v1) = point.view1_px;
        let (u1n, v1n) = (u1 + sample_noise(&mut rng), v1 + sample_noise(&mut rng));
        let (u2, v2) = if is_inlier {
            let (u2, v2) = point.view2_px;
            (u2 + sample_noise(&mut rng), v2 + sample_noise(&mut rng))
        } else {
            (
                rng.gen_range(0.0..config.image_width),
                rng.gen_range(0.0..config.image_height),
            )
        };
        pixels.push([u1n, v1n, u2, v2]);
        labels.push(is_inlier);
        let ratio = if is_inlier {
            f_in.sample(&mut rng)
        } else {
            f_out.sample(&mut rng)
        };
        ratios.push(ratio.clamp(1e-6, 1.0));
    }

    // Shuffle so label order carries no information.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let correspondences: Vec<Correspondence> = order
        .iter()
        .map(|&i| {
            let p = pixels[i];
            Correspondence {
                x1: (p[0] - k.cx) / k.fx,
                y1: (p[1] - k.cy) / k.fy,
                x2: (p[2] - k.cx) / k.fx,
                y2: (p[3] - k.cy) / k.fy,
            }
        })
        .collect();
    let labels: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
    let lowe_ratios: Vec<f64> = order.iter().map(|&i| ratios[i]).collect();

    Ok(ScenePair {
        correspondences,
        labels,
        lowe_ratios,
        gt_pose: pose,
        gt_e,
        intrinsics: k,
    })
}

/// Generates the pair addressed by `config.seed` alone (stream 0).
pub fn generate_scene_pair(config: &SceneConfig) -> Result<ScenePair, DataError> {
    generate_scene_pair_indexed(config, 0)
}

/// Generates `num_pairs` pairs in parallel; pair `i` uses stream `i`.
pub fn generate_dataset(config: &SceneConfig, num_pairs: usize) -> Result<Dataset, DataError> {
    config.validate()?;
    let pairs: Result<Vec<ScenePair>, DataError> = (0..num_pairs as u64)
        .into_par_iter()
        .map(|i| generate_scene_pair_indexed(config, i))
        .collect();
    Ok(Dataset {
        config: *config,
        pairs: pairs?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    file: String,
    num_correspondences: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: SceneConfig,
    num_pairs: usize,
    records: Vec<RecordMeta>,
}

fn encode_record(pair: &ScenePair) -> Vec<u8> {
    let n = pair.len();
    let mut buf = Vec::with_capacity(8 + n * 41 + 200);
    buf.extend_from_slice(RECORD_MAGIC);
    buf.write_u32::<LittleEndian>(n as u32).unwrap();
    for c in &pair.correspondences {
        for v in [c.x1, c.y1, c.x2, c.y2] {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    for &l in &pair.labels {
        buf.push(l as u8);
    }
    for &r in &pair.lowe_ratios {
        buf.write_f64::<LittleEndian>(r).unwrap();
    }
    for v in pair.gt_e.matrix().to_flat() {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    for v in pair.gt_pose.rotation.to_flat() {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    for v in pair.gt_pose.translation.0 {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    let k = &pair.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        buf.write_f64::<LittleEndian>(v).unwrap();
    }
    buf
}

fn decode_record(bytes: &[u8], file: &str) -> Result<ScenePair, DataError> {
    let bad = || DataError::BadRecord { file: file.into() };
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad())?;
    if &magic != RECORD_MAGIC {
        return Err(bad());
    }
    let n = cur.read_u32::<LittleEndian>().map_err(|_| bad())? as usize;
    let mut read_f64 = |cur: &mut Cursor<&[u8]>| cur.read_f64::<LittleEndian>().map_err(|_| bad());

    let mut correspondences = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = read_f64(&mut cur)?;
        let y1 = read_f64(&mut cur)?;
        let x2 = read_f64(&mut cur)?;
        let y2 = read_f64(&mut cur)?;
        correspondences.push(Correspondence { x1, y1, x2, y2 });
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 1];
        cur.read_exact(&mut b).map_err(|_| bad())?;
        labels.push(b[0] != 0);
    }
    let mut lowe_ratios = Vec::with_capacity(n);
    for _ in 0..n {
        lowe_ratios.push(read_f64(&mut cur)?);
    }
    let mut e_flat = [0.0; 9];
    for v in &mut e_flat {
        *v = read_f64(&mut cur)?;
    }
    let mut pose_flat = [0.0; 12];
    for v in &mut pose_flat {
        *v = read_f64(&mut cur)?;
    }
    let mut k_flat = [0.0; 4];
    for v in &mut k_flat {
        *v = read_f64(&mut cur)?;
    }
    if cur.position() != bytes.len() as u64 {
        return Err(bad());
    }

    let gt_e = EssentialMatrix::from_unit_norm(Mat3::from_flat(&e_flat))
        .map_err(|_| bad())?;
    let rotation = Mat3::from_flat(&pose_flat[..9]);
    let translation = Vec3::new(pose_flat[9], pose_flat[10], pose_flat[11]);
    let gt_pose = Pose::new(rotation, translation).map_err(|_| bad())?;
    let intrinsics = CameraIntrinsics::new(k_flat[0], k_flat[1], k_flat[2], k_flat[3])
        .map_err(|_| bad())?;
    Ok(ScenePair {
        correspondences,
        labels,
        lowe_ratios,
        gt_pose,
        gt_e,
        intrinsics,
    })
}

/// Writes the dataset as a JSON manifest plus one binary record per pair.
/// `dir` is created if missing.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(dataset.pairs.len());
    for (i, pair) in dataset.pairs.iter().enumerate() {
        let file = format!("pair_{i:05}.bin");
        let bytes = encode_record(pair);
        let digest = Sha256::digest(&bytes);
        fs::write(dir.join(&file), &bytes)?;
        records.push(RecordMeta {
            file,
            num_correspondences: pair.len(),
            sha256: hex_string(&digest),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: dataset.config,
        num_pairs: dataset.pairs.len(),
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a dataset back; every record is checksum-verified before parsing,
/// so truncation or corruption surfaces as [`DataError::ChecksumMismatch`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::VersionMismatch {
            found: manifest.version,
        });
    }
    let mut pairs = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let bytes = fs::read(dir.join(&record.file))?;
        let digest = hex_string(&Sha256::digest(&bytes));
        if digest != record.sha256 {
            return Err(DataError::ChecksumMismatch {
                file: record.file.clone(),
            });
        }
        pairs.push(decode_record(&bytes, &record.file)?);
    }
    Ok(Dataset {
        config: manifest.config,
        pairs,
    })
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
