//! Manifests, MOS rescaling, seeded splits, augmentation and downsizing.

mod synthetic;

pub use synthetic::{
    make_synthetic_dataset, make_synthetic_with, write_synthetic, Distortion, SyntheticConfig,
    SyntheticSample,
};

use crate::aggregation::reflect;
use crate::image::{ImageError, ImageTensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Interpolation used by [`resize_half`]; recorded in run metadata.
pub const RESIZE_KERNEL: &str = "bilinear";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: u64,
        reason: String,
    },
    #[error("{path}: row {row}: MOS {value:?} is not a finite number")]
    NonNumericMos {
        path: PathBuf,
        row: u64,
        value: String,
    },
    #[error("need at least {min} records, got {len}")]
    TooFew { len: usize, min: usize },
    #[error("source MOS has zero variance; cannot rescale")]
    ZeroVariance,
    #[error("train fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("odd image dims {width}x{height}; enable pad-first to downsize")]
    OddDims { width: usize, height: usize },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub mos: f64,
    pub split: Option<Split>,
}

impl DatasetRecord {
    pub fn new(image_path: impl Into<PathBuf>, mos: f64) -> Self {
        let image_path = image_path.into();
        let image_id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self {
            image_id,
            image_path,
            mos,
            split: None,
        }
    }
}

/// A row whose image could not be opened; kept in `records`, listed here.
#[derive(Clone, Debug, PartialEq)]
pub struct UnreadableImage {
    pub row: u64,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub records: Vec<DatasetRecord>,
    pub unreadable: Vec<UnreadableImage>,
    pub warnings: Vec<String>,
}

fn is_header(row: &csv::StringRecord) -> bool {
    let first = row.get(0).unwrap_or("").trim().to_ascii_lowercase();
    let second = row.get(1).unwrap_or("").trim().to_ascii_lowercase();
    matches!(first.as_str(), "image_path" | "image" | "path" | "filename" | "image_name")
        && matches!(second.as_str(), "mos" | "score")
}

/// Reads an `image_path,mos` CSV. Relative image paths resolve against the
/// manifest's directory. Rows are numbered by physical line, starting at 1.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut manifest = Manifest::default();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            DatasetError::MalformedRow {
                path: path.to_path_buf(),
                row: line,
                reason: e.to_string(),
            }
        })?;
        let line = row.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && is_header(&row) {
            continue;
        }
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() != 2 || row[0].is_empty() {
            return Err(DatasetError::MalformedRow {
                path: path.to_path_buf(),
                row: line,
                reason: format!("expected `image_path,mos`, got {} field(s)", row.len()),
            });
        }
        let mos = row[1]
            .parse::<f64>()
            .ok()
            .filter(|m| m.is_finite())
            .ok_or_else(|| DatasetError::NonNumericMos {
                path: path.to_path_buf(),
                row: line,
                value: row[1].to_string(),
            })?;
        let rel = PathBuf::from(&row[0]);
        let image_path = if rel.is_absolute() { rel } else { base.join(rel) };
        if let Err(e) = image::ImageReader::open(&image_path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()))
        {
            manifest.unreadable.push(UnreadableImage {
                row: line,
                path: image_path.clone(),
                reason: e,
            });
        }
        manifest.records.push(DatasetRecord::new(image_path, mos));
    }
    if manifest.records.is_empty() {
        manifest
            .warnings
            .push(format!("{}: manifest has no records", path.display()));
    }
    for u in &manifest.unreadable {
        manifest.warnings.push(format!(
            "row {}: unreadable image {}: {}",
            u.row,
            u.path.display(),
            u.reason
        ));
    }
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    Ok(manifest)
}

/// Writes `image_path,mos` with a header row. Image paths are written relative
/// to the manifest's directory when they lie inside it and absolute otherwise,
/// so that [`load_manifest`] resolves them to the same files.
pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let io = |e: csv::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = std::path::absolute(path.parent().unwrap_or(Path::new(""))).map_err(io_err)?;
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["image_path", "mos"]).map_err(io)?;
    for r in records {
        let abs = std::path::absolute(&r.image_path).map_err(io_err)?;
        let shown = abs.strip_prefix(&dir).unwrap_or(&abs);
        w.write_record([shown.display().to_string(), r.mos.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Sample mean and population standard deviation of the MOS column.
pub fn mos_stats(records: &[DatasetRecord]) -> (f64, f64) {
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.mos).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.mos - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Affine map onto a target mean and (population) standard deviation.
pub fn rescale_mos(
    records: &[DatasetRecord],
    target_mean: f64,
    target_std: f64,
) -> Result<Vec<DatasetRecord>, DatasetError> {
    if records.len() < 2 {
        return Err(DatasetError::TooFew {
            len: records.len(),
            min: 2,
        });
    }
    let (mean, std) = mos_stats(records);
    if std <= 0.0 || !std.is_finite() {
        return Err(DatasetError::ZeroVariance);
    }
    Ok(records
        .iter()
        .map(|r| DatasetRecord {
            mos: (r.mos - mean) / std * target_std + target_mean,
            ..r.clone()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

/// Seeded random partition; each part keeps manifest order.
pub fn split(
    records: &[DatasetRecord],
    spec: SplitSpec,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::Fraction(spec.train_fraction));
    }
    if records.len() < 2 {
        return Err(DatasetError::TooFew {
            len: records.len(),
            min: 2,
        });
    }
    let n_train = (spec.train_fraction * records.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut is_train = vec![false; records.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(is_train) {
        let mut r = r.clone();
        if t {
            r.split = Some(Split::Train);
            train.push(r);
        } else {
            r.split = Some(Split::Test);
            test.push(r);
        }
    }
    Ok((train, test))
}

/// Writes the `image_id,split` file.
pub fn write_split_file(
    path: &Path,
    train: &[DatasetRecord],
    test: &[DatasetRecord],
) -> Result<(), DatasetError> {
    let io = |e: csv::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["image_id", "split"]).map_err(io)?;
    for (records, tag) in [(train, Split::Train), (test, Split::Test)] {
        for r in records {
            w.write_record([r.image_id.as_str(), &tag.to_string()]).map_err(io)?;
        }
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Independent coin flips for one augmentation draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentCoins {
    pub rotate180: bool,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentCoins {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            rotate180: rng.random(),
            hflip: rng.random(),
            vflip: rng.random(),
        }
    }
}

/// Applies the selected 180° rotation and flips; pixels are only permuted.
pub fn augment(img: &ImageTensor, coins: AugmentCoins) -> ImageTensor {
    let (w, h) = (img.width(), img.height());
    let mirror_x = coins.rotate180 ^ coins.hflip;
    let mirror_y = coins.rotate180 ^ coins.vflip;
    ImageTensor::from_fn(w, h, |x, y, c| {
        let sx = if mirror_x { w - 1 - x } else { x };
        let sy = if mirror_y { h - 1 - y } else { y };
        img.get(sx, sy, c)
    })
}

/// Halves both dims with a bilinear kernel sampled at pixel centres (which at
/// exactly one half reduces to the mean of each 2×2 block). Odd dims are an
/// error unless `pad_first`, which reflect-pads one pixel right/bottom.
pub fn resize_half(img: &ImageTensor, pad_first: bool) -> Result<ImageTensor, DatasetError> {
    let (w, h) = (img.width(), img.height());
    if (w % 2 == 1 || h % 2 == 1) && !pad_first {
        return Err(DatasetError::OddDims {
            width: w,
            height: h,
        });
    }
    let (ow, oh) = (w.div_ceil(2).max(1), h.div_ceil(2).max(1));
    Ok(ImageTensor::from_fn(ow, oh, |x, y, c| {
        let mut acc = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                acc += img.get(reflect(2 * x + dx, w), reflect(2 * y + dy, h), c);
            }
        }
        acc * 0.25
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_two_rows_and_reports_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "a.png,3.5\nb.png,1.2\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].mos, 3.5);
        assert_eq!(m.records[1].mos, 1.2);
        assert_eq!(m.records[0].image_id, "a");
        assert_eq!(m.records[1].image_path, dir.path().join("b.png"));
        assert_eq!(m.unreadable.len(), 2);
        assert_eq!(m.unreadable[1].row, 2);
    }

    #[test]
    fn header_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "image_path,mos\nx.png,2\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 1);
    }

    #[test]
    fn empty_manifest_warns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "");
        let m = load_manifest(&p).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn bad_mos_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "c.png,abc\n");
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, DatasetError::NonNumericMos { row: 1, .. }));
        assert!(err.to_string().contains("row 1"));
        let p = write(dir.path(), "n.csv", "a.png,1\nb.png\n");
        assert!(matches!(
            load_manifest(&p).unwrap_err(),
            DatasetError::MalformedRow { row: 2, .. }
        ));
    }

    #[test]
    fn missing_manifest() {
        let err = load_manifest(Path::new("/nonexistent/m.csv")).unwrap_err();
        assert!(matches!(err, DatasetError::MissingFile(_)));
    }

    fn recs(mos: &[f64]) -> Vec<DatasetRecord> {
        mos.iter()
            .enumerate()
            .map(|(i, &m)| DatasetRecord::new(format!("{i}.png"), m))
            .collect()
    }

    #[test]
    fn rescale_symmetric_pair() {
        let out = rescale_mos(&recs(&[1.0, 3.0]), 0.0, 1.0).unwrap();
        // population variance of {1, 3} is 1
        assert!((out[0].mos + 1.0).abs() < 1e-12);
        assert!((out[1].mos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rescale_identity_when_stats_match() {
        let r = recs(&[1.0, 2.0, 4.0]);
        let (m, s) = mos_stats(&r);
        let out = rescale_mos(&r, m, s).unwrap();
        for (a, b) in r.iter().zip(&out) {
            assert!((a.mos - b.mos).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_rejects_constant() {
        assert!(matches!(
            rescale_mos(&recs(&[2.0, 2.0]), 0.0, 1.0),
            Err(DatasetError::ZeroVariance)
        ));
        assert!(matches!(
            rescale_mos(&recs(&[2.0]), 0.0, 1.0),
            Err(DatasetError::TooFew { .. })
        ));
    }

    #[test]
    fn split_counts_and_tags() {
        let r = recs(&(0..10).map(f64::from).collect::<Vec<_>>());
        let (train, test) = split(&r, SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train.iter().all(|r| r.split == Some(Split::Train)));
        assert!(test.iter().all(|r| r.split == Some(Split::Test)));
        assert!(split(&recs(&[1.0]), SplitSpec::default()).is_err());
        assert!(split(&r, SplitSpec { seed: 0, train_fraction: 1.0 }).is_err());
    }

    #[test]
    fn split_file_lists_every_id() {
        let dir = tempfile::tempdir().unwrap();
        let r = recs(&[1.0, 2.0, 3.0, 4.0]);
        let (train, test) = split(&r, SplitSpec::default()).unwrap();
        let p = dir.path().join("split.csv");
        write_split_file(&p, &train, &test).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("image_id,split\n"));
    }

    #[test]
    fn written_paths_resolve_from_the_manifest_directory() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("imgs");
        fs::create_dir(&img_dir).unwrap();
        let inside = img_dir.join("a.png");
        let outside = dir.path().join("b.png");
        for p in [&inside, &outside] {
            ImageTensor::filled(4, 4, [0.5; 3]).save_png(p).unwrap();
        }
        let m = img_dir.join("m.csv");
        write_manifest(&m, &[DatasetRecord::new(&inside, 2.0), DatasetRecord::new(&outside, 3.0)]).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("a.png,"));
        let back = load_manifest(&m).unwrap();
        assert!(back.unreadable.is_empty());
        assert_eq!(back.records[0].image_path, inside);
        assert_eq!(back.records[1].image_path, outside);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = recs(&[1.25, 4.5]);
        let p = dir.path().join("m.csv");
        write_manifest(&p, &r).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[1].mos, 4.5);
    }

    #[test]
    fn resize_half_dims_and_constant() {
        let img = ImageTensor::filled(1024, 768, [0.2, 0.4, 0.6]);
        let out = resize_half(&img, false).unwrap();
        assert_eq!((out.width(), out.height()), (512, 384));
        assert!(out.data().chunks(512 * 384).zip([0.2f32, 0.4, 0.6]).all(|(p, v)| p
            .iter()
            .all(|&x| (x - v).abs() < 1e-7)));
    }

    #[test]
    fn resize_half_checkerboard_is_mean() {
        let img = ImageTensor::from_fn(2, 2, |x, y, _| ((x + y) % 2) as f32);
        let out = resize_half(&img, false).unwrap();
        assert_eq!((out.width(), out.height()), (1, 1));
        assert_eq!(out.get(0, 0, 1), 0.5);
    }

    #[test]
    fn resize_half_odd_dims() {
        let img = ImageTensor::filled(5, 4, [0.5; 3]);
        assert!(matches!(resize_half(&img, false), Err(DatasetError::OddDims { .. })));
        let out = resize_half(&img, true).unwrap();
        assert_eq!((out.width(), out.height()), (3, 2));
    }
}
