//! Directory-per-family corpora, the stratified 70/15/15 split, manifest
//! CSV persistence and image loading.
//!
//! Per family with `n` images the split sizes are
//! `train = ⌊0.70·n⌋`, `val = ⌊0.15·n⌋`, `test = n − train − val`,
//! computed in integer arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub family: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyCount {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    /// Sorted by family, then path.
    pub records: Vec<ImageRecord>,
    /// Sorted by name; families with zero images are kept.
    pub families: Vec<FamilyCount>,
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    /// Builds an index from in-memory records.
    pub fn from_records(records: Vec<ImageRecord>) -> Self {
        Self::assemble(records, Vec::new(), Vec::new())
    }

    fn assemble(mut records: Vec<ImageRecord>, empty_families: Vec<String>, warnings: Vec<String>) -> Self {
        records.sort_by(|a, b| a.family.cmp(&b.family).then_with(|| a.path.cmp(&b.path)));
        let mut counts: BTreeMap<String, usize> = empty_families.into_iter().map(|f| (f, 0)).collect();
        for r in &records {
            *counts.entry(r.family.clone()).or_default() += 1;
        }
        Self {
            records,
            families: counts
                .into_iter()
                .map(|(name, count)| FamilyCount { name, count })
                .collect(),
            warnings,
        }
    }

    pub fn family_names(&self) -> Vec<String> {
        self.families.iter().map(|f| f.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Scans `root/<Family>/<image>.{png,jpg,jpeg}`.
///
/// Every candidate file is fully decoded; undecodable files, non-image
/// files and stray files directly under the root are skipped with a
/// warning. Empty family directories are kept with a zero count.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let entries = read_dir_sorted(root)?;
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    let mut empty = Vec::new();
    let mut note = |msg: String| {
        warn!("{msg}");
        warnings.push(msg);
    };
    for family_dir in entries {
        if !family_dir.is_dir() {
            note(format!("{}: not a family directory, skipped", family_dir.display()));
            continue;
        }
        let family = family_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut found = 0;
        for file in read_dir_sorted(&family_dir)? {
            if !file.is_file() {
                note(format!("{}: not a file, skipped", file.display()));
                continue;
            }
            if !has_image_extension(&file) {
                note(format!("{}: not a PNG/JPEG file, skipped", file.display()));
                continue;
            }
            if let Err(e) = image::open(&file) {
                note(format!("{}: undecodable image skipped ({e})", file.display()));
                continue;
            }
            found += 1;
            records.push(ImageRecord {
                path: file,
                family: family.clone(),
            });
        }
        if found == 0 {
            note(format!("{}: family `{family}` has no images", family_dir.display()));
            empty.push(family);
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("{}: no decodable images found", root.display())));
    }
    Ok(DatasetIndex::assemble(records, empty, warnings))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Split proportions in whole percent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatios {
    pub train_pct: u32,
    pub val_pct: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train_pct: 70,
            val_pct: 15,
        }
    }
}

impl SplitRatios {
    pub fn test_pct(&self) -> u32 {
        100 - self.train_pct - self.val_pct
    }

    /// `(train, val, test)` sizes for a family of `n` images.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = n * self.train_pct as usize / 100;
        let val = n * self.val_pct as usize / 100;
        (train, val, n - train - val)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |p: u32| format!("{}.{:02}", p / 100, p % 100);
        write!(
            f,
            "{},{},{}",
            pct(self.train_pct),
            pct(self.val_pct),
            pct(self.test_pct())
        )
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad split ratios `{s}`"));
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let [train, val, test] = parts[..] else {
            return Err(bad());
        };
        let pct = |v: f64| (v * 100.0).round() as i64;
        let (tp, vp, sp) = (pct(train), pct(val), pct(test));
        if tp < 0 || vp < 0 || sp < 0 || tp + vp + sp != 100 {
            return Err(bad());
        }
        Ok(Self {
            train_pct: tp as u32,
            val_pct: vp as u32,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub family: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub records: Vec<ManifestRecord>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

/// Per-family split sizes, shaped like a train/val/test/total table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitCountRow {
    pub family: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCountRow {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl SplitManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Sorted unique family names, the class-label order.
    pub fn families(&self) -> Vec<String> {
        let mut f: Vec<String> = self.records.iter().map(|r| r.family.clone()).collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn count_table(&self) -> Vec<SplitCountRow> {
        let mut rows: BTreeMap<&str, SplitCountRow> = BTreeMap::new();
        for r in &self.records {
            let row = rows.entry(&r.family).or_insert_with(|| SplitCountRow {
                family: r.family.clone(),
                train: 0,
                val: 0,
                test: 0,
            });
            match r.split {
                Split::Train => row.train += 1,
                Split::Val => row.val += 1,
                Split::Test => row.test += 1,
            }
        }
        rows.into_values().collect()
    }
}

/// Stratified split with the default 70/15/15 ratios.
pub fn stratified_split(index: &DatasetIndex, seed: u64) -> SplitManifest {
    stratified_split_with(index, seed, SplitRatios::default())
}

/// Shuffles each family (in sorted family order, from one seeded stream)
/// and assigns the first `train` records to train, the next `val` to val
/// and the remainder to test.
pub fn stratified_split_with(index: &DatasetIndex, seed: u64, ratios: SplitRatios) -> SplitManifest {
    let mut by_family: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in &index.records {
        by_family.entry(&r.family).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(index.records.len());
    for (_, mut members) in by_family {
        members.sort_by(|a, b| a.path.cmp(&b.path));
        members.shuffle(&mut rng);
        let (train, val, _) = ratios.counts(members.len());
        for (i, r) in members.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            records.push(ManifestRecord {
                path: r.path.clone(),
                family: r.family.clone(),
                split,
            });
        }
    }
    SplitManifest { records, seed, ratios }
}

/// Writes the manifest CSV: one `# seed=<u64> ratios=<t>,<v>,<s>` metadata
/// line, the `path,family,split` header, then one row per record.
pub fn write_manifest(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("# seed={} ratios={}\n", manifest.seed, manifest.ratios).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let csv_err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["path", "family", "split"]).map_err(csv_err)?;
        for r in &manifest.records {
            w.write_record([r.path.to_string_lossy().as_ref(), r.family.as_str(), r.split.as_str()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest CSV. The `#` metadata line is optional; without it the
/// seed is 0 and the ratios are the defaults.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let row_err = |line: u64, reason: String| Error::ManifestRow {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut seed = 0;
    let mut ratios = SplitRatios::default();
    for (i, line) in text.lines().enumerate() {
        let Some(meta) = line.strip_prefix('#') else {
            continue;
        };
        for token in meta.split_whitespace() {
            let line_no = i as u64 + 1;
            if let Some(v) = token.strip_prefix("seed=") {
                seed = v.parse().map_err(|_| row_err(line_no, format!("bad seed `{v}`")))?;
            } else if let Some(v) = token.strip_prefix("ratios=") {
                ratios = v.parse().map_err(|e: Error| row_err(line_no, e.to_string()))?;
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| row_err(csv_line(&e), e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "family", "split"] {
        return Err(row_err(
            reader.position().line(),
            format!(
                "expected header `path,family,split`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| row_err(csv_line(&e), e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 3 {
            return Err(row_err(line, format!("expected 3 fields, got {}", row.len())));
        }
        if row[0].is_empty() || row[1].is_empty() {
            return Err(row_err(line, "empty path or family".into()));
        }
        let split = row[2].parse().map_err(|e: Error| row_err(line, e.to_string()))?;
        records.push(ManifestRecord {
            path: PathBuf::from(&row[0]),
            family: row[1].to_string(),
            split,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest {
            path: path.to_path_buf(),
        });
    }
    Ok(SplitManifest { records, seed, ratios })
}

fn csv_line(e: &csv::Error) -> u64 {
    e.position().map(|p| p.line()).unwrap_or(0)
}

/// Pixel scaling applied by [`load_image`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// `value / 255`, giving `[0, 1]`.
    #[default]
    UnitRange,
}

/// Decodes an image to a `3×S×S` tensor.
///
/// Grayscale sources are replicated to three channels. The image is
/// resized with [`resize_bilinear`] (no aspect preservation) when it is not
/// already `S×S`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, size: usize, normalization: Normalization) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(rgb_to_tensor(&rgb, size, normalization))
}

pub fn rgb_to_tensor<T: Scalar>(rgb: &image::RgbImage, size: usize, normalization: Normalization) -> Tensor<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<f64> = match normalization {
            Normalization::UnitRange => raw.iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0).collect(),
        };
        let resized = resize_bilinear(&plane, h, w, size, size);
        data.extend(resized.into_iter().map(|v| T::from_f64_lossy(v.clamp(0.0, 1.0))));
    }
    Tensor::new(vec![3, size, size], data).expect("3×S×S buffer")
}

/// Decodes an image and resamples it to `size×size` 8-bit RGB, the same
/// pixels [`load_image`] feeds the model (before scaling).
pub fn load_rgb(path: impl AsRef<Path>, size: usize) -> Result<image::RgbImage> {
    let path = path.as_ref();
    let rgb = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == size && h == size {
        return Ok(rgb);
    }
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let plane: Vec<f64> = rgb.as_raw().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
            resize_bilinear(&plane, h, w, size, size)
        })
        .collect();
    let pixels = (0..size * size)
        .flat_map(|i| planes.iter().map(move |p| p[i].round().clamp(0.0, 255.0) as u8))
        .collect();
    Ok(image::RgbImage::from_raw(size as u32, size as u32, pixels).expect("size×size×3 buffer"))
}

/// Writes the per-family split table as `family,train,val,test,total` with
/// a closing `Total` row.
pub fn write_count_table(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("family,train,val,test,total\n");
    let (mut tr, mut va, mut te) = (0, 0, 0);
    for row in manifest.count_table() {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.family,
            row.train,
            row.val,
            row.test,
            row.total()
        ));
        tr += row.train;
        va += row.val;
        te += row.test;
    }
    text.push_str(&format!("Total,{tr},{va},{te},{}\n", tr + va + te));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
