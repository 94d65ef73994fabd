//! Dataset ingestion, canonical splits, class semantics and episode sampling.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! metadata.csv          image_id,relative_path,class_id[,partition]
//! splits/               optional when metadata carries a partition column
//!   train_classes.txt   one class_id per line (also val_, test_)
//!   train_images.txt    one image_id per line (also val_, test_,
//!                       test_seen_, test_unseen_)
//! attributes.csv        class_id,a0,a1,... (required for cub, awa2, apy)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, RpcError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel buffer stored channel-major (`[channels][height][width]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(contract("pixel buffer does not match image dimensions"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data
                .iter()
                .map(|&v| T::from_f32(v).expect("finite pixel"))
                .collect(),
        )
        .expect("image shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(contract("image tensors are [channels, height, width]"));
        }
        Self::new(
            s[0],
            s[1],
            s[2],
            t.data().iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
        )
    }

    /// Rotates counter-clockwise by `quarter_turns * 90°`.
    pub fn rotate(&self, quarter_turns: usize) -> Image {
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            img = img.rotate90();
        }
        img
    }

    fn rotate90(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for r in 0..h {
                for col in 0..w {
                    // (r, col) -> (w - 1 - col, r)
                    let nr = w - 1 - col;
                    data[(c * w + nr) * h + r] = self.data[(c * h + r) * w + col];
                }
            }
        }
        Image {
            channels: self.channels,
            height: w,
            width: h,
            data,
        }
    }

    /// Bilinear resampling to `size x size`.
    pub fn resize(&self, size: usize) -> Image {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * size * size);
        for c in 0..self.channels {
            let plane =
                &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            let buf = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(
                self.width as u32,
                self.height as u32,
                plane.to_vec(),
            )
            .expect("plane size");
            let out = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
            data.extend(out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Image {
            channels: self.channels,
            height: size,
            width: size,
            data,
        }
    }

    /// Replicates a single channel or averages to one channel.
    pub fn with_channels(&self, channels: usize) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let plane = self.height * self.width;
        let gray: Vec<f32> = if self.channels == 1 {
            self.data.clone()
        } else {
            (0..plane)
                .map(|i| {
                    (0..self.channels)
                        .map(|c| self.data[c * plane + i])
                        .sum::<f32>()
                        / self.channels as f32
                })
                .collect()
        };
        let data = (0..channels).flat_map(|_| gray.iter().copied()).collect();
        Image {
            channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| RpcError::Ingest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let color = img.color();
        if color.has_color() {
            let rgb = img.to_rgb32f();
            let raw = rgb.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for i in 0..h * w {
                for c in 0..3 {
                    data[c * h * w + i] = raw[i * 3 + c].clamp(0.0, 1.0);
                }
            }
            Image::new(3, h, w, data)
        } else {
            let gray = img.to_luma32f().into_raw();
            Image::new(
                1,
                h,
                w,
                gray.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            )
        }
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let plane = self.height * self.width;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("size")
                    .save(path)?;
            }
            3 => {
                let buf: Vec<u8> = (0..plane)
                    .flat_map(|i| (0..3).map(move |c| (c, i)))
                    .map(|(c, i)| to_u8(self.data[c * plane + i]))
                    .collect();
                image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("size")
                    .save(path)?;
            }
            n => return Err(contract(format!("cannot save a {n}-channel image"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Image,
    pub label: String,
    pub domain: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
    TestSeen,
    TestUnseen,
}

impl Partition {
    pub const ALL: [Partition; 5] = [
        Partition::Train,
        Partition::Val,
        Partition::Test,
        Partition::TestSeen,
        Partition::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
            Partition::TestSeen => "test_seen",
            Partition::TestUnseen => "test_unseen",
        }
    }
}

impl FromStr for Partition {
    type Err = RpcError;
    fn from_str(s: &str) -> Result<Self> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| contract(format!("unknown partition `{s}`")))
    }
}

/// Class-level and image-level partitions of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub test_classes: Vec<String>,
    pub per_image_assignment: BTreeMap<String, Partition>,
}

impl SplitSpec {
    /// Checks the class lists are pairwise disjoint and, when image
    /// assignments exist, that they cover `image_ids` exactly.
    pub fn validate<'a>(&self, image_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let sets = [&self.train_classes, &self.val_classes, &self.test_classes];
        let mut seen = BTreeSet::new();
        for set in sets {
            for c in set {
                if !seen.insert(c.as_str()) {
                    return Err(contract(format!(
                        "class `{c}` appears in more than one split"
                    )));
                }
            }
        }
        if !self.per_image_assignment.is_empty() {
            let ids: BTreeSet<&str> = image_ids.into_iter().collect();
            for id in &ids {
                if !self.per_image_assignment.contains_key(*id) {
                    return Err(contract(format!("image `{id}` has no partition")));
                }
            }
            if let Some(extra) = self
                .per_image_assignment
                .keys()
                .find(|k| !ids.contains(k.as_str()))
            {
                return Err(contract(format!("split names unknown image `{extra}`")));
            }
        }
        Ok(())
    }

    pub fn images_in(&self, partition: Partition) -> Vec<&str> {
        self.per_image_assignment
            .iter()
            .filter(|(_, &p)| p == partition)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Writes `<partition>_images.txt` and `<split>_classes.txt` files into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, classes) in [
            ("train", &self.train_classes),
            ("val", &self.val_classes),
            ("test", &self.test_classes),
        ] {
            if !classes.is_empty() {
                write_lines(&dir.join(format!("{name}_classes.txt")), classes.iter())?;
            }
        }
        for p in Partition::ALL {
            let ids = self.images_in(p);
            if !ids.is_empty() {
                write_lines(&dir.join(format!("{}_images.txt", p.as_str())), ids.iter())?;
            }
        }
        Ok(())
    }

    /// Reads split files from `dir`; absent files leave their field empty.
    pub fn read_files(dir: &Path) -> Result<SplitSpec> {
        let mut split = SplitSpec::default();
        let read = |name: String| -> Result<Option<Vec<String>>> {
            let path = dir.join(name);
            if path.exists() {
                Ok(Some(read_lines(&path)?))
            } else {
                Ok(None)
            }
        };
        split.train_classes = read("train_classes.txt".into())?.unwrap_or_default();
        split.val_classes = read("val_classes.txt".into())?.unwrap_or_default();
        split.test_classes = read("test_classes.txt".into())?.unwrap_or_default();
        for p in Partition::ALL {
            if let Some(ids) = read(format!("{}_images.txt", p.as_str()))? {
                for id in ids {
                    if split.per_image_assignment.insert(id.clone(), p).is_some() {
                        return Err(RpcError::Ingest {
                            path: dir.to_path_buf(),
                            msg: format!("image `{id}` listed in more than one partition"),
                        });
                    }
                }
            }
        }
        Ok(split)
    }
}

fn write_lines<'a, I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<str> + 'a + ?Sized,
{
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Class id → semantic vector, all of one dimension.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticTable {
    pub dimension: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl SemanticTable {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dimension = vectors.values().next().map(Vec::len).unwrap_or(0);
        if dimension == 0 && !vectors.is_empty() {
            return Err(contract("semantic vectors must have positive dimension"));
        }
        if let Some((c, _)) = vectors.iter().find(|(_, v)| v.len() != dimension) {
            return Err(contract(format!(
                "semantic vector of `{c}` has the wrong dimension"
            )));
        }
        Ok(Self { dimension, vectors })
    }

    /// Rows in `classes` order as a `[classes, dimension]` tensor.
    pub fn to_matrix<T: Scalar>(&self, classes: &[String]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(classes.len() * self.dimension);
        for c in classes {
            let v = self
                .vectors
                .get(c)
                .ok_or_else(|| contract(format!("missing semantic vector for class `{c}`")))?;
            data.extend(v.iter().map(|&x| T::from_f64_lossy(x)));
        }
        Tensor::from_vec(&[classes.len(), self.dimension], data)
    }

    pub fn read_csv(path: &Path) -> Result<SemanticTable> {
        if !path.exists() {
            return Err(RpcError::MissingArtifact(path.to_path_buf()));
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let dim = rdr.headers()?.len().saturating_sub(1);
        let mut vectors = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let class = rec.get(0).unwrap_or_default().to_string();
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| RpcError::Ingest {
                    path: path.to_path_buf(),
                    msg: format!("class `{class}`: {e}"),
                })?;
            if vals.len() != dim {
                return Err(RpcError::Ingest {
                    path: path.to_path_buf(),
                    msg: format!(
                        "class `{class}` has {} values, header declares {dim}",
                        vals.len()
                    ),
                });
            }
            vectors.insert(class, vals);
        }
        SemanticTable::new(vectors)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["class_id".to_string()];
        header.extend((0..self.dimension).map(|i| format!("a{i}")));
        w.write_record(&header)?;
        for (c, v) in &self.vectors {
            let mut rec = vec![c.clone()];
            rec.extend(v.iter().map(|x| format!("{x}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Datasets the loader knows about, with their reference statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetName {
    Mnist,
    Usps,
    Svhn,
    Omniglot,
    MiniImageNet,
    Cub,
    Awa2,
    Apy,
    Cars,
    Toy,
}

/// Reference sizes for a dataset: `(images, classes, semantic dimension)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetInfo {
    pub images: Option<usize>,
    pub classes: Option<usize>,
    pub semantic_dim: Option<usize>,
    pub channels: usize,
}

impl DatasetName {
    pub const ALL: [DatasetName; 10] = [
        DatasetName::Mnist,
        DatasetName::Usps,
        DatasetName::Svhn,
        DatasetName::Omniglot,
        DatasetName::MiniImageNet,
        DatasetName::Cub,
        DatasetName::Awa2,
        DatasetName::Apy,
        DatasetName::Cars,
        DatasetName::Toy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Usps => "usps",
            DatasetName::Svhn => "svhn",
            DatasetName::Omniglot => "omniglot",
            DatasetName::MiniImageNet => "miniimagenet",
            DatasetName::Cub => "cub",
            DatasetName::Awa2 => "awa2",
            DatasetName::Apy => "apy",
            DatasetName::Cars => "cars",
            DatasetName::Toy => "toy",
        }
    }

    pub fn info(self) -> DatasetInfo {
        let (images, classes, semantic_dim, channels) = match self {
            DatasetName::Mnist => (Some(70_000), Some(10), None, 1),
            DatasetName::Usps => (Some(9_298), Some(10), None, 1),
            DatasetName::Svhn => (None, Some(10), None, 3),
            DatasetName::Omniglot => (None, Some(1_623), None, 1),
            DatasetName::MiniImageNet => (Some(60_000), Some(100), None, 3),
            DatasetName::Cub => (Some(11_788), Some(200), Some(312), 3),
            DatasetName::Awa2 => (Some(37_222), Some(50), Some(85), 3),
            DatasetName::Apy => (Some(15_339), Some(32), Some(64), 3),
            DatasetName::Cars => (Some(16_185), Some(196), None, 3),
            DatasetName::Toy => (None, None, None, 1),
        };
        DatasetInfo {
            images,
            classes,
            semantic_dim,
            channels,
        }
    }

    /// Whether the dataset ships class semantic vectors.
    pub fn has_semantics(self) -> bool {
        self.info().semantic_dim.is_some()
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = RpcError;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        DatasetName::ALL
            .into_iter()
            .find(|d| d.as_str() == key)
            .ok_or_else(|| RpcError::UnknownDataset {
                name: s.to_string(),
                known: DatasetName::ALL.map(|d| d.as_str()).join(", "),
            })
    }
}

/// Resampling applied at load time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Square side length; `None` keeps the stored resolution.
    pub resolution: Option<usize>,
    /// Channel count expected by the backbone; `None` keeps the stored count.
    pub channels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<LabeledImage>,
    pub split: SplitSpec,
    pub semantics: Option<SemanticTable>,
}

impl Dataset {
    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.images.iter().map(|i| i.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn images_in(&self, partition: Partition) -> Vec<&LabeledImage> {
        self.images
            .iter()
            .filter(|i| self.split.per_image_assignment.get(&i.id) == Some(&partition))
            .collect()
    }

    pub fn images_of_classes(&self, classes: &[String]) -> Vec<&LabeledImage> {
        let set: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
        self.images
            .iter()
            .filter(|i| set.contains(i.label.as_str()))
            .collect()
    }

    /// Writes the dataset in the on-disk layout (PNG images).
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("images"))?;
        let has_partition = !self.split.per_image_assignment.is_empty();
        let mut w = csv::Writer::from_path(root.join("metadata.csv"))?;
        w.write_record(["image_id", "relative_path", "class_id"])?;
        for img in &self.images {
            let rel = format!("images/{}.png", sanitize(&img.id));
            img.pixels.save_png(&root.join(&rel))?;
            w.write_record([img.id.as_str(), rel.as_str(), img.label.as_str()])?;
        }
        w.flush()?;
        let splits = root.join("splits");
        fs::create_dir_all(&splits)?;
        if has_partition || !self.split.train_classes.is_empty() {
            self.split.write_files(&splits)?;
        }
        if let Some(sem) = &self.semantics {
            sem.write_csv(&root.join("attributes.csv"))?;
        }
        Ok(())
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// `(image_id, class_id)` rows of `metadata.csv`, without touching image files.
pub fn read_image_labels(root: &Path) -> Result<Vec<(String, String)>> {
    let meta_path = root.join("metadata.csv");
    if !meta_path.exists() {
        return Err(RpcError::MissingArtifact(meta_path));
    }
    let mut rdr = csv::Reader::from_path(&meta_path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(id_col), Some(class_col)) = (col("image_id"), col("class_id")) else {
        return Err(RpcError::Ingest {
            path: meta_path,
            msg: "header must contain image_id and class_id".into(),
        });
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push((
            rec.get(id_col).unwrap_or_default().trim().to_string(),
            rec.get(class_col).unwrap_or_default().trim().to_string(),
        ));
    }
    Ok(out)
}

/// Loads a dataset directory laid out as documented at the module level.
pub fn load_dataset(name: &str, root: &Path, opts: LoadOptions) -> Result<Dataset> {
    let kind: DatasetName = name.parse()?;
    let meta_path = root.join("metadata.csv");
    if !meta_path.exists() {
        return Err(RpcError::MissingArtifact(meta_path));
    }
    let mut rdr = csv::Reader::from_path(&meta_path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, path_col, class_col) =
        match (col("image_id"), col("relative_path"), col("class_id")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(RpcError::Ingest {
                    path: meta_path,
                    msg: "header must contain image_id, relative_path, class_id".into(),
                })
            }
        };
    let part_col = col("partition");
    let mut images = Vec::new();
    let mut inline_split = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or_default().trim().to_string();
        let rel = rec.get(path_col).unwrap_or_default().trim();
        let label = rec.get(class_col).unwrap_or_default().trim().to_string();
        let path = root.join(rel);
        if !path.exists() {
            return Err(RpcError::MissingArtifact(path));
        }
        let mut px = Image::load(&path)?;
        if let Some(c) = opts.channels {
            px = px.with_channels(c);
        }
        if let Some(r) = opts.resolution {
            px = px.resize(r);
        }
        if let Some(pc) = part_col {
            let p: Partition = rec.get(pc).unwrap_or_default().parse()?;
            inline_split.insert(id.clone(), p);
        }
        images.push(LabeledImage {
            id,
            pixels: px,
            label,
            domain: kind.as_str().to_string(),
        });
    }
    let split_dir = root.join("splits");
    let mut split = if split_dir.is_dir() {
        SplitSpec::read_files(&split_dir)?
    } else if part_col.is_some() {
        SplitSpec::default()
    } else {
        return Err(RpcError::MissingArtifact(split_dir));
    };
    if split.per_image_assignment.is_empty() {
        split.per_image_assignment = inline_split;
    }
    split.validate(images.iter().map(|i| i.id.as_str()))?;
    let sem_path = root.join("attributes.csv");
    let semantics = if sem_path.exists() {
        Some(SemanticTable::read_csv(&sem_path)?)
    } else if kind.has_semantics() {
        return Err(RpcError::MissingArtifact(sem_path));
    } else {
        None
    };
    Ok(Dataset {
        name: kind.as_str().to_string(),
        images,
        split,
        semantics,
    })
}

/// `α`-way `β`-shot episode request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub rng_seed: u64,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, n_shot: usize, rng_seed: u64) -> Self {
        Self {
            n_way,
            n_shot,
            n_query: 15,
            rng_seed,
        }
    }
}

/// Sampled episode; entries index into the pool, labels are `0..n_way`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Draws classes then images without replacement from `pool`.
pub fn sample_episode(spec: &EpisodeSpec, pool: &[&LabeledImage]) -> Result<Episode> {
    if spec.n_way == 0 || spec.n_shot == 0 || spec.n_query == 0 {
        return Err(contract("episode sizes must be positive"));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, img) in pool.iter().enumerate() {
        by_class.entry(img.label.as_str()).or_default().push(i);
    }
    if spec.n_way > by_class.len() {
        return Err(contract(format!(
            "{}-way episode requested but the pool has {} classes",
            spec.n_way,
            by_class.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let names: Vec<&str> = by_class.keys().copied().collect();
    let chosen: Vec<&str> = names
        .choose_multiple(&mut rng, spec.n_way)
        .copied()
        .collect();
    let need = spec.n_shot + spec.n_query;
    let mut episode = Episode {
        classes: chosen.iter().map(|c| c.to_string()).collect(),
        support: Vec::new(),
        query: Vec::new(),
    };
    for (label, class) in chosen.iter().enumerate() {
        let members = &by_class[class];
        if members.len() < need {
            return Err(RpcError::Sampling {
                class: class.to_string(),
                available: members.len(),
                needed: need,
            });
        }
        let picked: Vec<usize> = members.choose_multiple(&mut rng, need).copied().collect();
        episode
            .support
            .extend(picked[..spec.n_shot].iter().map(|&i| (i, label)));
        episode
            .query
            .extend(picked[spec.n_shot..].iter().map(|&i| (i, label)));
    }
    Ok(episode)
}

/// Adds 90°, 180° and 270° rotated copies of every class as new classes.
///
/// Rotated classes are named `<class>@rot<deg>`; image ids get the same suffix.
pub fn augment_omniglot_rotations(images: &[LabeledImage]) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(images.len() * 4);
    for turns in 0..4 {
        for img in images {
            if turns == 0 {
                out.push(img.clone());
                continue;
            }
            let suffix = format!("@rot{}", turns * 90);
            out.push(LabeledImage {
                id: format!("{}{suffix}", img.id),
                pixels: img.pixels.rotate(turns),
                label: format!("{}{suffix}", img.label),
                domain: img.domain.clone(),
            });
        }
    }
    out
}

/// Resolves a dataset directory: an explicit path wins, otherwise
/// `$RPC_DATA_ROOT/<name>`.
pub fn dataset_dir(name: &str, explicit_root: Option<&Path>) -> Option<PathBuf> {
    match explicit_root {
        Some(p) => Some(p.join(name)),
        None => std::env::var_os("RPC_DATA_ROOT").map(|r| PathBuf::from(r).join(name)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str, label: &str, v: f32) -> LabeledImage {
        LabeledImage {
            id: id.into(),
            pixels: Image::new(1, 2, 2, vec![v, 0.0, 0.0, 0.0]).unwrap(),
            label: label.into(),
            domain: "toy".into(),
        }
    }

    #[test]
    fn rotation_closure() {
        let im = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let r = im.rotate(1);
        assert_eq!((r.height, r.width), (3, 2));
        assert_ne!(r, im);
        assert_eq!(r.rotate(3), im);
        assert_eq!(im.rotate(2).rotate(2), im);
    }

    #[test]
    fn rotation_augmentation_quadruples_classes() {
        let pool: Vec<LabeledImage> = (0..20).map(|i| img(&format!("i{i}"), "a", 0.5)).collect();
        let aug = augment_omniglot_rotations(&pool);
        let classes: BTreeSet<&str> = aug.iter().map(|i| i.label.as_str()).collect();
        assert_eq!(classes.len(), 4);
        for c in classes {
            assert_eq!(aug.iter().filter(|i| i.label == c).count(), 20);
        }
    }

    #[test]
    fn exhaustive_two_image_episode() {
        let pool = [img("x", "a", 0.1), img("y", "a", 0.2)];
        let refs: Vec<&LabeledImage> = pool.iter().collect();
        let spec = EpisodeSpec {
            n_way: 1,
            n_shot: 1,
            n_query: 1,
            rng_seed: 7,
        };
        let ep = sample_episode(&spec, &refs).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.len(), 1);
        assert_ne!(ep.support[0].0, ep.query[0].0);
        assert_eq!(sample_episode(&spec, &refs).unwrap(), ep);
    }

    #[test]
    fn undersized_class_is_named() {
        let pool = [img("x", "a", 0.1), img("y", "b", 0.2), img("z", "b", 0.3)];
        let refs: Vec<&LabeledImage> = pool.iter().collect();
        let spec = EpisodeSpec {
            n_way: 2,
            n_shot: 1,
            n_query: 1,
            rng_seed: 1,
        };
        match sample_episode(&spec, &refs) {
            Err(RpcError::Sampling { class, .. }) => assert_eq!(class, "a"),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn split_validation() {
        let mut s = SplitSpec {
            train_classes: vec!["a".into()],
            test_classes: vec!["a".into()],
            ..Default::default()
        };
        assert!(s.validate(std::iter::empty()).is_err());
        s.test_classes = vec!["b".into()];
        s.per_image_assignment.insert("x".into(), Partition::Train);
        assert!(s.validate(["x"]).is_ok());
        assert!(s.validate(["x", "y"]).is_err());
    }

    #[test]
    fn unknown_dataset_is_enumerated() {
        match "imagenet21k".parse::<DatasetName>() {
            Err(RpcError::UnknownDataset { known, .. }) => assert!(known.contains("cub")),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            "mini-imagenet".parse::<DatasetName>().unwrap(),
            DatasetName::MiniImageNet
        );
    }

    #[test]
    fn reference_statistics() {
        let cub = DatasetName::Cub.info();
        assert_eq!(cub.images, Some(11_788));
        assert_eq!(cub.classes, Some(200));
        assert_eq!(cub.semantic_dim, Some(312));
    }

    #[test]
    fn grayscale_replication_and_resize() {
        let im = Image::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let rgb = im.with_channels(3);
        assert_eq!(rgb.data.len(), 12);
        assert_eq!(&rgb.data[4..8], &im.data[..]);
        let big = Image::new(1, 4, 4, vec![0.5; 16]).unwrap().resize(8);
        assert!(big.data.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }
}
