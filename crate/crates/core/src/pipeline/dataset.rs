//! Datasets: ingestion from paired directories, seeded splits and the
//! synthetic toy corpus.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{quantize, read_image, read_mask, write_image, write_mask};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageMaskPair, ImageTensor, PairSource};
use crate::rng::{derive_seed, item_seed, normal_vec, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Seeded shuffle into 60/20/20 (val and test rounded, train takes the rest).
    pub fn seeded(ids: &[String], seed: u64) -> Self {
        let mut ids = ids.to_vec();
        ids.shuffle(&mut seeded(seed));
        let n = ids.len();
        let n_test = (n as f64 * 0.2).round() as usize;
        let n_val = (n as f64 * 0.2).round() as usize;
        let test = ids.split_off(n - n_test);
        let val = ids.split_off(n - n_test - n_val);
        Self { train: ids, val, test }
    }
}

/// A healthy, lesion-free image usable as a generation canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub id: String,
    pub image: ImageTensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub pairs: Vec<ImageMaskPair>,
    pub splits: Splits,
    pub backgrounds: Vec<Background>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let ids: HashSet<&str> = self.pairs.iter().map(|p| p.id.as_str()).collect();
        if ids.len() != self.pairs.len() {
            return Err(Error::InvalidConfig(format!("dataset {} has duplicate pair ids", self.name)));
        }
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in self.splits.get(split) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::InvalidConfig(format!("split {} names unknown pair {id}", split.name())));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidConfig(format!("pair {id} appears in more than one split")));
                }
            }
        }
        if seen.len() != ids.len() {
            return Err(Error::InvalidConfig("splits do not cover every pair".into()));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<ImageMaskPair> {
        let by_id: BTreeMap<&str, &ImageMaskPair> = self.pairs.iter().map(|p| (p.id.as_str(), p)).collect();
        self.splits.get(split).iter().map(|id| by_id[id.as_str()].clone()).collect()
    }

    pub fn split_hash(&self, split: Split) -> String {
        content_hash(&self.split(split))
    }

    /// `(channels, height, width)` shared by every pair.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.pairs.first().map(|p| p.image.shape())
    }

    /// Writes the paired-directory layout that [`ingest_dataset`] reads,
    /// including split files.
    pub fn write(&self, root: &Path) -> Result<()> {
        for p in &self.pairs {
            write_image(&root.join("images").join(format!("{}.png", p.id)), &p.image)?;
            write_mask(&root.join("masks").join(format!("{}.png", p.id)), &p.mask)?;
        }
        for b in &self.backgrounds {
            write_image(&root.join("backgrounds").join(format!("{}.png", b.id)), &b.image)?;
        }
        std::fs::create_dir_all(root.join("splits"))?;
        for split in Split::ALL {
            let mut s = self.splits.get(split).join("\n");
            s.push('\n');
            std::fs::write(root.join("splits").join(format!("{}.txt", split.name())), s)?;
        }
        Ok(())
    }
}

/// SHA-256 over ids, image values and mask values, in order.
pub fn content_hash(pairs: &[ImageMaskPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.id.as_bytes());
        h.update([0]);
        p.image.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        h.update(p.mask.data());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `images/<stem>.*` with `masks/<stem>[ _mask | _segmentation ].*`,
    /// optional `backgrounds/` and `splits/{train,val,test}.txt`.
    PairedDirs,
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::unreadable(dir, e))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn read_split_files(root: &Path) -> Result<Option<Splits>> {
    let dir = root.join("splits");
    if !dir.is_dir() {
        return Ok(None);
    }
    let read = |name: &str| -> Result<Vec<String>> {
        let path = dir.join(format!("{name}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::unreadable(&path, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    };
    Ok(Some(Splits { train: read("train")?, val: read("val")?, test: read("test")? }))
}

/// Reads every `images/<stem>` with its `masks/<stem>[suffix]` under `root`,
/// sorted by stem.
pub fn read_pairs(root: &Path, source: PairSource) -> Result<Vec<ImageMaskPair>> {
    let images = list_files(&root.join("images"))?;
    let masks = list_files(&root.join("masks"))?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let find_mask = |stem: &str| {
        ["", "_mask", "_segmentation", "_Segmentation"].iter().find_map(|suffix| masks.get(&format!("{stem}{suffix}")))
    };
    let missing: Vec<String> = images.keys().filter(|s| find_mask(s).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingMask(missing));
    }
    let mut pairs: Vec<ImageMaskPair> = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let image = read_image(path)?;
        let mask = read_mask(find_mask(stem).expect("checked above"))?;
        if let Some(first) = pairs.first() {
            if first.image.shape() != image.shape() {
                return Err(Error::SizeMismatch(format!(
                    "{stem} is {:?}, expected {:?}",
                    image.shape(),
                    first.image.shape()
                )));
            }
        }
        let pair = ImageMaskPair::new(stem.clone(), image, mask, source)
            .map_err(|e| Error::SizeMismatch(format!("{stem}: {e}")))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Loads a dataset from disk. Images are normalized to `[-1, 1]`, masks
/// binarized at 128. Without split files, a seeded 60/20/20 split is drawn.
pub fn ingest_dataset(root: &Path, layout: Layout, seed: u64) -> Result<Dataset> {
    let Layout::PairedDirs = layout;
    let pairs = read_pairs(root, PairSource::Real)?;
    let shape = pairs.first().map(|p| p.image.shape());
    let mut backgrounds = Vec::new();
    if root.join("backgrounds").is_dir() {
        for (stem, path) in list_files(&root.join("backgrounds"))? {
            let image = read_image(&path)?;
            if Some(image.shape()) != shape {
                return Err(Error::SizeMismatch(format!("background {stem} is {:?}", image.shape())));
            }
            backgrounds.push(Background { id: stem, image });
        }
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let splits = match read_split_files(root)? {
        Some(s) => s,
        None => Splits::seeded(&ids, seed),
    };
    let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string();
    let ds = Dataset { name, pairs, splits, backgrounds };
    ds.validate()?;
    Ok(ds)
}

/// One synthetic scan: the healthy tissue, the same tissue with a lesion,
/// and the lesion's exact support.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub healthy: ImageTensor,
    pub image: ImageTensor,
    pub mask: BinaryMask,
}

/// Lesion interior brightness; tissue sits near +0.5.
const LESION_LEVEL: f32 = -0.35;

/// Healthy tissue: bright, with a shared radial falloff, a random smooth
/// texture and a little pixel noise.
pub fn toy_background(seed: u64, size: usize) -> ImageTensor {
    let mut rng = seeded(seed);
    let base: f32 = rng.random_range(0.5..0.7);
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f32::consts::TAU);
            let freq = rng.random_range(1.0..3.0) * std::f32::consts::TAU / size as f32;
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(0.02..0.04))
        })
        .collect();
    let noise = normal_vec(&mut rng, size * size);
    let c = (size as f32 - 1.0) / 2.0;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            let r2 = (((y - c) / c).powi(2) + ((x - c) / c).powi(2)) / 2.0;
            let tex: f32 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum();
            (base - 0.5 * r2 + tex + 0.02 * noise[i]).clamp(-1.0, 1.0)
        })
        .collect();
    quantize(&ImageTensor::new(1, size, size, data).expect("square image"))
}

/// A random filled ellipse kept away from the border.
pub fn toy_ellipse(rng: &mut impl Rng, size: usize) -> BinaryMask {
    let s = size as f32;
    let a = rng.random_range(0.08..0.22) * s;
    let b = rng.random_range(0.08..0.22) * s;
    let cy = rng.random_range(0.3..0.7) * s;
    let cx = rng.random_range(0.3..0.7) * s;
    let th: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (sin, cos) = th.sin_cos();
    BinaryMask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

pub fn toy_sample(seed: u64, size: usize) -> ToySample {
    let healthy = toy_background(derive_seed(seed, "tissue"), size);
    let mut rng = seeded(derive_seed(seed, "lesion"));
    let mask = toy_ellipse(&mut rng, size);
    let shade: f32 = rng.random_range(-0.08..0.08);
    let noise = normal_vec(&mut rng, size * size);
    let mut image = healthy.clone();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        if mask.data()[i] == 1 {
            *v = LESION_LEVEL + shade + 0.04 * noise[i];
        }
    }
    ToySample { healthy, image: quantize(&image), mask }
}

/// Toy corpus with `n` lesion pairs and `n / 2` independent healthy
/// backgrounds.
pub fn synth_toy_dataset(seed: u64, n: usize, image_size: usize) -> Result<Dataset> {
    synth_toy_dataset_with_backgrounds(seed, n, image_size, n / 2)
}

pub fn synth_toy_dataset_with_backgrounds(seed: u64, n: usize, image_size: usize, n_backgrounds: usize) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::InvalidConfig(format!("toy dataset needs at least 10 pairs, got {n}")));
    }
    if image_size < 16 {
        return Err(Error::InvalidConfig(format!("toy images must be at least 16 pixels, got {image_size}")));
    }
    let pair_seed = derive_seed(seed, "pairs");
    let pairs: Vec<ImageMaskPair> = (0..n)
        .map(|i| {
            let s = toy_sample(item_seed(pair_seed, i), image_size);
            ImageMaskPair { id: format!("toy{i:04}"), image: s.image, mask: s.mask, source: PairSource::Real }
        })
        .collect();
    let bg_seed = derive_seed(seed, "backgrounds");
    let backgrounds = (0..n_backgrounds)
        .map(|i| Background { id: format!("bg{i:04}"), image: toy_background(item_seed(bg_seed, i), image_size) })
        .collect();
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let splits = Splits::seeded(&ids, derive_seed(seed, "split"));
    Ok(Dataset { name: "toy".into(), pairs, splits, backgrounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let s = Splits::seeded(&ids, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let ids: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        let s = Splits::seeded(&ids, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        assert_eq!(Splits::seeded(&ids, 3), s);
    }

    #[test]
    fn toy_is_deterministic_and_exact() {
        let a = synth_toy_dataset(5, 12, 32).unwrap();
        let b = synth_toy_dataset(5, 12, 32).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.backgrounds, b.backgrounds);
        a.validate().unwrap();
        for p in &a.pairs {
            assert!(!p.mask.is_empty());
            assert!(p.image.is_normalized());
        }
        assert!(synth_toy_dataset(5, 9, 32).is_err());
    }

    #[test]
    fn toy_mask_matches_rendered_support() {
        for i in 0..5 {
            let s = toy_sample(i, 64);
            for (j, &m) in s.mask.data().iter().enumerate() {
                let changed = s.image.data()[j] != s.healthy.data()[j];
                assert_eq!(m == 1, changed, "pixel {j}");
            }
        }
    }

    #[test]
    fn ingest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_toy_dataset(1, 10, 16).unwrap();
        ds.write(dir.path()).unwrap();
        let back = ingest_dataset(dir.path(), Layout::PairedDirs, 0).unwrap();
        assert_eq!(back.splits, ds.splits);
        assert_eq!(back.backgrounds.len(), 5);
        for p in &back.pairs {
            let orig = ds.pairs.iter().find(|q| q.id == p.id).unwrap();
            assert_eq!(p, orig);
        }
        std::fs::remove_dir_all(dir.path().join("splits")).unwrap();
        let reseeded = ingest_dataset(dir.path(), Layout::PairedDirs, 0).unwrap();
        assert_eq!(reseeded.splits.train.len(), 6);
        std::fs::remove_file(dir.path().join("masks/toy0003.png")).unwrap();
        match ingest_dataset(dir.path(), Layout::PairedDirs, 0) {
            Err(Error::MissingMask(stems)) => assert_eq!(stems, vec!["toy0003".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
