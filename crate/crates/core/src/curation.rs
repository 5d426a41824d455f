//! Feature-space similarity screening of generated pairs and morphological
//! erosion of their masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageMaskPair, ImageTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Maps an image to a fixed-length embedding.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Raw embedding; validation and the zero-norm check happen in
    /// [`extract_features`].
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// The default dependency-free extractor: per-channel means over a fixed
/// `grid x grid` patch layout, centered, then L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMeanExtractor {
    pub grid: usize,
    pub channels: usize,
    id: String,
}

impl PatchMeanExtractor {
    pub fn new(channels: usize) -> Self {
        Self::with_grid(8, channels)
    }

    pub fn with_grid(grid: usize, channels: usize) -> Self {
        Self { grid, channels, id: format!("patch_mean_{grid}x{grid}_c{channels}") }
    }

    /// Uncentered patch means in channel-major, row-major order.
    pub fn patch_means(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let (c, h, w) = image.shape();
        if c != self.channels {
            return Err(Error::DimensionMismatch(c, self.channels));
        }
        if h < self.grid || w < self.grid {
            return Err(Error::ShapeMismatch(format!("{h}x{w} image smaller than the {} grid", self.grid)));
        }
        let g = self.grid;
        let mut out = Vec::with_capacity(self.dim());
        for ch in 0..c {
            for gy in 0..g {
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                for gx in 0..g {
                    let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += image.get(ch, y, x) as f64;
                        }
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(out)
    }
}

impl FeatureExtractor for PatchMeanExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut v = self.patch_means(image)?;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(v)
    }
}

type EmbedFn = dyn Fn(&ImageTensor) -> Result<Vec<f32>> + Send + Sync;

/// Adapter slot for an external pretrained vision backbone. The closure owns
/// whatever runtime loads and runs the weights.
pub struct BackboneExtractor {
    id: String,
    dim: usize,
    embed: Box<EmbedFn>,
}

impl BackboneExtractor {
    pub fn new(id: impl Into<String>, dim: usize, embed: Box<EmbedFn>) -> Self {
        Self { id: id.into(), dim, embed }
    }
}

impl FeatureExtractor for BackboneExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok((self.embed)(image)?.into_iter().map(f64::from).collect())
    }
}

pub fn extract_features(image: &ImageTensor, extractor: &dyn FeatureExtractor) -> Result<FeatureVector> {
    let values = extractor.embed(image)?;
    if values.len() != extractor.dim() {
        return Err(Error::DimensionMismatch(values.len(), extractor.dim()));
    }
    let fv = FeatureVector { values, extractor_id: extractor.id().to_string() };
    let n = fv.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::ZeroNorm(format!("{} produced norm {n}", extractor.id())));
    }
    Ok(fv)
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::DimensionMismatch(a.values.len(), b.values.len()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    TooSimilar,
    TooDissimilar,
}

impl Verdict {
    pub fn classify(similarity: f64, lo: f64, hi: f64) -> Self {
        if similarity < lo {
            Verdict::TooDissimilar
        } else if similarity > hi {
            Verdict::TooSimilar
        } else {
            Verdict::Kept
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityEntry {
    pub pair_id: String,
    pub similarity: f64,
    pub verdict: Verdict,
}

/// Erosion settings applied to kept masks, recorded for provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErosionSettings {
    pub radius: usize,
    pub iterations: usize,
}

impl Default for ErosionSettings {
    fn default() -> Self {
        Self { radius: 1, iterations: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub entries: Vec<QualityEntry>,
    pub lo: f64,
    pub hi: f64,
    pub extractor_id: String,
    #[serde(default)]
    pub erosion: Option<ErosionSettings>,
}

impl QualityReport {
    pub fn count(&self, verdict: Verdict) -> usize {
        self.entries.iter().filter(|e| e.verdict == verdict).count()
    }

    pub fn kept(&self) -> usize {
        self.count(Verdict::Kept)
    }

    pub fn rejected(&self) -> usize {
        self.count(Verdict::TooSimilar) + self.count(Verdict::TooDissimilar)
    }

    /// Every verdict agrees with its similarity and the thresholds.
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().all(|e| e.verdict == Verdict::classify(e.similarity, self.lo, self.hi))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub kept: Vec<ImageMaskPair>,
    pub rejected: Vec<ImageMaskPair>,
    pub report: QualityReport,
}

/// Scores each pair by its maximum cosine similarity to any reference and
/// keeps those within `[lo, hi]`. Input order is preserved in both outputs.
pub fn filter_pairs(
    pairs: Vec<ImageMaskPair>,
    references: &[ImageTensor],
    lo: f64,
    hi: f64,
    extractor: &dyn FeatureExtractor,
) -> Result<FilterOutcome> {
    if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::InvalidRange(format!("need -1 <= lo < hi <= 1, got {lo} and {hi}")));
    }
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let refs = references.iter().map(|r| extract_features(r, extractor)).collect::<Result<Vec<_>>>()?;
    let mut report = QualityReport { entries: Vec::with_capacity(pairs.len()), lo, hi, extractor_id: extractor.id().into(), erosion: None };
    let (mut kept, mut rejected) = (Vec::new(), Vec::new());
    for pair in pairs {
        let f = extract_features(&pair.image, extractor)?;
        let mut best = f64::NEG_INFINITY;
        for r in &refs {
            best = best.max(cosine_similarity(&f, r)?);
        }
        let verdict = Verdict::classify(best, lo, hi);
        report.entries.push(QualityEntry { pair_id: pair.id.clone(), similarity: best, verdict });
        if verdict == Verdict::Kept {
            kept.push(pair);
        } else {
            rejected.push(pair);
        }
    }
    Ok(FilterOutcome { kept, rejected, report })
}

/// Binary erosion by a `(2r+1)²` square, `iterations` times, treating pixels
/// beyond the border as 0. `radius = 0` or `iterations = 0` is the identity.
pub fn erode_mask(mask: &BinaryMask, radius: usize, iterations: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut cur = mask.data().to_vec();
    let mut tmp = vec![0u8; h * w];
    for _ in 0..iterations {
        // The square element is separable: a horizontal then a vertical
        // window minimum.
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = if x < radius || x + radius >= w {
                    0
                } else {
                    cur[y * w + x - radius..=y * w + x + radius].iter().copied().min().unwrap_or(0)
                };
            }
        }
        for y in 0..h {
            for x in 0..w {
                cur[y * w + x] = if y < radius || y + radius >= h {
                    0
                } else {
                    (y - radius..=y + radius).map(|yy| tmp[yy * w + x]).min().unwrap_or(0)
                };
            }
        }
    }
    BinaryMask::new(h, w, cur).expect("erosion keeps shape and binarity")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector { values: v.to_vec(), extractor_id: "t".into() }
    }

    #[test]
    fn cosine_closed_forms() {
        assert!((cosine_similarity(&fv(&[1.0, 2.0]), &fv(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 0.0);
        let s = cosine_similarity(&fv(&[1.0, 1.0]), &fv(&[1.0, 0.0])).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&fv(&[1.0]), &fv(&[1.0, 0.0])), Err(Error::DimensionMismatch(1, 2))));
        assert!(matches!(cosine_similarity(&fv(&[0.0, 0.0]), &fv(&[1.0, 0.0])), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let ex = PatchMeanExtractor::new(1);
        let ones = ImageTensor::filled(1, 64, 64, 1.0);
        assert!(ex.patch_means(&ones).unwrap().iter().all(|&m| m == 1.0));
        assert_eq!(ex.patch_means(&ones).unwrap().len(), 64);
        assert!(matches!(extract_features(&ones, &ex), Err(Error::ZeroNorm(_))));
        assert!(matches!(extract_features(&ImageTensor::filled(3, 64, 64, 0.2), &ex), Err(Error::DimensionMismatch(3, 1))));
    }

    #[test]
    fn verdict_thresholds() {
        let v: Vec<_> = [0.1, 0.5, 0.95].iter().map(|&s| Verdict::classify(s, 0.2, 0.9)).collect();
        assert_eq!(v, [Verdict::TooDissimilar, Verdict::Kept, Verdict::TooSimilar]);
        assert_eq!(Verdict::classify(0.2, 0.2, 0.9), Verdict::Kept);
        assert_eq!(Verdict::classify(0.9, 0.2, 0.9), Verdict::Kept);
    }

    #[test]
    fn erosion_of_square() {
        let m = BinaryMask::from_fn(7, 7, |y, x| (1..6).contains(&y) && (1..6).contains(&x));
        let e = erode_mask(&m, 1, 1);
        assert_eq!(e, BinaryMask::from_fn(7, 7, |y, x| (2..5).contains(&y) && (2..5).contains(&x)));
        assert!(erode_mask(&BinaryMask::zeros(5, 5), 1, 3).is_empty());
        assert_eq!(erode_mask(&BinaryMask::ones(5, 5), 1, 1).count(), 9);
        assert_eq!(erode_mask(&m, 0, 4), m);
    }

    #[test]
    fn backbone_adapter_checks_dimension() {
        let ex = BackboneExtractor::new("fake", 3, Box::new(|_| Ok(vec![1.0, 2.0])));
        assert!(matches!(extract_features(&ImageTensor::filled(1, 8, 8, 0.0), &ex), Err(Error::DimensionMismatch(2, 3))));
        let ex = BackboneExtractor::new("fake", 2, Box::new(|_| Ok(vec![1.0, 2.0])));
        assert_eq!(extract_features(&ImageTensor::filled(1, 8, 8, 0.0), &ex).unwrap().extractor_id, "fake");
    }
}
