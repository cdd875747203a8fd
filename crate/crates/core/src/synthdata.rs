//! Procedural segmentation scenes with a photometric domain gap.
//!
//! A scene is a random partition of the image into regions (Voronoi cells,
//! stripes or blobs). Each region draws a class from the domain's frequency
//! profile, and each class present in a scene draws one color from its
//! palette entry. The domain shift is a per-channel gain and offset plus
//! pixel noise, so target ground truth stays valid for evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseGrid, LabelMap, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Voronoi,
    Stripes,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPalette {
    pub mean: [f64; 3],
    /// Per-channel variance of the per-scene class color.
    pub var: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub offset: [f64; 3],
    pub gain: [f64; 3],
}

impl Shift {
    pub fn identity() -> Self {
        Self {
            offset: [0.0; 3],
            gain: [1.0; 3],
        }
    }
}

impl Default for Shift {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub class_count: usize,
    pub palette: Vec<ClassPalette>,
    pub shift: Shift,
    pub noise_std: f64,
    /// Region class weights; normalized on use.
    pub freq_profile: Vec<f64>,
    pub layout: Layout,
    /// Regions per scene (Voronoi cells, stripes, or blobs incl. background).
    pub regions: usize,
}

/// `(c + 1)^-exponent`, normalized.
pub fn long_tail_profile(classes: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|c| ((c + 1) as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Evenly spaced hues at mid saturation, with a small per-scene variance.
pub fn default_palette(classes: usize) -> Vec<ClassPalette> {
    (0..classes)
        .map(|c| {
            let hue = c as f64 / classes as f64;
            let rgb = hsv_to_rgb(hue, 0.6, 0.8);
            ClassPalette {
                mean: rgb,
                var: [0.002; 3],
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_count;
        if c == 0 || c > 256 {
            return Err(Error::Invalid(format!("class_count {c} outside 1..=256")));
        }
        if self.palette.len() != c {
            return Err(Error::Invalid(format!(
                "palette has {} entries for {c} classes",
                self.palette.len()
            )));
        }
        if self.freq_profile.len() != c {
            return Err(Error::Invalid(format!(
                "freq_profile has {} entries for {c} classes",
                self.freq_profile.len()
            )));
        }
        if self.freq_profile.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.freq_profile.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Invalid("freq_profile must be non-negative with a positive sum".into()));
        }
        if self.palette.iter().any(|p| p.var.iter().any(|v| !(*v >= 0.0))) {
            return Err(Error::Invalid("palette variances must be non-negative".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Invalid("noise_std must be non-negative".into()));
        }
        if self.regions == 0 {
            return Err(Error::Invalid("regions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn normalized_freqs(&self) -> Vec<f64> {
        let total: f64 = self.freq_profile.iter().sum();
        self.freq_profile.iter().map(|w| w / total).collect()
    }

    /// True when `other` differs at most in shift and noise.
    pub fn shares_layout_with(&self, other: &DomainSpec) -> bool {
        self.class_count == other.class_count
            && self.palette == other.palette
            && self.freq_profile == other.freq_profile
            && self.layout == other.layout
            && self.regions == other.regions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: DenseGrid,
    pub labels: LabelMap,
}

fn distinct_positions(rng: &mut Rng, n: usize, total: usize) -> Vec<usize> {
    let n = n.min(total);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = rng.below(total);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn region_map(spec: &DomainSpec, rng: &mut Rng, h: usize, w: usize) -> (Vec<usize>, usize) {
    let n = spec.regions;
    match spec.layout {
        Layout::Voronoi => {
            let seeds = distinct_positions(rng, n, h * w);
            let coords: Vec<(f64, f64)> = seeds
                .iter()
                .map(|&p| ((p / w) as f64, (p % w) as f64))
                .collect();
            let mut map = vec![0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (r, &(si, sj)) in coords.iter().enumerate() {
                        let d = (i as f64 - si).powi(2) + (j as f64 - sj).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = r;
                        }
                    }
                    map[i * w + j] = best;
                }
            }
            (map, seeds.len())
        }
        Layout::Stripes => {
            let vertical = rng.uniform() < 0.5;
            let len = if vertical { w } else { h };
            let stripes = n.min(len);
            let mut cuts = distinct_positions(rng, stripes - 1, len - 1);
            cuts.iter_mut().for_each(|c| *c += 1);
            cuts.sort_unstable();
            let mut map = vec![0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let pos = if vertical { j } else { i };
                    map[i * w + j] = cuts.partition_point(|&c| c <= pos);
                }
            }
            (map, stripes)
        }
        Layout::Blobs => {
            let mut map = vec![0; h * w];
            let mut used = 1;
            for r in 1..n {
                let ci = rng.uniform_in(0.0, h as f64);
                let cj = rng.uniform_in(0.0, w as f64);
                let ri = rng.uniform_in(h as f64 / 10.0, h as f64 / 4.0);
                let rj = rng.uniform_in(w as f64 / 10.0, w as f64 / 4.0);
                let mut painted = false;
                for i in 0..h {
                    for j in 0..w {
                        let di = (i as f64 - ci) / ri;
                        let dj = (j as f64 - cj) / rj;
                        if di * di + dj * dj <= 1.0 {
                            map[i * w + j] = r;
                            painted = true;
                        }
                    }
                }
                if painted {
                    used = r + 1;
                }
            }
            (map, used.max(1))
        }
    }
}

/// One scene: region layout, region classes from the frequency profile,
/// one palette draw per class, then shift and pixel noise.
pub fn gen_scene(spec: &DomainSpec, rng: &mut Rng, h: usize, w: usize) -> Result<LabeledImage> {
    spec.validate()?;
    if h < 8 || w < 8 {
        return Err(Error::Invalid(format!("scene {h}x{w} below the 8x8 minimum")));
    }
    let (regions, n_regions) = region_map(spec, rng, h, w);
    let freqs = spec.normalized_freqs();
    let region_class: Vec<u8> = (0..n_regions).map(|_| rng.weighted_index(&freqs) as u8).collect();
    let colors: Vec<[f64; 3]> = spec
        .palette
        .iter()
        .map(|p| {
            let mut c = [0.0; 3];
            for ch in 0..3 {
                c[ch] = p.mean[ch] + p.var[ch].sqrt() * rng.normal();
            }
            c
        })
        .collect();

    let labels: Vec<u8> = regions.iter().map(|&r| region_class[r]).collect();
    let mut image = DenseGrid::zeros(h, w, 3);
    for (p, &l) in labels.iter().enumerate() {
        let px = image.at_mut(p);
        for ch in 0..3 {
            let v = spec.shift.gain[ch] * colors[l as usize][ch] + spec.shift.offset[ch];
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * rng.normal()
            } else {
                0.0
            };
            px[ch] = (v + noise).clamp(0.0, 1.0);
        }
    }
    Ok(LabeledImage {
        image,
        labels: LabelMap::from_vec(h, w, labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Source => 1,
            Split::Target => 2,
        }
    }
}

/// Seed of image `index` in `split`, derived from the dataset seed.
pub fn image_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    Rng::new(dataset_seed)
        .derive((split.tag() << 40) | index as u64)
        .seed()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub image_dtype: String,
    pub label_dtype: String,
    pub source_spec: DomainSpec,
    pub target_spec: DomainSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source: Vec<LabeledImage>,
    pub target: Vec<LabeledImage>,
    pub manifest: DatasetManifest,
}

impl Benchmark {
    pub fn class_count(&self) -> usize {
        self.manifest.source_spec.class_count
    }

    /// Pixel frequency of each class over the source split.
    pub fn source_class_frequencies(&self) -> Vec<f64> {
        class_frequencies(&self.source, self.class_count())
    }
}

pub fn class_frequencies(images: &[LabeledImage], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for img in images {
        for (c, n) in img.labels.histogram(classes).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .into_iter()
        .map(|n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
        .collect()
}

pub fn gen_dataset(
    source_spec: &DomainSpec,
    target_spec: &DomainSpec,
    n_source: usize,
    n_target: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Benchmark> {
    source_spec.validate()?;
    target_spec.validate()?;
    if !source_spec.shares_layout_with(target_spec) {
        return Err(Error::Invalid(
            "target spec may differ from the source only in shift and noise".into(),
        ));
    }
    let make = |spec: &DomainSpec, split: Split, n: usize| -> Result<Vec<LabeledImage>> {
        (0..n)
            .map(|i| gen_scene(spec, &mut Rng::new(image_seed(seed, split, i)), h, w))
            .collect()
    };
    Ok(Benchmark {
        source: make(source_spec, Split::Source, n_source)?,
        target: make(target_spec, Split::Target, n_target)?,
        manifest: DatasetManifest {
            format_version: 1,
            height: h,
            width: w,
            seed,
            n_source,
            n_target,
            image_dtype: "f64le".into(),
            label_dtype: "u8".into(),
            source_spec: source_spec.clone(),
            target_spec: target_spec.clone(),
        },
    })
}

/// Everything needed to rebuild a paired benchmark from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub tail_exponent: f64,
    pub layout: Layout,
    pub regions: usize,
    /// Defaults to evenly spaced hues when absent.
    pub palette: Option<Vec<ClassPalette>>,
    pub source_shift: Shift,
    pub target_shift: Shift,
    pub source_noise: f64,
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 64,
            width: 64,
            n_source: 200,
            n_target: 200,
            tail_exponent: 1.5,
            layout: Layout::Voronoi,
            regions: 16,
            palette: None,
            source_shift: Shift::identity(),
            target_shift: Shift {
                offset: [0.2, 0.05, -0.1],
                gain: [0.7, 0.8, 1.2],
            },
            source_noise: 0.03,
            target_noise: 0.12,
            seed: 7,
        }
    }
}

impl BenchmarkConfig {
    pub fn specs(&self) -> (DomainSpec, DomainSpec) {
        let palette = self
            .palette
            .clone()
            .unwrap_or_else(|| default_palette(self.classes));
        let source = DomainSpec {
            class_count: self.classes,
            palette,
            shift: self.source_shift.clone(),
            noise_std: self.source_noise,
            freq_profile: long_tail_profile(self.classes, self.tail_exponent),
            layout: self.layout,
            regions: self.regions,
        };
        let target = DomainSpec {
            shift: self.target_shift.clone(),
            noise_std: self.target_noise,
            ..source.clone()
        };
        (source, target)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, t) = self.specs();
        s.validate()?;
        t.validate()?;
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid("images must be at least 8x8".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Benchmark> {
        self.validate()?;
        let (s, t) = self.specs();
        gen_dataset(&s, &t, self.n_source, self.n_target, self.height, self.width, self.seed)
    }
}

fn image_path(dir: &Path, split: Split, i: usize) -> std::path::PathBuf {
    dir.join(split.name()).join(format!("image_{i:05}.bin"))
}

fn label_path(dir: &Path, split: Split, i: usize) -> std::path::PathBuf {
    dir.join(split.name()).join(format!("labels_{i:05}.bin"))
}

/// Writes `manifest.json` plus `source/` and `target/` directories of flat
/// little-endian image grids (`H·W·3` f64) and label grids (`H·W` u8).
pub fn write_dataset(dir: &Path, data: &Benchmark) -> Result<()> {
    for (split, images) in [(Split::Source, &data.source), (Split::Target, &data.target)] {
        fs::create_dir_all(dir.join(split.name()))?;
        for (i, img) in images.iter().enumerate() {
            let bytes: Vec<u8> = img.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(image_path(dir, split, i), bytes)?;
            fs::write(label_path(dir, split, i), img.labels.data())?;
        }
    }
    let json = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Benchmark> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 || manifest.image_dtype != "f64le" || manifest.label_dtype != "u8" {
        return Err(Error::Format("unsupported dataset manifest".into()));
    }
    let (h, w) = (manifest.height, manifest.width);
    let read = |split: Split, n: usize| -> Result<Vec<LabeledImage>> {
        (0..n)
            .map(|i| {
                let raw = fs::read(image_path(dir, split, i))?;
                if raw.len() != h * w * 3 * 8 {
                    return Err(Error::Format(format!("{} image {i}: wrong size", split.name())));
                }
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let labels = fs::read(label_path(dir, split, i))?;
                Ok(LabeledImage {
                    image: DenseGrid::from_vec(h, w, 3, data)?,
                    labels: LabelMap::from_vec(h, w, labels)?,
                })
            })
            .collect()
    };
    Ok(Benchmark {
        source: read(Split::Source, manifest.n_source)?,
        target: read(Split::Target, manifest.n_target)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize) -> DomainSpec {
        DomainSpec {
            class_count: classes,
            palette: default_palette(classes),
            shift: Shift::identity(),
            noise_std: 0.05,
            freq_profile: long_tail_profile(classes, 1.5),
            layout: Layout::Voronoi,
            regions: 10,
        }
    }

    #[test]
    fn single_class_noiseless_scene_is_constant() {
        let mut s = spec(1);
        s.noise_std = 0.0;
        let img = gen_scene(&s, &mut Rng::new(4), 16, 12).unwrap();
        assert!(img.labels.data().iter().all(|&l| l == 0));
        let first = img.image.at(0).to_vec();
        assert!(img.image.pixels().all(|p| p == first.as_slice()));
    }

    #[test]
    fn same_seed_same_scene() {
        for layout in [Layout::Voronoi, Layout::Stripes, Layout::Blobs] {
            let s = DomainSpec { layout, ..spec(4) };
            let a = gen_scene(&s, &mut Rng::new(99), 20, 20).unwrap();
            let b = gen_scene(&s, &mut Rng::new(99), 20, 20).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn degenerate_profile_gives_one_class() {
        let mut s = spec(4);
        s.freq_profile = vec![1.0, 0.0, 0.0, 0.0];
        for layout in [Layout::Voronoi, Layout::Stripes, Layout::Blobs] {
            s.layout = layout;
            let img = gen_scene(&s, &mut Rng::new(1), 16, 16).unwrap();
            assert!(img.labels.data().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let mut s = spec(5);
        s.shift = Shift {
            offset: [0.4, -0.4, 0.0],
            gain: [1.5, 1.0, 0.5],
        };
        s.noise_std = 0.3;
        let img = gen_scene(&s, &mut Rng::new(2), 16, 16).unwrap();
        assert!(img.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_small_scenes_and_bad_specs() {
        assert!(gen_scene(&spec(3), &mut Rng::new(0), 7, 16).is_err());
        let mut s = spec(3);
        s.freq_profile = vec![0.0; 3];
        assert!(s.validate().is_err());
        let mut s = spec(3);
        s.palette.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn every_region_owns_a_pixel() {
        // so every class drawn for a region is present in the label map
        for layout in [Layout::Voronoi, Layout::Stripes, Layout::Blobs] {
            let s = DomainSpec { layout, ..spec(5) };
            for seed in 0..20 {
                let (map, n) = region_map(&s, &mut Rng::new(seed), 16, 16);
                let mut seen = vec![false; n];
                map.iter().for_each(|&r| seen[r] = true);
                if layout == Layout::Blobs {
                    // later blobs may cover earlier ones entirely
                    assert!(seen[n - 1]);
                } else {
                    assert!(seen.iter().all(|&b| b), "{layout:?} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let s = spec(3);
        let d = gen_dataset(&s, &s, 0, 0, 16, 16, 5).unwrap();
        assert!(d.source.is_empty() && d.target.is_empty());
        assert_eq!(d.manifest.n_source, 0);
        assert!(serde_json::to_string(&d.manifest).is_ok());
    }

    #[test]
    fn identical_specs_give_zero_gap_statistics() {
        let s = spec(3);
        let d = gen_dataset(&s, &s, 4, 4, 16, 16, 5).unwrap();
        assert_eq!(d.manifest.source_spec, d.manifest.target_spec);
        // different per-image seeds, same generator
        assert_ne!(d.source[0], d.target[0]);
    }

    #[test]
    fn target_must_share_layout() {
        let s = spec(3);
        let mut t = spec(3);
        t.regions = 4;
        assert!(gen_dataset(&s, &t, 1, 1, 16, 16, 0).is_err());
        let mut t = spec(3);
        t.shift.offset = [0.1, 0.0, 0.0];
        t.noise_std = 0.1;
        assert!(gen_dataset(&s, &t, 1, 1, 16, 16, 0).is_ok());
    }

    #[test]
    fn desk_benchmark_matches_profile() {
        let cfg = BenchmarkConfig::default();
        let data = cfg.generate().unwrap();
        let (spec, _) = cfg.specs();
        let want = spec.normalized_freqs();
        let got = data.source_class_frequencies();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 0.2 * w, "got {got:?} want {want:?}");
        }
        assert_eq!(data.source.len(), 200);
        assert_eq!(data.target.len(), 200);
    }

    #[test]
    fn disk_round_trip() {
        let s = spec(3);
        let d = gen_dataset(&s, &s, 2, 3, 8, 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }
}
