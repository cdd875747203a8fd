use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kmeans, DenseGrid, LabelMap, Rng};

use super::{BankUpdatePolicy, Selecting};

const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BoundaryMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    /// Flags in row-major order.
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Marks pixels whose 3×3 neighborhood, clipped at the image border, holds
/// more than `sigma` distinct classes.
pub fn boundary_mask(labels: &LabelMap, sigma: usize) -> BoundaryMask {
    let (h, w) = (labels.height(), labels.width());
    let mut data = vec![false; h * w];
    let mut seen = [0u8; 9];
    for i in 0..h {
        let rows = i.saturating_sub(1)..(i + 2).min(h);
        for j in 0..w {
            let mut distinct = 0;
            for r in rows.clone() {
                for c in j.saturating_sub(1)..(j + 2).min(w) {
                    let l = labels.get(r, c);
                    if !seen[..distinct].contains(&l) {
                        seen[distinct] = l;
                        distinct += 1;
                    }
                }
            }
            data[i * w + j] = distinct > sigma;
        }
    }
    BoundaryMask {
        height: h,
        width: w,
        data,
    }
}

/// Everything boundary pixel selection derives from one labeled feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryArtifacts {
    pub mask: BoundaryMask,
    /// Class of each boundary pixel, `None` off the boundary.
    pub boundary_labels: Vec<Option<u8>>,
    /// Mean embedding of each class's boundary pixels.
    pub per_class_boundary_mean: BTreeMap<u8, Vec<f64>>,
    /// Largest-cluster k-means centroid of each class's non-edge pixels.
    pub per_class_centroid: BTreeMap<u8, Vec<f64>>,
    /// Average of the two above, or whichever one exists.
    pub per_class_avg: BTreeMap<u8, Vec<f64>>,
}

fn check_shapes(features: &DenseGrid, labels: &LabelMap) -> Result<()> {
    if features.height() != labels.height() || features.width() != labels.width() {
        return Err(Error::Shape(format!(
            "features {}x{} vs labels {}x{}",
            features.height(),
            features.width(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(())
}

fn mean_of(features: &DenseGrid, pixels: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; features.channels()];
    for &p in pixels {
        for (a, x) in m.iter_mut().zip(features.at(p)) {
            *a += x;
        }
    }
    let n = pixels.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Centroid of the most populated k-means cluster (lowest index on ties).
fn dominant_centroid(
    features: &DenseGrid,
    pixels: &[usize],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let points: Vec<&[f64]> = pixels.iter().map(|&p| features.at(p)).collect();
    let km = kmeans(&points, k.min(points.len()), rng, KMEANS_MAX_ITER, 0.0)?;
    let sizes = km.cluster_sizes();
    let mut best = 0;
    for (j, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = j;
        }
    }
    Ok(km.centroids[best].clone())
}

fn pixels_by_class(labels: &LabelMap, keep: impl Fn(usize) -> bool) -> BTreeMap<u8, Vec<usize>> {
    let mut out: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (p, &l) in labels.data().iter().enumerate() {
        if keep(p) {
            out.entry(l).or_default().push(p);
        }
    }
    out
}

/// Boundary means, non-edge centroids and their average for every class
/// present in `labels`. A class with no boundary pixels uses the centroid
/// alone; one with no non-edge pixels uses the boundary mean alone.
pub fn boundary_artifacts(
    features: &DenseGrid,
    labels: &LabelMap,
    mask: &BoundaryMask,
    rng: &mut Rng,
    kmeans_k: usize,
) -> Result<BoundaryArtifacts> {
    check_shapes(features, labels)?;
    if mask.height() != labels.height() || mask.width() != labels.width() {
        return Err(Error::Shape("mask does not match label map".into()));
    }
    let edge = pixels_by_class(labels, |p| mask.data()[p]);
    let interior = pixels_by_class(labels, |p| !mask.data()[p]);

    let boundary_labels = labels
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&l, &m)| m.then_some(l))
        .collect();

    let per_class_boundary_mean: BTreeMap<u8, Vec<f64>> = edge
        .iter()
        .map(|(&c, px)| (c, mean_of(features, px)))
        .collect();
    let mut per_class_centroid = BTreeMap::new();
    for (&c, px) in &interior {
        per_class_centroid.insert(c, dominant_centroid(features, px, kmeans_k, rng)?);
    }

    let mut per_class_avg = BTreeMap::new();
    for c in edge.keys().chain(interior.keys()) {
        let avg = match (per_class_boundary_mean.get(c), per_class_centroid.get(c)) {
            (Some(b), Some(t)) => b.iter().zip(t).map(|(x, y)| 0.5 * (x + y)).collect(),
            (Some(b), None) => b.clone(),
            (None, Some(t)) => t.clone(),
            (None, None) => unreachable!(),
        };
        per_class_avg.insert(*c, avg);
    }

    Ok(BoundaryArtifacts {
        mask: mask.clone(),
        boundary_labels,
        per_class_boundary_mean,
        per_class_centroid,
        per_class_avg,
    })
}

/// One embedding per class present in the image, chosen per `policy.selecting`.
/// Absent classes get no entry.
pub fn select_embeddings(
    features: &DenseGrid,
    labels: &LabelMap,
    mask: &BoundaryMask,
    rng: &mut Rng,
    policy: &BankUpdatePolicy,
) -> Result<BTreeMap<u8, Vec<f64>>> {
    check_shapes(features, labels)?;
    match policy.selecting {
        Selecting::BoundaryPixels => {
            Ok(boundary_artifacts(features, labels, mask, rng, policy.kmeans_k)?.per_class_avg)
        }
        Selecting::Average => Ok(pixels_by_class(labels, |_| true)
            .into_iter()
            .map(|(c, px)| (c, mean_of(features, &px)))
            .collect()),
        Selecting::KMeans => {
            let mut out = BTreeMap::new();
            for (c, px) in pixels_by_class(labels, |_| true) {
                out.insert(c, dominant_centroid(features, &px, policy.kmeans_k, rng)?);
            }
            Ok(out)
        }
        Selecting::Random => Ok(pixels_by_class(labels, |_| true)
            .into_iter()
            .map(|(c, px)| (c, features.at(px[rng.below(px.len())]).to_vec()))
            .collect()),
    }
}
