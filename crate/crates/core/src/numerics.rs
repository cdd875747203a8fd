//! Deterministic numerical kernels shared by every other module.
//!
//! Grids are row-major with explicit `(height, width, channels)` ordering:
//! the value of channel `ch` at pixel `(i, j)` lives at
//! `(i * width + j) * channels + ch`. All reductions run sequentially in
//! index order so results are bit-reproducible.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `height × width × channels` grid of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at flat index {pos}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of pixel `(i, j)`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.width + j) * self.channels
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = self.offset(i, j);
        &mut self.data[o..o + self.channels]
    }

    /// Pixel by flat index `p = i * width + j`.
    #[inline]
    pub fn at(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels.max(1))
    }

    pub fn same_shape(&self, other: &DenseGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn same_extent(&self, other: &DenseGrid) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// `height × width` grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, class: u8) {
        self.data[i * self.width + j] = class;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Pixel count per class id below `classes`; ids at or above are ignored.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &c in &self.data {
            if (c as usize) < classes {
                h[c as usize] += 1;
            }
        }
        h
    }
}

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if !is_on_simplex(&probs, Self::TOLERANCE) {
            return Err(Error::Invalid("vector is not on the probability simplex".into()));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, at: usize) -> Self {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for SimplexVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn is_on_simplex(p: &[f64], tol: f64) -> bool {
    !p.is_empty()
        && p.iter().all(|&x| x.is_finite() && x >= 0.0)
        && (p.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Seeded generator backed by ChaCha8, whose output stream is specified
/// independently of platform and word size.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator for a named sub-stream. Depends only on the parent
    /// seed and `stream`, never on how much of the parent was consumed.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Index drawn with probability proportional to `weights`.
    /// Falls back to uniform when every weight is zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return self.below(weights.len());
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if target < acc && w > 0.0 {
                return i;
            }
        }
        // float round-off: return the last positive entry
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random direction on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            if let Ok(u) = l2_normalize(&v) {
                return u;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize input".into()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Temperature softmax, shifted by the maximum score for stability.
pub fn softmax_temp(scores: &[f64], tp: f64) -> Result<SimplexVector> {
    if !(tp > 0.0) || !tp.is_finite() {
        return Err(Error::BadTemperature(tp));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("softmax of an empty vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores".into()));
    }
    let mut out = vec![0.0; scores.len()];
    softmax_temp_into(scores, tp, &mut out);
    Ok(SimplexVector(out))
}

/// Unchecked kernel behind [`softmax_temp`]; `out` must match `scores` in length.
#[inline]
pub fn softmax_temp_into(scores: &[f64], tp: f64, out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = ((s - max) / tp).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// [`softmax_temp_into`] overwriting the scores themselves.
#[inline]
pub fn softmax_temp_in_place(buf: &mut [f64], tp: f64) {
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in buf.iter_mut() {
        *x = ((*x - max) / tp).exp();
        sum += *x;
    }
    for x in buf.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// True when the last Lloyd step left every assignment unchanged.
    pub converged: bool,
}

impl KMeans {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Sum of squared distances from each point to its centroid.
    pub fn cost<P: AsRef<[f64]>>(&self, points: &[P]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| squared_distance(p.as_ref(), &self.centroids[a]))
            .sum()
    }
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = squared_distance(p, &centroids[0]);
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn assign_all<P: AsRef<[f64]>>(points: &[P], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p.as_ref(), centroids)).collect()
}

fn cluster_means<P: AsRef<[f64]>>(
    points: &[P],
    assignments: &[usize],
    previous: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

/// Moves the farthest point (from its own centroid, taken from clusters
/// with at least two members) into each empty cluster.
fn reseed_empty<P: AsRef<[f64]>>(
    points: &[P],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
) {
    let k = centroids.len();
    for j in 0..k {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        if sizes[j] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = squared_distance(p.as_ref(), &centroids[a]);
            if far.map_or(true, |(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        if let Some((i, _)) = far {
            centroids[j] = points[i].as_ref().to_vec();
            assignments[i] = j;
        }
    }
}

fn seed_centroids<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), points[chosen[0]].as_ref()))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            rng.weighted_index(&d2)
        } else {
            // every remaining point coincides with a chosen one
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            let nd = squared_distance(p.as_ref(), points[next].as_ref());
            if nd < *d {
                *d = nd;
            }
        }
    }
    chosen.into_iter().map(|i| points[i].as_ref().to_vec()).collect()
}

/// Seeding restarts used by [`kmeans`] when `k > 1`.
pub const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with distance-weighted (k-means++) seeding, best of
/// [`KMEANS_RESTARTS`] seedings by cost (the first wins ties). With `k = 1`
/// every seeding converges to the mean, so a single run is made.
///
/// Each run iterates until no assignment changes, which leaves every point on
/// a nearest centroid (lowest index on ties) and every centroid at the mean
/// of its members. A positive `tol` additionally stops once no centroid moves
/// farther than `tol`, which may end short of that fixed point. Clusters that
/// go empty are re-seeded with the point farthest from its own centroid.
pub fn kmeans<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
) -> Result<KMeans> {
    let restarts = if k == 1 { 1 } else { KMEANS_RESTARTS };
    kmeans_restarts(points, k, rng, max_iter, tol, restarts)
}

/// [`kmeans`] with an explicit number of seedings (at least one run).
pub fn kmeans_restarts<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Result<KMeans> {
    let mut best = lloyd(points, k, rng, max_iter, tol)?;
    let mut best_cost = best.cost(points);
    for _ in 1..restarts {
        let run = lloyd(points, k, rng, max_iter, tol)?;
        let cost = run.cost(points);
        if cost < best_cost {
            best = run;
            best_cost = cost;
        }
    }
    Ok(best)
}

fn lloyd<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
) -> Result<KMeans> {
    let n = points.len();
    if k == 0 {
        return Err(Error::Invalid("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Invalid(format!("k-means with {n} points and k = {k}")));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Shape("k-means points of unequal dimension".into()));
    }

    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments = assign_all(points, &centroids);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        reseed_empty(points, &mut centroids, &mut assignments);
        let next = cluster_means(points, &assignments, &centroids);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let reassigned = assign_all(points, &centroids);
        if reassigned == assignments {
            converged = true;
            break;
        }
        assignments = reassigned;
        if tol > 0.0 && shift <= tol {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
        converged,
    })
}
