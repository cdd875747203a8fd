//! Tiny per-pixel segmentation model.
//!
//! A frozen random projection maps each `k × k` RGB patch (borders
//! replicated) to `D0` raw features, `raw = tanh(P (patch - 0.5) + b)`.
//! The learnable part is `u = W^T raw`, `e = u / |u|` (zero when `u = 0`),
//! and `logits = V^T e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_temp_in_place, DenseGrid, Rng};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelModel {
    pub patch: usize,
    pub raw_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    /// `raw_dim × (patch² · 3)`, row-major. Frozen.
    pub proj: Vec<f64>,
    /// `raw_dim`. Frozen.
    pub bias: Vec<f64>,
    /// `raw_dim × embed_dim`, row-major.
    pub w: Vec<f64>,
    /// `embed_dim × classes`, row-major.
    pub v: Vec<f64>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `H × W × D` unit (or zero) embeddings.
    pub features: DenseGrid,
    /// `H × W × C` class probabilities.
    pub probs: DenseGrid,
}

/// Intermediates kept for `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    pub raw: DenseGrid,
    /// `|u|` per pixel.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl Grads {
    pub fn zeros(model: &PixelModel) -> Self {
        Self {
            w: vec![0.0; model.w.len()],
            v: vec![0.0; model.v.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().chain(&self.v).all(|&g| g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.w.iter().chain(&self.v).fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl PixelModel {
    pub fn new(cfg: &ModelConfig, classes: usize, rng: &mut Rng) -> Self {
        let fan_in = cfg.patch * cfg.patch * 3;
        let p_std = cfg.featurizer_scale / (fan_in as f64).sqrt();
        let proj = (0..cfg.raw_dim * fan_in).map(|_| p_std * rng.normal()).collect();
        let bias = (0..cfg.raw_dim).map(|_| 0.5 * rng.normal()).collect();
        let w_std = 1.0 / (cfg.raw_dim as f64).sqrt();
        let w = (0..cfg.raw_dim * cfg.embed_dim).map(|_| w_std * rng.normal()).collect();
        let v = (0..cfg.embed_dim * classes).map(|_| 0.1 * rng.normal()).collect();
        Self {
            patch: cfg.patch,
            raw_dim: cfg.raw_dim,
            embed_dim: cfg.embed_dim,
            classes,
            proj,
            bias,
            w,
            v,
        }
    }

    pub fn check(&self) -> Result<()> {
        let fan_in = self.patch * self.patch * 3;
        if self.patch % 2 == 0
            || self.proj.len() != self.raw_dim * fan_in
            || self.bias.len() != self.raw_dim
            || self.w.len() != self.raw_dim * self.embed_dim
            || self.v.len() != self.embed_dim * self.classes
        {
            return Err(Error::Shape("model parameter sizes disagree with dimensions".into()));
        }
        Ok(())
    }

    /// Frozen patch features, `H × W × D0`.
    pub fn featurize(&self, image: &DenseGrid) -> DenseGrid {
        let (h, w) = (image.height(), image.width());
        let r = (self.patch / 2) as i64;
        let fan_in = self.patch * self.patch * 3;
        let mut patch = vec![0.0; fan_in];
        let mut raw = DenseGrid::zeros(h, w, self.raw_dim);
        for i in 0..h {
            for j in 0..w {
                let mut n = 0;
                for di in -r..=r {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    for dj in -r..=r {
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        for &x in &image.pixel(ii, jj)[..3] {
                            patch[n] = x - 0.5;
                            n += 1;
                        }
                    }
                }
                let out = raw.pixel_mut(i, j);
                for (o, (row, b)) in out.iter_mut().zip(self.proj.chunks_exact(fan_in).zip(&self.bias)) {
                    let s: f64 = row.iter().zip(&patch).map(|(a, x)| a * x).sum();
                    *o = (s + b).tanh();
                }
            }
        }
        raw
    }

    /// Embeddings and probabilities from precomputed raw features.
    pub fn head(&self, raw: &DenseGrid) -> (Forward, Vec<f64>) {
        let (h, w) = (raw.height(), raw.width());
        let (d, c) = (self.embed_dim, self.classes);
        let mut features = DenseGrid::zeros(h, w, d);
        let mut probs = DenseGrid::zeros(h, w, c);
        let mut norms = vec![0.0; h * w];
        for p in 0..h * w {
            let x = raw.at(p);
            let e = features.at_mut(p);
            for (i, &xi) in x.iter().enumerate() {
                for (ed, wd) in e.iter_mut().zip(&self.w[i * d..(i + 1) * d]) {
                    *ed += xi * wd;
                }
            }
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[p] = n;
            if n > 0.0 {
                e.iter_mut().for_each(|v| *v /= n);
            } else {
                e.fill(0.0);
            }
            let logits = probs.at_mut(p);
            for (dd, &ed) in e.iter().enumerate() {
                for (l, vv) in logits.iter_mut().zip(&self.v[dd * c..(dd + 1) * c]) {
                    *l += ed * vv;
                }
            }
            softmax_temp_in_place(logits, 1.0);
        }
        (Forward { features, probs }, norms)
    }

    pub fn forward(&self, image: &DenseGrid) -> Forward {
        self.head(&self.featurize(image)).0
    }

    pub fn forward_cached(&self, image: &DenseGrid) -> (Forward, Cache) {
        let raw = self.featurize(image);
        let (fwd, norms) = self.head(&raw);
        (fwd, Cache { raw, norms })
    }

    /// Plain gradient step.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) {
        self.w.iter_mut().zip(&grads.w).for_each(|(p, g)| *p -= lr * g);
        self.v.iter_mut().zip(&grads.v).for_each(|(p, g)| *p -= lr * g);
    }
}

/// Accumulates into `grads` the parameter gradients of a loss whose
/// gradient is `dlogits` with respect to the logits and, optionally,
/// `de_extra` with respect to the embeddings `e`.
pub fn backward(
    model: &PixelModel,
    fwd: &Forward,
    raw: &DenseGrid,
    norms: &[f64],
    dlogits: &DenseGrid,
    de_extra: Option<&DenseGrid>,
    grads: &mut Grads,
) -> Result<()> {
    let (d, c) = (model.embed_dim, model.classes);
    if dlogits.channels() != c || !dlogits.same_extent(&fwd.probs) {
        return Err(Error::Shape("dlogits does not match the forward pass".into()));
    }
    if let Some(x) = de_extra {
        if x.channels() != d || !x.same_extent(&fwd.features) {
            return Err(Error::Shape("embedding gradient does not match the forward pass".into()));
        }
    }
    let mut de = vec![0.0; d];
    let mut du = vec![0.0; d];
    for p in 0..fwd.features.pixel_count() {
        let e = fwd.features.at(p);
        let g = dlogits.at(p);
        for dd in 0..d {
            let vrow = &model.v[dd * c..(dd + 1) * c];
            de[dd] = vrow.iter().zip(g).map(|(v, g)| v * g).sum();
            for (gv, gl) in grads.v[dd * c..(dd + 1) * c].iter_mut().zip(g) {
                *gv += e[dd] * gl;
            }
        }
        if let Some(x) = de_extra {
            de.iter_mut().zip(x.at(p)).for_each(|(a, b)| *a += b);
        }
        let n = norms[p];
        if n == 0.0 {
            continue;
        }
        let proj: f64 = e.iter().zip(&de).map(|(a, b)| a * b).sum();
        for dd in 0..d {
            du[dd] = (de[dd] - e[dd] * proj) / n;
        }
        for (i, &xi) in raw.at(p).iter().enumerate() {
            for (gw, u) in grads.w[i * d..(i + 1) * d].iter_mut().zip(&du) {
                *gw += xi * u;
            }
        }
    }
    if let Some(bad) = grads.w.iter().chain(&grads.v).position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {bad} is not finite")));
    }
    Ok(())
}
