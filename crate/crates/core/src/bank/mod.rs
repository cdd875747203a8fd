//! The labeled instance bank: `K` unit-norm source embeddings (the feature
//! bank) with fixed class labels (the label bank), grouped into contiguous
//! per-class slot ranges.
//!
//! Updates arrive as one embedding per class present in a source image and
//! are blended into the bank with an exponential moving average.

mod boundary;
pub(crate) mod io;
mod layout;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Rng};

pub use boundary::{
    boundary_artifacts, boundary_mask, select_embeddings, BoundaryArtifacts, BoundaryMask,
};
pub use io::{load_bank, save_bank, BANK_MAGIC, BANK_VERSION};
pub use layout::{Sampling, SlotLayout};

/// Per-class embedding chosen from a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selecting {
    /// One uniformly drawn pixel embedding of the class.
    #[serde(rename = "RS")]
    Random,
    /// Mean of all class pixels.
    #[serde(rename = "AVG")]
    Average,
    /// k-means centroid of all class pixels.
    #[serde(rename = "KM")]
    KMeans,
    /// Half boundary mean, half k-means centroid of non-edge pixels.
    #[serde(rename = "BPS")]
    BoundaryPixels,
}

impl Selecting {
    pub const ALL: [Selecting; 4] = [
        Selecting::Random,
        Selecting::Average,
        Selecting::KMeans,
        Selecting::BoundaryPixels,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Selecting::Random => "RS",
            Selecting::Average => "AVG",
            Selecting::KMeans => "KM",
            Selecting::BoundaryPixels => "BPS",
        }
    }
}

/// How one per-class update maps onto the class's slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotMode {
    /// One slot per update, cycling through the class's slots.
    RoundRobin,
    /// Every slot of the class receives the update.
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankUpdatePolicy {
    pub sampling: Sampling,
    pub selecting: Selecting,
    /// Iterations between bank updates.
    pub interval: usize,
    /// EMA momentum on the old slot value.
    pub momentum: f64,
    pub slot_mode: SlotMode,
    /// Clusters per class for KM/BPS; the largest cluster's centroid is used.
    pub kmeans_k: usize,
    /// Re-project updated rows onto the unit sphere. Off only to inspect
    /// raw EMA values.
    pub renormalize: bool,
}

impl Default for BankUpdatePolicy {
    fn default() -> Self {
        Self {
            sampling: Sampling::ClassBalanced,
            selecting: Selecting::BoundaryPixels,
            interval: 50,
            momentum: 0.999,
            slot_mode: SlotMode::RoundRobin,
            kmeans_k: 1,
            renormalize: true,
        }
    }
}

impl BankUpdatePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Invalid("bank update interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!(
                "EMA momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        if self.kmeans_k == 0 {
            return Err(Error::Invalid("kmeans_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBank {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    layout: SlotLayout,
    cursors: Vec<usize>,
    updates_applied: u64,
    filled: bool,
}

/// Class-balanced bank of `k` slots over `classes` classes with `dim`-dimensional
/// rows. Rows come from `seed_pool` entries of the matching class (cycled),
/// or random unit vectors for classes the pool does not cover.
pub fn init_bank(
    k: usize,
    classes: usize,
    dim: usize,
    rng: &mut Rng,
    seed_pool: Option<&[(Vec<f64>, u8)]>,
) -> Result<InstanceBank> {
    let layout = SlotLayout::class_balanced(k, classes)?;
    InstanceBank::with_layout(layout, dim, rng, seed_pool)
}

impl InstanceBank {
    pub fn with_layout(
        layout: SlotLayout,
        dim: usize,
        rng: &mut Rng,
        seed_pool: Option<&[(Vec<f64>, u8)]>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be >= 1".into()));
        }
        let classes = layout.classes();
        let mut pool_by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
        if let Some(pool) = seed_pool {
            for (emb, label) in pool {
                if emb.len() != dim {
                    return Err(Error::Shape(format!(
                        "seed embedding of length {} for dimension {dim}",
                        emb.len()
                    )));
                }
                if (*label as usize) < classes {
                    if let Ok(u) = l2_normalize(emb) {
                        pool_by_class[*label as usize].push(u);
                    }
                }
            }
        }
        let labels = layout.slot_labels();
        let mut features = Vec::with_capacity(labels.len() * dim);
        for c in 0..classes {
            let pool = &pool_by_class[c];
            for n in 0..layout.count(c) {
                if pool.is_empty() {
                    features.extend(rng.unit_vector(dim));
                } else {
                    features.extend_from_slice(&pool[n % pool.len()]);
                }
            }
        }
        Ok(Self {
            dim,
            features,
            labels,
            cursors: vec![0; classes],
            layout,
            updates_applied: 0,
            filled: seed_pool.is_some(),
        })
    }

    /// Number of slots `K`.
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.layout.classes()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn slots_of(&self, class: usize) -> Range<usize> {
        self.layout.range(class)
    }

    pub fn cursors(&self) -> &[usize] {
        &self.cursors
    }

    pub fn updates_applied(&self) -> u64 {
        self.updates_applied
    }

    pub fn is_filled(&self) -> bool {
        self.filled
    }

    /// Blends one selected embedding per class into the bank:
    /// `slot <- momentum * slot + (1 - momentum) * selected[c]`, then
    /// re-normalized when the policy asks for it. Classes missing from
    /// `selected` keep their slots. Under NU sampling the first call fills
    /// the class slots outright and every later call is a no-op.
    pub fn ema_update(
        &mut self,
        selected: &BTreeMap<u8, Vec<f64>>,
        policy: &BankUpdatePolicy,
    ) -> Result<()> {
        for (&c, emb) in selected {
            if c as usize >= self.classes() {
                return Err(Error::Invalid(format!(
                    "update for class {c} in a bank of {} classes",
                    self.classes()
                )));
            }
            if emb.len() != self.dim {
                return Err(Error::Shape(format!(
                    "update of length {} for dimension {}",
                    emb.len(),
                    self.dim
                )));
            }
        }
        if policy.sampling == Sampling::NoUpdate {
            if !self.filled {
                for (&c, emb) in selected {
                    if let Ok(u) = l2_normalize(emb) {
                        for slot in self.layout.range(c as usize) {
                            self.row_mut(slot).copy_from_slice(&u);
                        }
                    }
                }
                self.filled = true;
                self.updates_applied += 1;
            }
            return Ok(());
        }

        let w = policy.momentum;
        for (&c, emb) in selected {
            let c = c as usize;
            let slots = match policy.slot_mode {
                SlotMode::Broadcast => self.layout.range(c),
                SlotMode::RoundRobin => {
                    let start = self.layout.range(c).start + self.cursors[c];
                    self.cursors[c] = (self.cursors[c] + 1) % self.layout.count(c);
                    start..start + 1
                }
            };
            for slot in slots {
                let row = self.row_mut(slot);
                let mut raw: Vec<f64> = row
                    .iter()
                    .zip(emb)
                    .map(|(old, new)| w * old + (1.0 - w) * new)
                    .collect();
                if policy.renormalize {
                    match l2_normalize(&raw) {
                        Ok(u) => raw = u,
                        // blend cancelled out; keep the previous row
                        Err(_) => continue,
                    }
                }
                row.copy_from_slice(&raw);
            }
        }
        self.filled = true;
        self.updates_applied += 1;
        Ok(())
    }

    /// Bank with explicit rows and labels; labels must be grouped by class.
    pub fn from_rows(dim: usize, features: Vec<f64>, labels: Vec<u8>, classes: usize) -> Result<Self> {
        Self::from_parts(dim, features, labels, classes, vec![0; classes], 0, true)
    }

    fn row_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.features[slot * self.dim..(slot + 1) * self.dim]
    }

    pub(crate) fn from_parts(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        classes: usize,
        cursors: Vec<usize>,
        updates_applied: u64,
        filled: bool,
    ) -> Result<Self> {
        let layout = SlotLayout::from_labels(&labels, classes)?;
        if features.len() != labels.len() * dim {
            return Err(Error::Shape("feature block does not match K x D".into()));
        }
        if cursors.len() != classes
            || cursors.iter().enumerate().any(|(c, &p)| p >= layout.count(c))
        {
            return Err(Error::Format("cursor out of range".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bank features".into()));
        }
        Ok(Self {
            dim,
            features,
            labels,
            layout,
            cursors,
            updates_applied,
            filled,
        })
    }
}
