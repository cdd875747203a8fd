use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How bank holders are distributed over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampling {
    /// No update: filled once from the first source image, frozen afterwards.
    #[serde(rename = "NU")]
    NoUpdate,
    /// Random sampling: holders follow the source class frequencies.
    #[serde(rename = "RS")]
    Random,
    /// Inverted long-tail: rarer classes get more holders.
    #[serde(rename = "ILS")]
    InvertedLongTail,
    /// Class-balanced: the same number of holders per class.
    #[serde(rename = "CBS")]
    ClassBalanced,
}

impl Sampling {
    pub const ALL: [Sampling; 4] = [
        Sampling::NoUpdate,
        Sampling::Random,
        Sampling::InvertedLongTail,
        Sampling::ClassBalanced,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Sampling::NoUpdate => "NU",
            Sampling::Random => "RS",
            Sampling::InvertedLongTail => "ILS",
            Sampling::ClassBalanced => "CBS",
        }
    }
}

/// Contiguous per-class slot ranges: class `c` owns `counts[c]` slots
/// starting right after class `c - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    counts: Vec<usize>,
}

impl SlotLayout {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Layout("no classes".into()));
        }
        if counts.len() > u8::MAX as usize + 1 {
            return Err(Error::Layout(format!("{} classes exceed the u8 label range", counts.len())));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Layout(format!("class {c} owns no slot")));
        }
        Ok(Self { counts })
    }

    /// `floor(K / C)` holders per class, one extra for the first `K mod C` classes.
    pub fn class_balanced(k: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Layout("no classes".into()));
        }
        if k < classes {
            return Err(Error::Layout(format!(
                "bank size {k} cannot hold {classes} classes"
            )));
        }
        let base = k / classes;
        let extra = k % classes;
        Self::from_counts((0..classes).map(|c| base + usize::from(c < extra)).collect())
    }

    /// Holders proportional to `weights` (largest-remainder rounding), with
    /// at least one holder per class.
    pub fn proportional(k: usize, weights: &[f64]) -> Result<Self> {
        let classes = weights.len();
        if classes == 0 || k < classes {
            return Err(Error::Layout(format!(
                "bank size {k} cannot hold {classes} classes"
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Layout("class weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        let norm: Vec<f64> = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / classes as f64; classes]
        };
        let ideal: Vec<f64> = norm.iter().map(|w| w * k as f64).collect();
        let mut counts: Vec<usize> = ideal.iter().map(|x| (x.floor() as usize).max(1)).collect();
        let mut assigned: usize = counts.iter().sum();

        // hand out leftovers by largest remainder, ties to the lower class id
        while assigned < k {
            let c = (0..classes)
                .max_by(|&a, &b| {
                    let ra = ideal[a] - counts[a] as f64;
                    let rb = ideal[b] - counts[b] as f64;
                    ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            counts[c] += 1;
            assigned += 1;
        }
        // minimum-one bumps may overshoot: take back from the most over-served
        while assigned > k {
            let c = (0..classes)
                .filter(|&c| counts[c] > 1)
                .max_by(|&a, &b| {
                    let ra = counts[a] as f64 - ideal[a];
                    let rb = counts[b] as f64 - ideal[b];
                    ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            counts[c] -= 1;
            assigned -= 1;
        }
        Self::from_counts(counts)
    }

    /// Holders proportional to inverse class frequency.
    pub fn inverted(k: usize, frequencies: &[f64]) -> Result<Self> {
        let inv: Vec<f64> = frequencies.iter().map(|f| 1.0 / f.max(1e-12)).collect();
        Self::proportional(k, &inv)
    }

    /// Layout used by a sampling strategy. `frequencies` are the source class
    /// frequencies (uniform when absent). NU shares the RS layout.
    pub fn for_sampling(
        sampling: Sampling,
        k: usize,
        classes: usize,
        frequencies: Option<&[f64]>,
    ) -> Result<Self> {
        let uniform = vec![1.0; classes];
        let freqs = frequencies.unwrap_or(&uniform);
        if freqs.len() != classes {
            return Err(Error::Layout(format!(
                "{} class frequencies for {classes} classes",
                freqs.len()
            )));
        }
        match sampling {
            Sampling::ClassBalanced => Self::class_balanced(k, classes),
            Sampling::Random | Sampling::NoUpdate => Self::proportional(k, freqs),
            Sampling::InvertedLongTail => Self::inverted(k, freqs),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn range(&self, class: usize) -> Range<usize> {
        let start: usize = self.counts[..class].iter().sum();
        start..start + self.counts[class]
    }

    /// Label of every slot in order.
    pub fn slot_labels(&self) -> Vec<u8> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c as u8).take(n))
            .collect()
    }

    /// Recovers the layout from a label column; labels must be sorted and
    /// cover every class `0..classes`.
    pub fn from_labels(labels: &[u8], classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        let mut prev = 0u8;
        for (k, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::Layout(format!("slot {k} has label {l} >= {classes}")));
            }
            if l < prev {
                return Err(Error::Layout("slot labels are not grouped by class".into()));
            }
            prev = l;
            counts[l as usize] += 1;
        }
        Self::from_counts(counts)
    }
}
