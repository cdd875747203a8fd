//! Dual-level pseudo-label regeneration.
//!
//! Per pixel, the semantic pseudo-label `z` (over `C` classes) and the
//! instance pseudo-label `q` (over `K` bank slots) are aligned through the
//! slot labels: `scatter` copies each class probability onto that class's
//! slots, `gather` sums slot probabilities back per class. The regenerated
//! instance label rescales `q` by the scattered `z`; the regenerated semantic
//! label blends `z` with the gathered `q`. Both read the same input snapshot,
//! so neither output feeds the other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseGrid;

/// Denominators below this trigger the scaling fallback.
pub const SCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegenMode {
    Smoothing,
    Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionStrategy {
    pub z_mode: RegenMode,
    pub q_mode: RegenMode,
    pub phi: f64,
}

impl Default for InteractionStrategy {
    fn default() -> Self {
        Self {
            z_mode: RegenMode::Smoothing,
            q_mode: RegenMode::Scaling,
            phi: 0.9,
        }
    }
}

impl InteractionStrategy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::Invalid(format!("phi {} outside [0, 1]", self.phi)));
        }
        Ok(())
    }
}

/// `out[k] = z[labels[k]]`.
pub fn scatter(z: &[f64], labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| z[l as usize]).collect()
}

/// `q_k * z_sc_k / sum_k q_k * z_sc_k`. Returns `q_alpha` unchanged and `true`
/// when the products vanish.
pub fn scale(q_alpha: &[f64], z_sc: &[f64]) -> (Vec<f64>, bool) {
    let prod: Vec<f64> = q_alpha.iter().zip(z_sc).map(|(q, z)| q * z).collect();
    let denom: f64 = prod.iter().sum();
    if denom < SCALE_EPS {
        return (q_alpha.to_vec(), true);
    }
    (prod.into_iter().map(|x| x / denom).collect(), false)
}

/// `out[c] = sum of q[k] over slots labeled c`; classes without slots get 0.
pub fn gather(q: &[f64], labels: &[u8], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for (&qk, &l) in q.iter().zip(labels) {
        out[l as usize] += qk;
    }
    out
}

/// `phi * z + (1 - phi) * q_ga`, clamped per coordinate into
/// `[min(z_i, q_i), max(z_i, q_i)]` so float rounding never leaves the
/// convex hull of the two inputs.
pub fn smooth(z: &[f64], q_ga: &[f64], phi: f64) -> Vec<f64> {
    z.iter()
        .zip(q_ga)
        .map(|(&a, &b)| (phi * a + (1.0 - phi) * b).clamp(a.min(b), a.max(b)))
        .collect()
}

/// Class mass spread evenly over the class's slots: `z_sc[k] / n(label k)`,
/// renormalized. This is the slot-space counterpart of `z` used by the
/// smoothing variant of instance regeneration. `None` if no mass lands on
/// any slot.
pub fn spread(z_sc: &[f64], labels: &[u8], slot_counts: &[usize]) -> Option<Vec<f64>> {
    let raw: Vec<f64> = z_sc
        .iter()
        .zip(labels)
        .map(|(&z, &l)| z / slot_counts[l as usize] as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    if total < SCALE_EPS {
        return None;
    }
    Some(raw.into_iter().map(|x| x / total).collect())
}

/// Intermediate and final vectors for one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelRegen {
    pub z: Vec<f64>,
    pub q_alpha: Vec<f64>,
    pub z_sc: Vec<f64>,
    pub q_ga: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub scale_fallback: bool,
}

fn slot_counts(labels: &[u8], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts
}

/// Regeneration of one pixel.
///
/// `q_mode = Smoothing` is an interpretation (only the scaling form is
/// pinned down for the instance level): `q_hat = phi * q_alpha
/// + (1 - phi) * spread(z_sc)`. `z_mode = Scaling` mirrors instance scaling
/// at class level: `z_hat = z * q_ga / sum(z * q_ga)`, falling back to `z`.
pub fn regenerate_pixel(
    z: &[f64],
    q_alpha: &[f64],
    labels: &[u8],
    strategy: &InteractionStrategy,
) -> PixelRegen {
    let counts = slot_counts(labels, z.len());
    regenerate_pixel_with_counts(z, q_alpha, labels, &counts, strategy)
}

fn regenerate_pixel_with_counts(
    z: &[f64],
    q_alpha: &[f64],
    labels: &[u8],
    counts: &[usize],
    strategy: &InteractionStrategy,
) -> PixelRegen {
    let phi = strategy.phi;
    let z_sc = scatter(z, labels);
    let q_ga = gather(q_alpha, labels, z.len());
    let mut fallback = false;

    let q_hat = match strategy.q_mode {
        RegenMode::Scaling => {
            let (q, fb) = scale(q_alpha, &z_sc);
            fallback |= fb;
            q
        }
        RegenMode::Smoothing => match spread(&z_sc, labels, counts) {
            Some(s) => q_alpha
                .iter()
                .zip(&s)
                .map(|(q, s)| phi * q + (1.0 - phi) * s)
                .collect(),
            None => {
                fallback = true;
                q_alpha.to_vec()
            }
        },
    };
    let z_hat = match strategy.z_mode {
        RegenMode::Smoothing => smooth(z, &q_ga, phi),
        RegenMode::Scaling => {
            let (zh, fb) = scale(z, &q_ga);
            fallback |= fb;
            zh
        }
    };
    PixelRegen {
        z: z.to_vec(),
        q_alpha: q_alpha.to_vec(),
        z_sc,
        q_ga,
        z_hat,
        q_hat,
        scale_fallback: fallback,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenOutput {
    /// `H × W × C` regenerated semantic pseudo-labels.
    pub z_hat: DenseGrid,
    /// `H × W × K` regenerated instance pseudo-labels.
    pub q_hat: DenseGrid,
    /// Pixels where a scaling denominator vanished.
    pub scale_fallback: Vec<bool>,
}

pub fn regenerate(
    z_map: &DenseGrid,
    q_alpha_map: &DenseGrid,
    bank_labels: &[u8],
    strategy: &InteractionStrategy,
) -> Result<RegenOutput> {
    strategy.validate()?;
    if !z_map.same_extent(q_alpha_map) {
        return Err(Error::Shape(format!(
            "semantic map {}x{} vs instance map {}x{}",
            z_map.height(),
            z_map.width(),
            q_alpha_map.height(),
            q_alpha_map.width()
        )));
    }
    if q_alpha_map.channels() != bank_labels.len() {
        return Err(Error::Shape(format!(
            "instance map has {} channels for {} bank slots",
            q_alpha_map.channels(),
            bank_labels.len()
        )));
    }
    let classes = z_map.channels();
    if let Some(&l) = bank_labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Invalid(format!("slot label {l} >= {classes} classes")));
    }
    let counts = slot_counts(bank_labels, classes);
    let (h, w) = (z_map.height(), z_map.width());
    let mut z_hat = DenseGrid::zeros(h, w, classes);
    let mut q_hat = DenseGrid::zeros(h, w, bank_labels.len());
    let mut flags = vec![false; h * w];
    for p in 0..h * w {
        let r = regenerate_pixel_with_counts(
            z_map.at(p),
            q_alpha_map.at(p),
            bank_labels,
            &counts,
            strategy,
        );
        z_hat.at_mut(p).copy_from_slice(&r.z_hat);
        q_hat.at_mut(p).copy_from_slice(&r.q_hat);
        flags[p] = r.scale_fallback;
    }
    Ok(RegenOutput {
        z_hat,
        q_hat,
        scale_fallback: flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{is_on_simplex, Rng};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn scatter_examples() {
        assert_eq!(scatter(&[0.7, 0.3], &[0, 0, 1, 1]), vec![0.7, 0.7, 0.3, 0.3]);
        assert_eq!(scatter(&[0.0, 1.0, 0.0], &[0, 1, 1, 2]), vec![0.0, 1.0, 1.0, 0.0]);
        let u = scatter(&[0.25; 4], &[3, 1, 0, 2, 2]);
        assert!(u.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn scale_examples() {
        let (q, fb) = scale(&[0.25; 4], &[0.7, 0.7, 0.3, 0.3]);
        assert!(!fb);
        assert!(close(&q, &[0.35, 0.35, 0.15, 0.15], 1e-12));

        let qa = [0.1, 0.2, 0.3, 0.4];
        let (q, _) = scale(&qa, &[0.4; 4]);
        assert!(close(&q, &qa, 1e-12));

        let (q, _) = scale(&[0.0, 1.0, 0.0], &[0.2, 0.5, 0.3]);
        assert_eq!(q, vec![0.0, 1.0, 0.0]);

        let (q, fb) = scale(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(fb);
        assert_eq!(q, vec![1.0, 0.0]);
    }

    #[test]
    fn gather_examples() {
        assert!(close(&gather(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1], 2), &[0.3, 0.7], 1e-12));
        assert!(close(&gather(&[1.0 / 6.0; 6], &[0, 0, 1, 1, 2, 2], 3), &[1.0 / 3.0; 3], 1e-12));
        assert_eq!(gather(&[0.0, 0.5, 0.5, 0.0], &[0, 1, 1, 2], 4), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn smooth_examples() {
        let z = [0.7, 0.3];
        let q = [0.3, 0.7];
        assert_eq!(smooth(&z, &q, 1.0), z.to_vec());
        assert_eq!(smooth(&z, &q, 0.0), q.to_vec());
        assert!(close(&smooth(&z, &q, 0.9), &[0.66, 0.34], 1e-12));
    }

    #[test]
    fn composed_example_matches_hand_chain() {
        let z = [0.7, 0.3];
        let qa = [0.25; 4];
        let labels = [0, 0, 1, 1];
        let r = regenerate_pixel(&z, &qa, &labels, &InteractionStrategy::default());
        assert!(close(&r.z_sc, &[0.7, 0.7, 0.3, 0.3], 0.0));
        assert!(close(&r.q_hat, &[0.35, 0.35, 0.15, 0.15], 1e-12));
        assert!(close(&r.q_ga, &[0.5, 0.5], 1e-15));
        assert!(close(&r.z_hat, &[0.9 * 0.7 + 0.1 * 0.5, 0.9 * 0.3 + 0.1 * 0.5], 1e-12));
    }

    #[test]
    fn phi_one_smoothing_is_baseline() {
        let z = DenseGrid::from_vec(1, 2, 2, vec![0.6, 0.4, 0.1, 0.9]).unwrap();
        let q = DenseGrid::from_vec(1, 2, 3, vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05]).unwrap();
        let s = InteractionStrategy {
            phi: 1.0,
            ..Default::default()
        };
        let out = regenerate(&z, &q, &[0, 1, 1], &s).unwrap();
        assert_eq!(out.z_hat, z);
    }

    #[test]
    fn agreeing_levels_stay_on_the_class() {
        let z = DenseGrid::from_vec(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let q = DenseGrid::from_vec(1, 1, 6, vec![0.0, 0.0, 0.4, 0.6, 0.0, 0.0]).unwrap();
        let labels = [0, 0, 1, 1, 2, 2];
        let out = regenerate(&z, &q, &labels, &InteractionStrategy::default()).unwrap();
        assert_eq!(out.z_hat.at(0), &[0.0, 1.0, 0.0]);
        for (k, &v) in out.q_hat.at(0).iter().enumerate() {
            assert_eq!(v > 0.0, labels[k] == 1);
        }
    }

    #[test]
    fn shape_errors() {
        let z = DenseGrid::zeros(2, 2, 2);
        let q = DenseGrid::zeros(2, 3, 4);
        assert!(regenerate(&z, &q, &[0, 0, 1, 1], &InteractionStrategy::default()).is_err());
        let q = DenseGrid::zeros(2, 2, 4);
        assert!(regenerate(&z, &q, &[0, 0, 1], &InteractionStrategy::default()).is_err());
        assert!(regenerate(&z, &q, &[0, 0, 1, 2], &InteractionStrategy::default()).is_err());
    }

    #[test]
    fn balanced_spread_gathers_back() {
        let z = [0.5, 0.2, 0.3];
        let labels = [0, 0, 1, 1, 2, 2];
        let s = spread(&scatter(&z, &labels), &labels, &[2, 2, 2]).unwrap();
        assert!(close(&gather(&s, &labels, 3), &z, 1e-12));
    }

    fn random_simplex(rng: &mut Rng, n: usize, sparsity: f64) -> Vec<f64> {
        loop {
            let raw: Vec<f64> = (0..n)
                .map(|_| if rng.uniform() < sparsity { 0.0 } else { rng.uniform() })
                .collect();
            let s: f64 = raw.iter().sum();
            if s > 0.0 {
                return raw.into_iter().map(|x| x / s).collect();
            }
        }
    }

    proptest! {
        #[test]
        fn regenerate_equals_composed_single_ops(seed in any::<u64>(), z_scaling in any::<bool>(), q_smoothing in any::<bool>(), phi in 0.0f64..=1.0) {
            let mut rng = Rng::new(seed);
            let c = 2 + rng.below(4);
            let k = c + rng.below(10);
            let mut labels: Vec<u8> = (0..k).map(|i| if i < c { i as u8 } else { rng.below(c) as u8 }).collect();
            labels.sort();
            let strategy = InteractionStrategy {
                z_mode: if z_scaling { RegenMode::Scaling } else { RegenMode::Smoothing },
                q_mode: if q_smoothing { RegenMode::Smoothing } else { RegenMode::Scaling },
                phi,
            };
            let (h, w) = (2, 3);
            let mut zd = Vec::new();
            let mut qd = Vec::new();
            for _ in 0..h * w {
                zd.extend(random_simplex(&mut rng, c, 0.3));
                qd.extend(random_simplex(&mut rng, k, 0.3));
            }
            let zm = DenseGrid::from_vec(h, w, c, zd).unwrap();
            let qm = DenseGrid::from_vec(h, w, k, qd).unwrap();
            let out = regenerate(&zm, &qm, &labels, &strategy).unwrap();
            for p in 0..h * w {
                let (z, q) = (zm.at(p), qm.at(p));
                let z_sc = scatter(z, &labels);
                let q_ga = gather(q, &labels, c);
                let q_hat = if q_smoothing {
                    let counts = slot_counts(&labels, c);
                    let s = spread(&z_sc, &labels, &counts).unwrap();
                    q.iter().zip(&s).map(|(a, b)| phi * a + (1.0 - phi) * b).collect()
                } else {
                    scale(q, &z_sc).0
                };
                let z_hat = if z_scaling { scale(z, &q_ga).0 } else { smooth(z, &q_ga, phi) };
                prop_assert_eq!(out.q_hat.at(p), q_hat.as_slice());
                prop_assert_eq!(out.z_hat.at(p), z_hat.as_slice());
                prop_assert!(is_on_simplex(out.q_hat.at(p), 1e-9));
                prop_assert!(is_on_simplex(out.z_hat.at(p), 1e-9));
            }
        }

        #[test]
        fn smoothing_stays_in_the_convex_hull(seed in any::<u64>(), phi in 0.0f64..=1.0) {
            let mut rng = Rng::new(seed);
            let c = 2 + rng.below(7);
            let z = random_simplex(&mut rng, c, 0.2);
            let q = random_simplex(&mut rng, c, 0.2);
            let zh = smooth(&z, &q, phi);
            for i in 0..c {
                prop_assert!(z[i].min(q[i]) <= zh[i] && zh[i] <= z[i].max(q[i]));
            }
            prop_assert!((zh.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
