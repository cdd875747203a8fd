//! Semantic and instance losses with gradients. Every loss is a mean over
//! pixels of a cross-entropy with the log floored at [`LOG_FLOOR`]; the
//! gradients are exact for that floored function (zero where the floor is
//! active). Pseudo-label targets are constants.

use crate::bank::InstanceBank;
use crate::discrimination::{predict_pixel, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::{argmax, DenseGrid, LabelMap};

enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

/// Loss `-sum_k y_k log max(q_k, floor)` for `q = softmax(s / t)`; writes
/// `scale * dloss/ds` into `out`.
fn ce_and_grad(q: &[f64], target: Target<'_>, inv_t: f64, scale: f64, out: &mut [f64]) -> f64 {
    // g_k = dloss/dq_k
    let mut loss = 0.0;
    out.fill(0.0);
    match target {
        Target::Hard(y) => {
            loss -= q[y].max(LOG_FLOOR).ln();
            if q[y] > LOG_FLOOR {
                out[y] = -1.0 / q[y];
            }
        }
        Target::Soft(y) => {
            for (k, (&qk, &yk)) in q.iter().zip(y).enumerate() {
                if yk != 0.0 {
                    loss -= yk * qk.max(LOG_FLOOR).ln();
                    if qk > LOG_FLOOR {
                        out[k] = -yk / qk;
                    }
                }
            }
        }
    }
    let qg: f64 = q.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
    for (o, &qk) in out.iter_mut().zip(q) {
        *o = scale * inv_t * qk * (*o - qg);
    }
    loss
}

fn check_extent(a: &DenseGrid, h: usize, w: usize, what: &str) -> Result<()> {
    if a.height() != h || a.width() != w {
        return Err(Error::Shape(format!(
            "{what} is {}x{}, expected {h}x{w}",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Mean source cross-entropy and its logit gradient.
pub fn source_loss_grad(probs: &DenseGrid, labels: &LabelMap) -> Result<(f64, DenseGrid)> {
    check_extent(probs, labels.height(), labels.width(), "probability map")?;
    let n = probs.pixel_count();
    let c = probs.channels();
    let mut grad = DenseGrid::zeros(probs.height(), probs.width(), c);
    let mut total = 0.0;
    for (p, &y) in labels.data().iter().enumerate() {
        if y as usize >= c {
            return Err(Error::Invalid(format!("label {y} >= {c} classes")));
        }
        total += ce_and_grad(probs.at(p), Target::Hard(y as usize), 1.0, 1.0 / n as f64, grad.at_mut(p));
    }
    Ok((total / n.max(1) as f64, grad))
}

pub fn source_loss(probs: &DenseGrid, labels: &LabelMap) -> Result<f64> {
    Ok(source_loss_grad(probs, labels)?.0)
}

/// Per-pixel argmax (lowest index on ties) and its probability.
pub fn target_pseudo(probs_weak: &DenseGrid) -> (LabelMap, Vec<f64>) {
    let (labels, conf): (Vec<u8>, Vec<f64>) = probs_weak
        .pixels()
        .map(|p| {
            let c = argmax(p);
            (c as u8, p[c])
        })
        .unzip();
    let map = LabelMap::from_vec(probs_weak.height(), probs_weak.width(), labels)
        .expect("extent matches");
    (map, conf)
}

/// Pixels whose largest entry in `conf_map` exceeds `tau`.
pub fn gate_mask(conf_map: &DenseGrid, tau: f64) -> Vec<bool> {
    conf_map
        .pixels()
        .map(|p| p.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) > tau)
        .collect()
}

/// Thresholded target loss. Gated pixels add
/// `-log probs_strong[argmax z_hat]` (or the soft cross-entropy against
/// `z_hat`); the sum is divided by the total pixel count.
pub fn target_loss_grad(
    probs_strong: &DenseGrid,
    z_hat: &DenseGrid,
    gate: &[bool],
    soft: bool,
) -> Result<(f64, DenseGrid)> {
    if !probs_strong.same_shape(z_hat) {
        return Err(Error::Shape("strong-view probabilities and pseudo-labels differ in shape".into()));
    }
    if gate.len() != z_hat.pixel_count() {
        return Err(Error::Shape("gate length differs from pixel count".into()));
    }
    let n = probs_strong.pixel_count();
    let mut grad = DenseGrid::zeros(z_hat.height(), z_hat.width(), z_hat.channels());
    let mut total = 0.0;
    for p in 0..n {
        if !gate[p] {
            continue;
        }
        let z = z_hat.at(p);
        let target = if soft { Target::Soft(z) } else { Target::Hard(argmax(z)) };
        total += ce_and_grad(probs_strong.at(p), target, 1.0, 1.0 / n as f64, grad.at_mut(p));
    }
    Ok((total / n.max(1) as f64, grad))
}

/// Hard-target loss gated on `z_hat` itself.
pub fn target_loss(probs_strong: &DenseGrid, z_hat: &DenseGrid, tau: f64) -> Result<f64> {
    Ok(target_loss_grad(probs_strong, z_hat, &gate_mask(z_hat, tau), false)?.0)
}

/// Instance loss of strong-view embeddings against `q_hat`, with the
/// strong-view instance predictions and the gradient with respect to the
/// embeddings (bank rows held constant).
pub fn instance_loss_grad(
    features: &DenseGrid,
    bank: &InstanceBank,
    tp: f64,
    q_hat: &DenseGrid,
) -> Result<(f64, DenseGrid, DenseGrid)> {
    if !(tp > 0.0) {
        return Err(Error::BadTemperature(tp));
    }
    let k = bank.size();
    if q_hat.channels() != k || !q_hat.same_extent(features) || features.channels() != bank.dim() {
        return Err(Error::Shape("instance targets, features and bank disagree".into()));
    }
    let n = features.pixel_count();
    let d = bank.dim();
    let mut q_strong = DenseGrid::zeros(features.height(), features.width(), k);
    let mut de = DenseGrid::zeros(features.height(), features.width(), d);
    let mut ds = vec![0.0; k];
    let mut total = 0.0;
    for p in 0..n {
        let e = features.at(p);
        let q = q_strong.at_mut(p);
        let live = predict_pixel(e, bank, tp, q);
        total += ce_and_grad(q, Target::Soft(q_hat.at(p)), 1.0 / tp, 1.0 / n as f64, &mut ds);
        if !live {
            continue;
        }
        // s_k = <e, b_k> / |e|
        let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        let out = de.at_mut(p);
        for (slot, &g) in ds.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let b = bank.row(slot);
            let s: f64 = e.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / en;
            for ((o, &bi), &ei) in out.iter_mut().zip(b).zip(e) {
                *o += g * (bi - s * ei / en) / en;
            }
        }
    }
    Ok((total / n.max(1) as f64, q_strong, de))
}

pub fn overall_loss(l_src: f64, l_tgt: f64, l_ins: f64, lambda_ins: f64) -> f64 {
    l_src + l_tgt + lambda_ins * l_ins
}
