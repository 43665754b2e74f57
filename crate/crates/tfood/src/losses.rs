//! Retrieval loss stack: batch-all triplet loss with active-triplet (Adamine)
//! weighting, the semantic class-based variant, dynamic margin schedules
//! (IncMargin, AdaMargin) and total-loss composition.
//!
//! Distances are cosine distances d(x, y) = 1 - x . y on unit-norm rows, so a
//! triplet hinge [d_ap + m - d_an]_+ equals [s_an - s_ap + m]_+ on
//! similarities.

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MarginKind {
    Fixed,
    Inc,
    Ada,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginPolicy {
    pub kind: MarginKind,
    pub alpha: f64,
    pub alpha_inc_start: f64,
    pub alpha_inc_step: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl MarginPolicy {
    pub fn fixed() -> Self {
        Self::with_kind(MarginKind::Fixed)
    }

    pub fn inc() -> Self {
        Self::with_kind(MarginKind::Inc)
    }

    pub fn ada() -> Self {
        Self::with_kind(MarginKind::Ada)
    }

    pub fn with_kind(kind: MarginKind) -> Self {
        MarginPolicy {
            kind,
            alpha: 0.3,
            alpha_inc_start: 0.05,
            alpha_inc_step: 0.005,
            clamp_min: 0.05,
            clamp_max: 0.3,
        }
    }
}

/// Effective margin for an epoch. `delta` is the active-triplet count from a
/// pre-pass at alpha = 0.3; it only matters for the `Ada` policy.
pub fn margin_at(policy: &MarginPolicy, epoch: usize, delta: usize) -> f64 {
    match policy.kind {
        MarginKind::Fixed => policy.alpha,
        MarginKind::Inc => {
            // Integer thousandths so scheduled values are exact.
            let start = (policy.alpha_inc_start * 1000.0).round() as i64;
            let step = (policy.alpha_inc_step * 1000.0).round() as i64;
            let lo = (policy.clamp_min * 1000.0).round() as i64;
            let hi = (policy.clamp_max * 1000.0).round() as i64;
            let milli = (start + epoch as i64 * step).clamp(lo, hi);
            milli as f64 / 1000.0
        }
        MarginKind::Ada => {
            let raw = policy.alpha / delta.max(1) as f64;
            raw.clamp(policy.clamp_min, policy.clamp_max)
        }
    }
}

/// Counts of triplets with strictly positive hinge, per anchor direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TripletBatchStats {
    pub delta_r: usize,
    pub delta_v: usize,
}

/// Single triplet hinge [d_ap + margin - d_an]_+ on precomputed distances.
pub fn triplet(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap + margin - d_an).max(0.0)
}

fn check_aligned(e_r: &Tensor, e_v: &Tensor) -> Result<usize> {
    if e_r.shape() != e_v.shape() || e_r.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "triplet_loss",
            lhs: e_r.shape().to_vec(),
            rhs: e_v.shape().to_vec(),
        });
    }
    let b = e_r.shape()[0];
    if b < 2 {
        return Err(TensorError::InvalidInput(
            "triplet loss: batch size must be at least 2".to_string(),
        ));
    }
    Ok(b)
}

/// One batch-all direction over the similarity matrix: hinge terms
/// s[neg] - s[pos] + margin for the given flat index pairs, summed and
/// divided by max(delta, 1). Returns (loss, delta).
fn direction_loss(
    sim: &Tensor,
    pos_idx: &[usize],
    neg_idx: &[usize],
    margin: f64,
) -> Result<(Tensor, usize)> {
    debug_assert_eq!(pos_idx.len(), neg_idx.len());
    if pos_idx.is_empty() {
        return Ok((Tensor::scalar(0.0), 0));
    }
    let sp = sim.gather(pos_idx)?;
    let sn = sim.gather(neg_idx)?;
    let hinge = sn.sub(&sp)?.add_scalar(margin).relu();
    let delta = hinge.data().iter().filter(|v| **v > 0.0).count();
    let loss = hinge.sum_all().scale(1.0 / delta.max(1) as f64);
    Ok((loss, delta))
}

/// Instance (image-text contrastive) loss: every sample anchors against its
/// paired sample from the other modality, with all other batch samples as
/// negatives. Each direction's summed hinge is divided by its active-triplet
/// count.
pub fn itc_loss(e_r: &Tensor, e_v: &Tensor, margin: f64) -> Result<(Tensor, TripletBatchStats)> {
    let b = check_aligned(e_r, e_v)?;
    let sim = e_r.matmul(&e_v.transpose()?)?; // sim[i*b + j] = e_r[i] . e_v[j]
    let mut pos_r = Vec::with_capacity(b * (b - 1));
    let mut neg_r = Vec::with_capacity(b * (b - 1));
    let mut pos_v = Vec::with_capacity(b * (b - 1));
    let mut neg_v = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if j == i {
                continue;
            }
            // recipe anchor i: positive image i, negative image j
            pos_r.push(i * b + i);
            neg_r.push(i * b + j);
            // image anchor i: positive recipe i, negative recipe j
            pos_v.push(i * b + i);
            neg_v.push(j * b + i);
        }
    }
    let (loss_r, delta_r) = direction_loss(&sim, &pos_r, &neg_r, margin)?;
    let (loss_v, delta_v) = direction_loss(&sim, &pos_v, &neg_v, margin)?;
    Ok((
        loss_r.add(&loss_v)?,
        TripletBatchStats { delta_r, delta_v },
    ))
}

/// Semantic triplet loss: positives share the anchor's class, negatives carry
/// a different class; rows without a class label do not participate.
pub fn semantic_loss(
    e_r: &Tensor,
    e_v: &Tensor,
    classes: &[Option<usize>],
    margin: f64,
) -> Result<(Tensor, TripletBatchStats)> {
    let b = check_aligned(e_r, e_v)?;
    assert_eq!(classes.len(), b, "one class slot per batch row");
    let sim = e_r.matmul(&e_v.transpose()?)?;
    let mut pos_r = Vec::new();
    let mut neg_r = Vec::new();
    let mut pos_v = Vec::new();
    let mut neg_v = Vec::new();
    for i in 0..b {
        let Some(ci) = classes[i] else { continue };
        for p in 0..b {
            if p == i || classes[p] != Some(ci) {
                continue;
            }
            for n in 0..b {
                match classes[n] {
                    Some(cn) if cn != ci => {}
                    _ => continue,
                }
                // recipe anchor i, image positive p, image negative n
                pos_r.push(i * b + p);
                neg_r.push(i * b + n);
                // image anchor i, recipe positive p, recipe negative n
                pos_v.push(p * b + i);
                neg_v.push(n * b + i);
            }
        }
    }
    let (loss_r, delta_r) = direction_loss(&sim, &pos_r, &neg_r, margin)?;
    let (loss_v, delta_v) = direction_loss(&sim, &pos_v, &neg_v, margin)?;
    Ok((
        loss_r.add(&loss_v)?,
        TripletBatchStats { delta_r, delta_v },
    ))
}

/// L = L_itc + lambda_sem * L_sem + lambda_itm * L_itm.
pub fn total_loss(
    itc: &Tensor,
    sem: &Tensor,
    itm: &Tensor,
    lambda_sem: f64,
    lambda_itm: f64,
) -> Result<Tensor> {
    itc.add(&sem.scale(lambda_sem))?.add(&itm.scale(lambda_itm))
}

/// Active-triplet count at a given margin from forward similarity data only
/// (the AdaMargin pre-pass). Returns delta_r + delta_v.
pub fn active_triplet_count(e_r: &Tensor, e_v: &Tensor, margin: f64) -> Result<usize> {
    let b = check_aligned(e_r, e_v)?;
    let d = e_r.shape()[1];
    let r = e_r.data();
    let v = e_v.data();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut count = 0;
    for i in 0..b {
        let s_pos = dot(&r[i * d..(i + 1) * d], &v[i * d..(i + 1) * d]);
        for j in 0..b {
            if j == i {
                continue;
            }
            let s_rn = dot(&r[i * d..(i + 1) * d], &v[j * d..(j + 1) * d]);
            if s_rn - s_pos + margin > 0.0 {
                count += 1;
            }
            let s_vn = dot(&v[i * d..(i + 1) * d], &r[j * d..(j + 1) * d]);
            if s_vn - s_pos + margin > 0.0 {
                count += 1;
            }
        }
    }
    Ok(count)
}
