//! Training objectives.
//!
//! Every loss is a scalar tape value so it can be differentiated. The total
//! objective is `L_base + L_fine + α·L_bd + β·L_ske`, where the fine parsing
//! term uses online hard example mining.

use crate::autodiff::{pixel_ce_values, Tape, Var, IGNORE};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// Per-pixel class ids for a batch, `N_b × H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
    num_classes: usize,
    ignore_index: u8,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>, num_classes: usize) -> Result<Self> {
        Self::with_ignore(shape, data, num_classes, DEFAULT_IGNORE_INDEX)
    }

    pub fn with_ignore(shape: [usize; 3], data: Vec<u8>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(dim_err(format!("label shape {shape:?} needs {} ids, got {}", shape.iter().product::<usize>(), data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&v| v != ignore_index && v as usize >= num_classes) {
            return Err(Error::Data(format!("label id {bad} out of range for {num_classes} classes")));
        }
        Ok(LabelMap { shape, data, num_classes, ignore_index })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn is_ignored(&self, v: u8) -> bool {
        v == self.ignore_index
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Targets in the tape's convention, with [`IGNORE`] for ignored pixels.
    pub fn targets(&self) -> Vec<usize> {
        self.data.iter().map(|&v| if self.is_ignored(v) { IGNORE } else { v as usize }).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| !self.is_ignored(v)).count()
    }

    /// Stacks single-image maps of equal extent into a batch.
    pub fn stack(maps: &[LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| dim_err("cannot stack zero label maps"))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::with_capacity(maps.len() * h * w);
        let mut n = 0;
        for m in maps {
            if m.shape[1..] != first.shape[1..] || m.num_classes != first.num_classes {
                return Err(dim_err(format!("label map {:?} does not stack with {:?}", m.shape, first.shape)));
            }
            data.extend_from_slice(&m.data);
            n += m.shape[0];
        }
        Self::with_ignore([n, h, w], data, first.num_classes, first.ignore_index)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| v as f32).collect()).expect("shape checked")
    }

    pub fn from_tensor(t: &Tensor<f32>, num_classes: usize) -> Result<Self> {
        let shape = match t.shape() {
            [h, w] => [1, *h, *w],
            [n, h, w] => [*n, *h, *w],
            s => return Err(dim_err(format!("label tensor must be rank 2 or 3, got {s:?}"))),
        };
        let mut data = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
                return Err(Error::Data(format!("label value {v} is not a class id")));
            }
            data.push(v as u8);
        }
        Self::new(shape, data, num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundaryWeighting {
    /// Class weight `valid / (2 · count_c)`, computed per batch.
    InverseFrequency,
    /// Background weight 1, boundary weight `pos_weight`.
    Fixed { pos_weight: f64 },
}

/// Loss balancing and hard-example-mining knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub ohem_keep_fraction: f64,
    pub ohem_min_kept: usize,
    pub boundary_weighting: BoundaryWeighting,
    /// Positive weight used when inverse-frequency weighting has no boundary pixels.
    pub fallback_pos_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 40.0,
            ohem_keep_fraction: 0.25,
            ohem_min_kept: 64,
            boundary_weighting: BoundaryWeighting::InverseFrequency,
            fallback_pos_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if !(self.ohem_keep_fraction > 0.0 && self.ohem_keep_fraction <= 1.0) {
            return bad("ohem_keep_fraction must lie in (0, 1]");
        }
        if self.ohem_min_kept < 1 {
            return bad("ohem_min_kept must be at least 1");
        }
        if let BoundaryWeighting::Fixed { pos_weight } = self.boundary_weighting {
            if !(pos_weight > 0.0) {
                return bad("boundary positive weight must be positive");
            }
        }
        Ok(())
    }
}

fn check_logits<T: Scalar>(tape: &Tape<T>, logits: Var, target: &LabelMap) -> Result<()> {
    let (n, k, h, w) = tape.value(logits).dims4()?;
    if [n, h, w] != target.shape() {
        return Err(dim_err(format!("logits {:?} do not match labels {:?}", tape.shape(logits), target.shape())));
    }
    if k != target.num_classes() {
        return Err(dim_err(format!("{k} logit channels for {} classes", target.num_classes())));
    }
    Ok(())
}

fn uniform_weights<T: Scalar>(target: &LabelMap) -> Vec<T> {
    let valid = target.valid_count();
    let w = if valid == 0 { T::zero() } else { T::one() / T::from_f64(valid as f64) };
    target.data().iter().map(|&v| if target.is_ignored(v) { T::zero() } else { w }).collect()
}

/// Mean over non-ignored pixels of `−log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &LabelMap) -> Result<Var> {
    check_logits(tape, logits, target)?;
    let weights = uniform_weights(target);
    tape.pixel_cross_entropy(logits, &target.targets(), &weights)
}

/// Number of hardest pixels OHEM must retain out of `valid`.
pub fn ohem_quota(valid: usize, w: &LossWeights) -> usize {
    let by_fraction = (w.ohem_keep_fraction * valid as f64).ceil() as usize;
    by_fraction.max(w.ohem_min_kept).min(valid)
}

/// Cross entropy averaged over the hardest pixels only.
///
/// Keeps every pixel whose loss is at least the quota-th largest loss, so
/// ties at the threshold are all kept. Discarded pixels get zero gradient.
pub fn ohem_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &LabelMap, w: &LossWeights) -> Result<Var> {
    check_logits(tape, logits, target)?;
    let targets = target.targets();
    let losses = pixel_ce_values(tape.value(logits), &targets)?;
    let mut valid: Vec<T> = losses.iter().zip(&targets).filter(|(_, &t)| t != IGNORE).map(|(&l, _)| l).collect();
    let quota = ohem_quota(valid.len(), w);
    if quota == 0 {
        return tape.pixel_cross_entropy(logits, &targets, &vec![T::zero(); targets.len()]);
    }
    valid.sort_by(|a, b| b.partial_cmp(a).expect("finite losses"));
    let threshold = valid[quota - 1];
    let keep: Vec<bool> = losses.iter().zip(&targets).map(|(&l, &t)| t != IGNORE && l >= threshold).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let share = T::one() / T::from_f64(kept as f64);
    let weights: Vec<T> = keep.iter().map(|&k| if k { share } else { T::zero() }).collect();
    tape.pixel_cross_entropy(logits, &targets, &weights)
}

/// Count of pixels OHEM keeps for the given logits, for diagnostics and tests.
pub fn ohem_kept_count<T: Scalar>(logits: &Tensor<T>, target: &LabelMap, w: &LossWeights) -> Result<usize> {
    let targets = target.targets();
    let losses = pixel_ce_values(logits, &targets)?;
    let mut valid: Vec<T> = losses.iter().zip(&targets).filter(|(_, &t)| t != IGNORE).map(|(&l, _)| l).collect();
    let quota = ohem_quota(valid.len(), w);
    if quota == 0 {
        return Ok(0);
    }
    valid.sort_by(|a, b| b.partial_cmp(a).expect("finite losses"));
    let threshold = valid[quota - 1];
    Ok(valid.iter().filter(|&&l| l >= threshold).count())
}

/// Per-class weights `[background, boundary]` for a batch of boundary targets.
pub fn boundary_class_weights(target: &LabelMap, w: &LossWeights) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for &v in target.data() {
        if !target.is_ignored(v) {
            counts[v as usize] += 1;
        }
    }
    let valid = counts[0] + counts[1];
    match w.boundary_weighting {
        BoundaryWeighting::InverseFrequency if counts[1] > 0 => {
            let inv = |c: usize| if c == 0 { 0.0 } else { valid as f64 / (2.0 * c as f64) };
            [inv(counts[0]), inv(counts[1])]
        }
        BoundaryWeighting::InverseFrequency => [1.0, w.fallback_pos_weight],
        BoundaryWeighting::Fixed { pos_weight } => [1.0, pos_weight],
    }
}

/// Class-weighted two-way cross entropy, normalized by the total weight.
pub fn boundary_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &LabelMap, w: &LossWeights) -> Result<Var> {
    if target.num_classes() != 2 {
        return Err(dim_err("boundary targets must have two classes"));
    }
    check_logits(tape, logits, target)?;
    let cw = boundary_class_weights(target, w);
    let mut weights: Vec<f64> = target
        .data()
        .iter()
        .map(|&v| if target.is_ignored(v) { 0.0 } else { cw[v as usize] })
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|x| *x /= total);
    }
    let weights: Vec<T> = weights.into_iter().map(T::from_f64).collect();
    tape.pixel_cross_entropy(logits, &target.targets(), &weights)
}

/// Mean squared error over all elements.
pub fn skeleton_mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let diff = tape.sub(pred, gt)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Network outputs entering the objective, already at target resolution.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub base_logits: Var,
    pub fine_logits: Var,
    pub boundary_logits: Option<Var>,
    pub skeleton: Option<Var>,
}

pub struct LossTargets<'a> {
    pub labels: &'a LabelMap,
    pub boundary: &'a LabelMap,
    /// Ground-truth heatmaps recorded on the tape as a constant.
    pub heatmaps: Var,
}

/// The total objective and its components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub base: Var,
    pub fine: Var,
    pub boundary: Option<Var>,
    pub skeleton: Option<Var>,
}

/// Scalar values of a [`LossBreakdown`]; absent terms are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub base: f64,
    pub fine: f64,
    pub boundary: f64,
    pub skeleton: f64,
}

impl LossBreakdown {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().to_f64();
        LossValues {
            total: v(self.total),
            base: v(self.base),
            fine: v(self.fine),
            boundary: self.boundary.map_or(0.0, v),
            skeleton: self.skeleton.map_or(0.0, v),
        }
    }
}

/// `L = L_base + L_fine + α·L_bd + β·L_ske`; branch terms are skipped when
/// their predictions are absent.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &LossInputs,
    targets: &LossTargets<'_>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let base = cross_entropy(tape, inputs.base_logits, targets.labels)?;
    let fine = ohem_cross_entropy(tape, inputs.fine_logits, targets.labels, w)?;
    let mut total = tape.add(base, fine)?;
    let boundary = match inputs.boundary_logits {
        Some(b) => {
            let l = boundary_ce(tape, b, targets.boundary, w)?;
            let scaled = tape.scale(l, T::from_f64(w.alpha));
            total = tape.add(total, scaled)?;
            Some(l)
        }
        None => None,
    };
    let skeleton = match inputs.skeleton {
        Some(s) => {
            let l = skeleton_mse(tape, s, targets.heatmaps)?;
            let scaled = tape.scale(l, T::from_f64(w.beta));
            total = tape.add(total, scaled)?;
            Some(l)
        }
        None => None,
    };
    Ok(LossBreakdown { total, base, fine, boundary, skeleton })
}
