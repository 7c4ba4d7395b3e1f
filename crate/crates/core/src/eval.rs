//! Split evaluation: fine logits resized to label resolution, argmax, and
//! accumulated confusion counts.

use crate::autodiff::{Tape, UpsampleMode};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::metrics::{ConfusionMatrix, SegmentationMetrics};
use crate::network::Network;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 10;

/// Per-pixel argmax over channels of a `[B, K, H, W]` tensor. Ties resolve to
/// the lowest class id.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (n, k, h, w) = logits.dims4()?;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for p in 0..h * w {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * h * w + p] > d[(b * k + best) * h * w + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new([n, h, w], out, k)
}

/// Label predictions for a batch of samples at label resolution.
pub fn predict(net: &Network, params: &ParamStore, samples: &[&Sample]) -> Result<LabelMap> {
    let first = samples.first().ok_or_else(|| Error::Data("nothing to predict".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let mut tape = Tape::<f32>::new();
    let vars = params.bind(&mut tape);
    let image = tape.constant(Tensor::new(&[samples.len(), 3, h, w], data)?);
    let out = net.forward(&mut tape, &vars, image)?;
    let logits = tape.upsample(out.fine_logits, (h, w), UpsampleMode::Bilinear)?;
    argmax_channels(tape.value(logits))
}

/// Evaluates every sample; with `oracle_inject` the ground truth stands in
/// for the prediction. Counts are merged in sample order.
pub fn evaluate(
    net: &Network,
    params: &ParamStore,
    samples: &[Sample],
    oracle_inject: bool,
) -> Result<(SegmentationMetrics, ConfusionMatrix)> {
    net.check_params(params)?;
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let gt = LabelMap::stack(&chunk.iter().map(|s| s.labels.clone()).collect::<Vec<_>>())?;
        let pred = if oracle_inject { gt.clone() } else { predict(net, params, &refs)? };
        cm.add(&pred, &gt)?;
    }
    Ok((cm.metrics(), cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::<f32>::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap().data(), &[0, 1]);
    }
}
