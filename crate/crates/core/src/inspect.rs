//! Affinity dumps for a single sample.

use std::path::Path;

use crate::acet;
use crate::autodiff::{Tape, UpsampleMode};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::argmax_channels;
use crate::network::Network;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Max deviation from 1 tolerated in dumped row or column sums.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-6;

/// Tensors written by [`inspect_affinity`].
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityDump {
    /// `[N, C]`, rows sum to 1.
    pub channel: Option<Tensor<f32>>,
    /// `[HW, HW]`, columns sum to 1.
    pub spatial: Option<Tensor<f32>>,
    /// Argmax labels `[H, W]` of the fine and base heads at image resolution.
    pub fine_pred: Tensor<f32>,
    pub base_pred: Tensor<f32>,
}

/// Largest `|Σ − 1|` over rows (`axis = 1`) or columns (`axis = 0`) of a
/// rank-2 tensor, summed in f64.
pub fn stochastic_deviation(t: &Tensor<f32>, axis: usize) -> f64 {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let (outer, inner) = if axis == 1 { (r, c) } else { (c, r) };
    (0..outer)
        .map(|o| {
            let s: f64 = (0..inner).map(|i| if axis == 1 { d[o * c + i] } else { d[i * c + o] } as f64).sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn check(t: &Tensor<f32>, axis: usize, what: &str) -> Result<()> {
    let dev = stochastic_deviation(t, axis);
    if !(dev <= STOCHASTIC_TOLERANCE) {
        return Err(Error::Integrity(format!("{what} sums deviate from 1 by {dev:e}")));
    }
    Ok(())
}

/// Runs one sample in f64, checks stochasticity, and writes `A.acet`,
/// `G.acet`, `fine_pred.acet` and `base_pred.acet` under `out_dir`.
/// Matrices of disabled modules are skipped.
pub fn inspect_affinity(net: &Network, params: &ParamStore, sample: &Sample, out_dir: &Path) -> Result<AffinityDump> {
    net.check_params(params)?;
    let (h, w) = (sample.height(), sample.width());
    let mut tape = Tape::<f64>::new();
    let vars = params.bind(&mut tape);
    let image = tape.constant(sample.image.cast::<f64>().reshaped(&[1, 3, h, w])?);
    let out = net.forward(&mut tape, &vars, image)?;

    let channel = match out.channel_affinity {
        Some(a) => {
            let t = tape.value(a.matrix).cast::<f32>().reshaped(&[a.n, a.c])?;
            check(&t, 1, "channel affinity row")?;
            Some(t)
        }
        None => None,
    };
    let spatial = match out.spatial_affinity {
        Some(g) => {
            let t = tape.value(g.matrix).cast::<f32>().reshaped(&[g.positions, g.positions])?;
            check(&t, 0, "spatial affinity column")?;
            Some(t)
        }
        None => None,
    };
    let mut label_map = |v| -> Result<Tensor<f32>> {
        let up = tape.upsample(v, (h, w), UpsampleMode::Bilinear)?;
        argmax_channels(tape.value(up))?.to_tensor().reshaped(&[h, w])
    };
    let fine_pred = label_map(out.fine_logits)?;
    let base_pred = label_map(out.base_logits)?;

    std::fs::create_dir_all(out_dir)?;
    if let Some(a) = &channel {
        acet::write(&out_dir.join("A.acet"), a)?;
    }
    if let Some(g) = &spatial {
        acet::write(&out_dir.join("G.acet"), g)?;
    }
    acet::write(&out_dir.join("fine_pred.acet"), &fine_pred)?;
    acet::write(&out_dir.join("base_pred.acet"), &base_pred)?;
    Ok(AffinityDump { channel, spatial, fine_pred, base_pred })
}
