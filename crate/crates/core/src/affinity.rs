//! Skeleton-guided channel affinity (local compression) and boundary-guided
//! spatial affinity (global expansion).
//!
//! Shapes, per batch element:
//! * channel affinity `A ∈ R^{N×C}`: row `i` is a softmax over parsing
//!   channels of `M^i · P̂^j`, where `M` is the GC-encoded skeleton feature
//!   flattened to `N×HW` and `P̂` the encoded parsing feature as `HW×C`;
//! * spatial affinity `G ∈ R^{HW×HW}`: column `i` is a softmax over source
//!   positions `j` of `P_e^j · E_e^i`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{self, BoundParams, ConvParams, ConvSpec, GcParams, GcSpec, ParamStore};
use crate::tensor::Scalar;

/// Largest `H·W` for which the dense spatial affinity may be materialized.
pub const MAX_AFFINITY_POSITIONS: usize = 1024;

/// Row-stochastic `[B, N, C]` channel affinity.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAffinity {
    pub matrix: Var,
    pub n: usize,
    pub c: usize,
}

/// Column-stochastic `[B, HW, HW]` spatial affinity.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAffinity {
    pub matrix: Var,
    pub d: usize,
    pub positions: usize,
}

/// Flattens `[B, C, H, W]` to `[B, C, H·W]`.
fn flatten_spatial<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    tape.reshape(x, &[b, c, h * w])
}

/// Builds `A` from already-encoded maps `m: [B, N, HW]` and `p_hat: [B, HW, C]`.
pub fn channel_affinity_from_maps<T: Scalar>(tape: &mut Tape<T>, m: Var, p_hat: Var) -> Result<ChannelAffinity> {
    let (ms, ps) = (tape.shape(m).to_vec(), tape.shape(p_hat).to_vec());
    if ms.len() != 3 || ps.len() != 3 || ms[0] != ps[0] || ms[2] != ps[1] {
        return Err(dim_err(format!("channel affinity: M {ms:?} incompatible with P̂ {ps:?}")));
    }
    let logits = tape.matmul(m, p_hat)?;
    let matrix = tape.softmax(logits, 2)?;
    Ok(ChannelAffinity { matrix, n: ms[1], c: ps[2] })
}

/// Channel affinity between a skeleton feature `s` and a parsing feature `p`.
///
/// `gc` reduces `s` from `C` to `N` channels; `enc` is a `1×1` `C→C` encoder.
pub fn lcm_affinity<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    p: Var,
    gc: &GcParams,
    enc: &ConvParams,
) -> Result<ChannelAffinity> {
    let (sb, _, sh, sw) = tape.value(s).dims4()?;
    let (pb, _, ph, pw) = tape.value(p).dims4()?;
    if (sb, sh, sw) != (pb, ph, pw) {
        return Err(dim_err(format!(
            "skeleton feature {:?} and parsing feature {:?} differ spatially",
            tape.shape(s),
            tape.shape(p)
        )));
    }
    let m = nn::gc_block(tape, s, gc)?;
    let m = flatten_spatial(tape, m)?;
    let pe = nn::conv2d(tape, p, enc)?;
    let pe = flatten_spatial(tape, pe)?;
    let p_hat = tape.transpose(pe)?;
    channel_affinity_from_maps(tape, m, p_hat)
}

/// Residual channel rescale: output channel `c` is `(1 + mean_i A[i,c]) · p_c`.
pub fn lcm_apply<T: Scalar>(tape: &mut Tape<T>, p: Var, a: &ChannelAffinity) -> Result<Var> {
    let (b, c, _, _) = tape.value(p).dims4()?;
    if tape.shape(a.matrix) != [b, a.n, c] {
        return Err(dim_err(format!(
            "affinity {:?} does not match parsing feature {:?}",
            tape.shape(a.matrix),
            tape.shape(p)
        )));
    }
    let column_mean = tape.mean_along(a.matrix, 1)?;
    let scale = tape.add_scalar(column_mean, T::one());
    tape.mul_channels(p, scale)
}

/// Builds `G` from encodings `pe, ee: [B, D, HW]`.
pub fn spatial_affinity_from_encodings<T: Scalar>(tape: &mut Tape<T>, pe: Var, ee: Var) -> Result<SpatialAffinity> {
    let (ps, es) = (tape.shape(pe).to_vec(), tape.shape(ee).to_vec());
    if ps.len() != 3 || ps != es {
        return Err(dim_err(format!("spatial affinity: encodings {ps:?} and {es:?} differ")));
    }
    if ps[2] > MAX_AFFINITY_POSITIONS {
        return Err(config_err(format!(
            "{} positions exceed the dense affinity cap of {MAX_AFFINITY_POSITIONS}",
            ps[2]
        )));
    }
    let pt = tape.transpose(pe)?;
    // logits[j, i] = P_e^j · E_e^i, normalized over j
    let logits = tape.matmul(pt, ee)?;
    let matrix = tape.softmax(logits, 1)?;
    Ok(SpatialAffinity { matrix, d: ps[1], positions: ps[2] })
}

/// Spatial affinity between parsing feature `p` and boundary feature `e`.
pub fn gem_affinity<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    e: Var,
    enc_p: &ConvParams,
    enc_e: &ConvParams,
) -> Result<SpatialAffinity> {
    if tape.shape(p) != tape.shape(e) {
        return Err(dim_err(format!(
            "parsing feature {:?} and boundary feature {:?} differ",
            tape.shape(p),
            tape.shape(e)
        )));
    }
    let (_, _, h, w) = tape.value(p).dims4()?;
    if h * w > MAX_AFFINITY_POSITIONS {
        return Err(config_err(format!("{h}x{w} map exceeds the dense affinity cap")));
    }
    let pe = nn::conv2d(tape, p, enc_p)?;
    let pe = flatten_spatial(tape, pe)?;
    let ee = nn::conv2d(tape, e, enc_e)?;
    let ee = flatten_spatial(tape, ee)?;
    spatial_affinity_from_encodings(tape, pe, ee)
}

/// `R = K · G` for `k: [B, D, HW]`.
pub fn spatial_mix<T: Scalar>(tape: &mut Tape<T>, k: Var, g: &SpatialAffinity) -> Result<Var> {
    tape.matmul(k, g.matrix)
}

/// Mixes an encoding of `p` across positions with `G`, then fuses it back
/// with `p`: `X = fuse([P, R])`.
pub fn gem_apply<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    g: &SpatialAffinity,
    enc_k: &ConvParams,
    fuse: &ConvParams,
) -> Result<Var> {
    let (b, _, h, w) = tape.value(p).dims4()?;
    if g.positions != h * w {
        return Err(dim_err(format!("affinity over {} positions applied to a {h}x{w} map", g.positions)));
    }
    let k = nn::conv2d(tape, p, enc_k)?;
    let d = tape.shape(k)[1];
    let k = flatten_spatial(tape, k)?;
    let r = spatial_mix(tape, k, g)?;
    let r = tape.reshape(r, &[b, d, h, w])?;
    let cat = tape.concat_channels(&[p, r])?;
    nn::conv2d(tape, cat, fuse)
}

/// Parameter layout of the local compression module.
#[derive(Clone, Debug, PartialEq)]
pub struct LcmSpec {
    pub gc: GcSpec,
    pub enc: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct LcmParams {
    pub gc: GcParams,
    pub enc: ConvParams,
}

impl LcmSpec {
    pub fn new(prefix: &str, channels: usize, n: usize, k: usize) -> Result<Self> {
        Ok(LcmSpec {
            gc: GcSpec::new(format!("{prefix}.gc"), channels, n, k)?,
            enc: ConvSpec::pointwise(format!("{prefix}.enc"), channels, channels),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.gc.init(store, rng);
        self.enc.init(store, rng);
    }

    pub fn bind(&self, vars: &BoundParams) -> Result<LcmParams> {
        Ok(LcmParams { gc: self.gc.bind(vars)?, enc: self.enc.bind(vars)? })
    }
}

/// Local compression: returns the rescaled parsing feature and `A`.
pub fn lcm<T: Scalar>(tape: &mut Tape<T>, s: Var, p: Var, params: &LcmParams) -> Result<(Var, ChannelAffinity)> {
    let a = lcm_affinity(tape, s, p, &params.gc, &params.enc)?;
    Ok((lcm_apply(tape, p, &a)?, a))
}

/// Parameter layout of the global expansion module.
#[derive(Clone, Debug, PartialEq)]
pub struct GemSpec {
    pub enc_p: ConvSpec,
    pub enc_e: ConvSpec,
    pub enc_k: ConvSpec,
    pub fuse: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct GemParams {
    pub enc_p: ConvParams,
    pub enc_e: ConvParams,
    pub enc_k: ConvParams,
    pub fuse: ConvParams,
}

impl GemSpec {
    pub fn new(prefix: &str, channels: usize, d: usize) -> Self {
        GemSpec {
            enc_p: ConvSpec::pointwise(format!("{prefix}.enc_p"), channels, d),
            enc_e: ConvSpec::pointwise(format!("{prefix}.enc_e"), channels, d),
            enc_k: ConvSpec::pointwise(format!("{prefix}.enc_k"), channels, d),
            fuse: ConvSpec::pointwise(format!("{prefix}.fuse"), channels + d, channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in [&self.enc_p, &self.enc_e, &self.enc_k, &self.fuse] {
            c.init(store, rng);
        }
    }

    pub fn bind(&self, vars: &BoundParams) -> Result<GemParams> {
        Ok(GemParams {
            enc_p: self.enc_p.bind(vars)?,
            enc_e: self.enc_e.bind(vars)?,
            enc_k: self.enc_k.bind(vars)?,
            fuse: self.fuse.bind(vars)?,
        })
    }
}

/// Global expansion: returns `X` and `G`.
pub fn gem<T: Scalar>(tape: &mut Tape<T>, p: Var, e: Var, params: &GemParams) -> Result<(Var, SpatialAffinity)> {
    let g = gem_affinity(tape, p, e, &params.enc_p, &params.enc_e)?;
    Ok((gem_apply(tape, p, &g, &params.enc_k, &params.fuse)?, g))
}
