//! The toy parsing network: a strided residual CNN backbone, a pyramid-pooling parsing
//! head, optional skeleton and boundary branches, and the compression and
//! expansion modules feeding a fusion head.
//!
//! With both modules disabled the side branches are not built and the
//! fusion head consumes the parsing feature directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::{gem, lcm, ChannelAffinity, GemSpec, LcmSpec, SpatialAffinity};
use crate::autodiff::{Tape, UpsampleMode, Var};
use crate::config::NetworkConfig;
use crate::error::{config_err, Result};
use crate::kernels::ConvGeometry;
use crate::nn::{channel_shuffle, conv2d, conv_relu, pyramid_pooling, BoundParams, ConvSpec, ParamStore};
use crate::tensor::Scalar;

/// Total downsampling of the stem.
pub const STEM_STRIDE: usize = 4;

const SKELETON_HEAD: &str = "skeleton.head";
const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

fn conv3x3(name: String, c_in: usize, c_out: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        name,
        c_in,
        c_out,
        kernel: (3, 3),
        geom: ConvGeometry { stride: (stride, stride), padding: (1, 1), dilation: (1, 1) },
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SkeletonBranch {
    reduce: ConvSpec,
    conv: ConvSpec,
    head: ConvSpec,
}

#[derive(Clone, Debug, PartialEq)]
struct BoundaryBranch {
    reduce: [ConvSpec; 3],
    conv1: ConvSpec,
    conv2: ConvSpec,
    head: ConvSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    stem: [ConvSpec; 2],
    stages: Vec<[ConvSpec; 2]>,
    ppm: Vec<ConvSpec>,
    parse_reduce: ConvSpec,
    parse_cls: ConvSpec,
    skeleton: Option<SkeletonBranch>,
    boundary: Option<BoundaryBranch>,
    lcm: Option<LcmSpec>,
    gem: Option<GemSpec>,
    fuse: [ConvSpec; 3],
}

/// Forward results; logits are at the parsing-feature resolution.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub base_logits: Var,
    pub fine_logits: Var,
    /// `[B, J, h, w]` heatmap predictions, present with the compression module.
    pub heatmaps: Option<Var>,
    /// `[B, 2, h, w]`, present with the expansion module.
    pub boundary_logits: Option<Var>,
    pub channel_affinity: Option<ChannelAffinity>,
    pub spatial_affinity: Option<SpatialAffinity>,
}

pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    cfg.validate()?;
    let c = cfg.channels;
    let w = &cfg.stage_widths;
    let stem = [
        conv3x3("stem.conv1".into(), cfg.in_channels, cfg.stem_width, 2),
        conv3x3("stem.conv2".into(), cfg.stem_width, cfg.stem_width, 2),
    ];
    let mut stages = Vec::new();
    let mut prev = cfg.stem_width;
    for (i, (&width, &stride)) in w.iter().zip(&STAGE_STRIDES).enumerate() {
        stages.push([
            conv3x3(format!("backbone.s{}.conv1", i + 1), prev, width, stride),
            conv3x3(format!("backbone.s{}.conv2", i + 1), width, width, 1),
        ]);
        prev = width;
    }
    let bin_width = (w[3] / 4).max(1);
    let ppm: Vec<ConvSpec> =
        cfg.ppm_bins.iter().map(|b| ConvSpec::pointwise(format!("ppm.bin{b}"), w[3], bin_width)).collect();
    let ppm_out = w[3] + bin_width * ppm.len();
    let parse_reduce = ConvSpec::pointwise("parse.reduce", ppm_out + w[0], c);
    let parse_cls = ConvSpec::pointwise("parse.cls", c, cfg.num_classes);

    let skeleton = cfg.enable_lcm.then(|| SkeletonBranch {
        reduce: ConvSpec::pointwise("skeleton.reduce", w.iter().sum(), c),
        conv: ConvSpec::same("skeleton.conv", c, c, 3, 3),
        head: ConvSpec::pointwise(SKELETON_HEAD, c, cfg.num_joints),
    });
    let r = cfg.boundary_reduce;
    let boundary = cfg.enable_gem.then(|| BoundaryBranch {
        reduce: [0, 1, 2].map(|i| ConvSpec::pointwise(format!("boundary.reduce{}", i + 1), w[i], r)),
        conv1: ConvSpec::pointwise("boundary.conv1", 3 * r, c),
        conv2: ConvSpec::pointwise("boundary.conv2", c, c),
        head: ConvSpec::pointwise("boundary.head", c, 2),
    });
    let lcm = if cfg.enable_lcm { Some(LcmSpec::new("lcm", c, cfg.lcm_maps, cfg.gc_kernel)?) } else { None };
    let gem = cfg.enable_gem.then(|| GemSpec::new("gem", c, cfg.gem_dim));
    let fuse_in = if cfg.enable_lcm && cfg.enable_gem { 2 * c } else { c };
    let fuse = [
        ConvSpec::pointwise("fuse.conv1", fuse_in, c),
        ConvSpec::pointwise("fuse.conv2", c, c),
        ConvSpec::pointwise("fuse.cls", c, cfg.num_classes),
    ];
    Ok(Network { cfg: cfg.clone(), stem, stages, ppm, parse_reduce, parse_cls, skeleton, boundary, lcm, gem, fuse })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Every convolution in a fixed order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut out: Vec<ConvSpec> = self.stem.to_vec();
        out.extend(self.stages.iter().flatten().cloned());
        out.extend(self.ppm.iter().cloned());
        out.push(self.parse_reduce.clone());
        out.push(self.parse_cls.clone());
        if let Some(s) = &self.skeleton {
            out.extend([s.reduce.clone(), s.conv.clone(), s.head.clone()]);
        }
        if let Some(b) = &self.boundary {
            out.extend(b.reduce.iter().cloned());
            out.extend([b.conv1.clone(), b.conv2.clone(), b.head.clone()]);
        }
        if let Some(l) = &self.lcm {
            out.extend(l.gc.convs());
            out.push(l.enc.clone());
        }
        if let Some(g) = &self.gem {
            out.extend([g.enc_p.clone(), g.enc_e.clone(), g.enc_k.clone(), g.fuse.clone()]);
        }
        out.extend(self.fuse.iter().cloned());
        out
    }

    /// Expected `(name, shape)` of every parameter, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .convs()
            .iter()
            .flat_map(|c| [(c.weight_name(), c.weight_shape().to_vec()), (c.bias_name(), vec![c.c_out])])
            .collect();
        out.sort();
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Each layer draws from its own stream keyed by `(seed, name)`, so layers
    /// shared between variants start identical.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for conv in self.convs() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&conv.name));
            conv.init(&mut store, &mut rng);
            // heatmaps start at the all-zero map, which is close to the target almost everywhere
            if conv.name == SKELETON_HEAD {
                if let Some(w) = store.get_mut(&conv.weight_name()) {
                    w.data_mut().fill(0.0);
                }
            }
        }
        store
    }

    /// Configuration error unless `store` holds exactly the expected tensors.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.param_shapes();
        if store.len() != expected.len() {
            return Err(config_err(format!("checkpoint has {} tensors, network expects {}", store.len(), expected.len())));
        }
        for (name, shape) in expected {
            match store.get(&name) {
                None => return Err(config_err(format!("checkpoint lacks `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(config_err(format!("`{name}` has shape {:?}, network expects {shape:?}", t.shape())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Output extent of the parsing feature for an `h × w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let down = |x: usize| (x - 1) / 2 + 1;
        (down(down(h)), down(down(w)))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &BoundParams, image: Var) -> Result<Outputs> {
        let bind = |c: &ConvSpec| c.bind(vars);
        // center pixel intensities around zero
        let mut x = tape.add_scalar(image, T::from_f64(-0.5));
        for c in &self.stem {
            x = conv_relu(tape, x, &bind(c)?)?;
        }
        let mut feats = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = conv_relu(tape, x, &bind(a)?)?;
            let y = conv_relu(tape, x, &bind(b)?)?;
            x = tape.add(x, y)?;
            feats.push(x);
        }
        let (_, _, h, w) = tape.value(feats[0]).dims4()?;
        let size = (h, w);
        let up = |tape: &mut Tape<T>, v: Var| tape.upsample(v, size, UpsampleMode::Bilinear);

        let ppm_convs = self.ppm.iter().map(bind).collect::<Result<Vec<_>>>()?;
        let pooled = pyramid_pooling(tape, feats[3], &self.cfg.ppm_bins, &ppm_convs)?;
        let pooled = up(tape, pooled)?;
        let cat = tape.concat_channels(&[pooled, feats[0]])?;
        let p = conv_relu(tape, cat, &bind(&self.parse_reduce)?)?;
        let base_logits = conv2d(tape, p, &bind(&self.parse_cls)?)?;

        let mut heatmaps = None;
        let mut channel_affinity = None;
        let mut compressed = None;
        if let (Some(sk), Some(spec)) = (&self.skeleton, &self.lcm) {
            let mut parts = vec![feats[0]];
            for &f in &feats[1..] {
                parts.push(up(tape, f)?);
            }
            let cat = tape.concat_channels(&parts)?;
            let shuffled = channel_shuffle(tape, cat, self.cfg.shuffle_groups)?;
            // S is tapped before the heatmap convs so that heatmap regression
            // pressure does not silence the features the LCM reads
            let s = conv_relu(tape, shuffled, &bind(&sk.reduce)?)?;
            let t = conv_relu(tape, s, &bind(&sk.conv)?)?;
            heatmaps = Some(conv2d(tape, t, &bind(&sk.head)?)?);
            let (l, a) = lcm(tape, s, p, &spec.bind(vars)?)?;
            compressed = Some(l);
            channel_affinity = Some(a);
        }

        let mut boundary_logits = None;
        let mut spatial_affinity = None;
        let mut expanded = None;
        if let (Some(bd), Some(spec)) = (&self.boundary, &self.gem) {
            let mut parts = Vec::with_capacity(3);
            for (i, conv) in bd.reduce.iter().enumerate() {
                let r = conv2d(tape, feats[i], &bind(conv)?)?;
                parts.push(if i == 0 { r } else { up(tape, r)? });
            }
            let cat = tape.concat_channels(&parts)?;
            let e = conv_relu(tape, cat, &bind(&bd.conv1)?)?;
            let e = conv_relu(tape, e, &bind(&bd.conv2)?)?;
            boundary_logits = Some(conv2d(tape, e, &bind(&bd.head)?)?);
            let (xg, g) = gem(tape, p, e, &spec.bind(vars)?)?;
            expanded = Some(xg);
            spatial_affinity = Some(g);
        }

        let fused_in = match (compressed, expanded) {
            (Some(l), Some(xg)) => tape.concat_channels(&[l, xg])?,
            (Some(l), None) => l,
            (None, Some(xg)) => xg,
            (None, None) => p,
        };
        let f = conv_relu(tape, fused_in, &bind(&self.fuse[0])?)?;
        let f = conv_relu(tape, f, &bind(&self.fuse[1])?)?;
        let fine_logits = conv2d(tape, f, &bind(&self.fuse[2])?)?;
        Ok(Outputs { base_logits, fine_logits, heatmaps, boundary_logits, channel_affinity, spatial_affinity })
    }
}

/// FNV-1a, used only to derive per-layer seeds.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(lcm: bool, gem: bool) -> NetworkConfig {
        NetworkConfig { enable_lcm: lcm, enable_gem: gem, ..Default::default() }
    }

    #[test]
    fn fine_logits_at_quarter_resolution() {
        let net = build_network(&cfg(true, true)).unwrap();
        let params = net.init_params(1);
        net.check_params(&params).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = params.bind(&mut tape);
        let img = tape.constant(Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 17) as f32 / 17.0));
        let out = net.forward(&mut tape, &vars, img).unwrap();
        assert_eq!(tape.shape(out.fine_logits), [2, 7, 16, 16]);
        assert_eq!(tape.shape(out.base_logits), [2, 7, 16, 16]);
        assert_eq!(tape.shape(out.heatmaps.unwrap()), [2, 6, 16, 16]);
        assert_eq!(tape.shape(out.boundary_logits.unwrap()), [2, 2, 16, 16]);
        assert_eq!(net.feature_size(64, 64), (16, 16));
    }

    #[test]
    fn baseline_has_no_branches() {
        let base = build_network(&cfg(false, false)).unwrap();
        assert!(base.convs().iter().all(|c| !c.name.starts_with("skeleton")
            && !c.name.starts_with("boundary")
            && !c.name.starts_with("lcm")
            && !c.name.starts_with("gem")));
        let full = build_network(&cfg(true, true)).unwrap();
        assert!(full.param_count() > base.param_count());
    }

    #[test]
    fn shared_layers_initialize_identically() {
        let a = build_network(&cfg(false, false)).unwrap().init_params(3);
        let b = build_network(&cfg(true, true)).unwrap().init_params(3);
        for (name, t) in a.iter().filter(|(n, _)| !n.starts_with("fuse.conv1")) {
            assert_eq!(b.get(name), Some(t), "{name}");
        }
    }

    #[test]
    fn check_params_detects_mismatch() {
        let net = build_network(&cfg(true, false)).unwrap();
        let other = build_network(&NetworkConfig { channels: 24, ..cfg(true, false) }).unwrap();
        assert!(net.check_params(&other.init_params(0)).is_err());
        assert!(net.check_params(&build_network(&cfg(false, false)).unwrap().init_params(0)).is_err());
    }
}
