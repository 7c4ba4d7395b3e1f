//! Parameterized blocks: convolution, the separable large-kernel (GC) block,
//! pyramid pooling and channel shuffle.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, UpsampleMode, Var};
use crate::error::{config_err, Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors, kept sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.cast()))).collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| config_err(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Convolution parameters as bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeometry,
}

/// Static description of a convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeometry,
}

impl ConvSpec {
    /// Stride-1 convolution whose padding preserves spatial extent.
    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, kh: usize, kw: usize) -> Self {
        ConvSpec { name: name.into(), c_in, c_out, kernel: (kh, kw), geom: ConvGeometry::same(kh, kw) }
    }

    pub fn pointwise(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::same(name, c_in, c_out, 1, 1)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel.0, self.kernel.1]
    }

    /// He-uniform weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = (self.c_in * self.kernel.0 * self.kernel.1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = self.weight_shape();
        let w = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound) as f32);
        store.insert(self.weight_name(), w);
        store.insert(self.bias_name(), Tensor::zeros(&[self.c_out]));
    }

    pub fn bind(&self, vars: &BoundParams) -> Result<ConvParams> {
        Ok(ConvParams {
            weight: vars.get(&self.weight_name())?,
            bias: Some(vars.get(&self.bias_name())?),
            geom: self.geom,
        })
    }
}

pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    tape.conv2d(x, p.weight, p.bias, p.geom)
}

/// Convolution followed by ReLU.
pub fn conv_relu<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    let y = conv2d(tape, x, p)?;
    Ok(tape.relu(y))
}

/// The two separable paths of a GC block as bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GcParams {
    /// `1×k` then `k×1`.
    pub path_a: [ConvParams; 2],
    /// `k×1` then `1×k`.
    pub path_b: [ConvParams; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl GcSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(config_err(format!("GC kernel extent must be odd, got {k}")));
        }
        Ok(GcSpec { name: name.into(), c_in, c_out, k })
    }

    pub fn convs(&self) -> [ConvSpec; 4] {
        let (n, k) = (&self.name, self.k);
        [
            ConvSpec::same(format!("{n}.a1"), self.c_in, self.c_out, 1, k),
            ConvSpec::same(format!("{n}.a2"), self.c_out, self.c_out, k, 1),
            ConvSpec::same(format!("{n}.b1"), self.c_in, self.c_out, k, 1),
            ConvSpec::same(format!("{n}.b2"), self.c_out, self.c_out, 1, k),
        ]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for c in self.convs() {
            c.init(store, rng);
        }
    }

    pub fn bind(&self, vars: &BoundParams) -> Result<GcParams> {
        let [a1, a2, b1, b2] = self.convs();
        Ok(GcParams {
            path_a: [a1.bind(vars)?, a2.bind(vars)?],
            path_b: [b1.bind(vars)?, b2.bind(vars)?],
        })
    }
}

/// Large-kernel block: `(1×k → k×1)(x) + (k×1 → 1×k)(x)`, extent preserving.
pub fn gc_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GcParams) -> Result<Var> {
    for c in p.path_a.iter().chain(&p.path_b) {
        let [_, _, kh, kw] = tape.shape(c.weight)[..] else {
            return Err(Error::Dimension("GC weight must be rank 4".into()));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(config_err(format!("GC kernel {kh}x{kw} has an even extent")));
        }
    }
    let a = conv2d(tape, x, &p.path_a[0])?;
    let a = conv2d(tape, a, &p.path_a[1])?;
    let b = conv2d(tape, x, &p.path_b[0])?;
    let b = conv2d(tape, b, &p.path_b[1])?;
    tape.add(a, b)
}

/// Pyramid pooling: for each bin, adaptive-average-pool to `bin×bin`,
/// project with `convs[i]`, resize bilinearly back to `H×W`; the branches
/// are concatenated after `x` along channels.
pub fn pyramid_pooling<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    bins: &[usize],
    convs: &[ConvParams],
) -> Result<Var> {
    if bins.len() != convs.len() {
        return Err(config_err(format!("{} pooling bins but {} projections", bins.len(), convs.len())));
    }
    let (_, _, h, w) = tape.value(x).dims4()?;
    let mut parts = vec![x];
    for (&bin, conv) in bins.iter().zip(convs) {
        let pooled = tape.adaptive_avg_pool(x, bin)?;
        let proj = conv2d(tape, pooled, conv)?;
        parts.push(tape.upsample(proj, (h, w), UpsampleMode::Bilinear)?);
    }
    tape.concat_channels(&parts)
}

/// Destination position of channel `c` under a `groups`-way shuffle.
pub fn shuffle_position(c: usize, channels: usize, groups: usize) -> usize {
    (c % groups) * (channels / groups) + c / groups
}

/// `index[j]` = source channel placed at position `j`.
pub fn shuffle_index(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(config_err(format!("{groups} shuffle groups do not divide {channels} channels")));
    }
    let mut index = vec![0; channels];
    for c in 0..channels {
        index[shuffle_position(c, channels, groups)] = c;
    }
    Ok(index)
}

pub fn channel_shuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, groups: usize) -> Result<Var> {
    let channels = *tape.shape(x).get(1).ok_or_else(|| Error::Dimension("shuffle needs NCHW".into()))?;
    let index = shuffle_index(channels, groups)?;
    tape.gather_channels(x, &index)
}

pub fn upsample<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    size: (usize, usize),
    mode: UpsampleMode,
) -> Result<Var> {
    tape.upsample(x, size, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn conv(tape: &mut Tape<f64>, w: Tensor<f64>, b: Tensor<f64>, geom: ConvGeometry) -> ConvParams {
        ConvParams { weight: tape.constant(w), bias: Some(tape.constant(b)), geom }
    }

    /// Direct-summation reference for a stride-1 zero-padded convolution.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: (usize, usize)) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let mut out = Tensor::zeros(&[n, co, h + 2 * pad.0 + 1 - kh, wd + 2 * pad.1 + 1 - kw]);
        let (_, _, ho, wo) = out.dims4().unwrap();
        for bi in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y + ky) as isize - pad.0 as isize;
                                    let ix = (xx + kx) as isize - pad.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[bi, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[bi, o, y, xx]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let xv = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let x = tape.constant(xv.clone());
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let p = conv(&mut tape, eye, Tensor::zeros(&[3]), ConvGeometry::default());
        let y = conv2d(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let p = conv(&mut tape, Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]), ConvGeometry::same(3, 3));
        let y = conv2d(&mut tape, x, &p).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv = rand_tensor(&[2, 3, 5, 4], &mut rng);
        let wv = rand_tensor(&[4, 3, 3, 1], &mut rng);
        let bv = rand_tensor(&[4], &mut rng);
        let expected = conv_oracle(&xv, &wv, &bv, (1, 0));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv);
        let geom = ConvGeometry::same(3, 1);
        let p = conv(&mut tape, wv, bv, geom);
        let y = conv2d(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn strided_conv_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let geom = ConvGeometry { stride: (2, 2), padding: (1, 1), dilation: (1, 1) };
        let y = tape.conv2d(x, w, None, geom).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 32, 32]);
        let dil = ConvGeometry { padding: (2, 2), dilation: (2, 2), ..Default::default() };
        let y = tape.conv2d(x, w, None, dil).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 64, 64]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 5, 1, 1]));
        assert!(matches!(
            tape.conv2d(x, w, None, ConvGeometry::default()),
            Err(Error::Dimension(_))
        ));
    }

    fn delta_gc(tape: &mut Tape<f64>, c: usize, k: usize) -> GcParams {
        let horiz = Tensor::from_fn(&[c, c, 1, k], |i| {
            let (o, rest) = (i / (c * k), i % (c * k));
            if rest / k == o && rest % k == k / 2 { 1.0 } else { 0.0 }
        });
        let vert = horiz.clone().reshaped(&[c, c, k, 1]).unwrap();
        let z = Tensor::zeros(&[c]);
        GcParams {
            path_a: [
                conv(tape, horiz.clone(), z.clone(), ConvGeometry::same(1, k)),
                conv(tape, vert.clone(), z.clone(), ConvGeometry::same(k, 1)),
            ],
            path_b: [
                conv(tape, vert, z.clone(), ConvGeometry::same(k, 1)),
                conv(tape, horiz, z, ConvGeometry::same(1, k)),
            ],
        }
    }

    #[test]
    fn gc_delta_kernels_double_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rand_tensor(&[1, 3, 5, 6], &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let p = delta_gc(&mut tape, 3, 7);
        let y = gc_block(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn gc_zero_weights_give_zero() {
        let spec = GcSpec::new("gc", 3, 2, 5).unwrap();
        let mut store = ParamStore::new();
        for c in spec.convs() {
            store.insert(c.weight_name(), Tensor::zeros(&c.weight_shape()));
            store.insert(c.bias_name(), Tensor::zeros(&[c.c_out]));
        }
        let mut tape = Tape::<f64>::new();
        let vars = store.bind(&mut tape);
        let p = spec.bind(&vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = tape.constant(rand_tensor(&[1, 3, 4, 4], &mut rng));
        let y = gc_block(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
    }

    #[test]
    fn gc_matches_two_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, n, k) = (3, 2, 5);
        let xv = rand_tensor(&[1, c, 6, 5], &mut rng);
        let ws = [
            (rand_tensor(&[n, c, 1, k], &mut rng), (0, k / 2)),
            (rand_tensor(&[n, n, k, 1], &mut rng), (k / 2, 0)),
            (rand_tensor(&[n, c, k, 1], &mut rng), (k / 2, 0)),
            (rand_tensor(&[n, n, 1, k], &mut rng), (0, k / 2)),
        ];
        let bs: Vec<_> = (0..4).map(|_| rand_tensor(&[n], &mut rng)).collect();
        let a = conv_oracle(&conv_oracle(&xv, &ws[0].0, &bs[0], ws[0].1), &ws[1].0, &bs[1], ws[1].1);
        let b = conv_oracle(&conv_oracle(&xv, &ws[2].0, &bs[2], ws[2].1), &ws[3].0, &bs[3], ws[3].1);
        let expected = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv);
        let mk = |tape: &mut Tape<f64>, i: usize| {
            let (kh, kw) = (ws[i].0.shape()[2], ws[i].0.shape()[3]);
            conv(tape, ws[i].0.clone(), bs[i].clone(), ConvGeometry::same(kh, kw))
        };
        let p = GcParams { path_a: [mk(&mut tape, 0), mk(&mut tape, 1)], path_b: [mk(&mut tape, 2), mk(&mut tape, 3)] };
        let y = gc_block(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn gc_rejects_even_kernel() {
        assert!(matches!(GcSpec::new("gc", 2, 2, 4), Err(Error::Config(_))));
    }

    #[test]
    fn ppm_constant_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 6, 6], 0.75));
        let bins = [1, 2, 3, 6];
        // Each branch projects 2 → 1 channel with weights summing to one.
        let convs: Vec<_> = bins
            .iter()
            .map(|_| conv(&mut tape, Tensor::full(&[1, 2, 1, 1], 0.5), Tensor::zeros(&[1]), ConvGeometry::default()))
            .collect();
        let y = pyramid_pooling(&mut tape, x, &bins, &convs).unwrap();
        assert_eq!(tape.shape(y), &[1, 6, 6, 6]);
        for v in tape.value(y).data() {
            assert!((v - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_single_bin_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let mean = xv.data().iter().sum::<f64>() / 16.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv);
        let id = conv(&mut tape, Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), ConvGeometry::default());
        let y = pyramid_pooling(&mut tape, x, &[1], &[id]).unwrap();
        for v in &tape.value(y).data()[16..] {
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrant_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let pooled = tape.adaptive_avg_pool(x, 2).unwrap();
        for qy in 0..2 {
            for qx in 0..2 {
                let mut acc = 0.0;
                for y in 0..2 {
                    for xx in 0..2 {
                        acc += xv.at(&[0, 0, 2 * qy + y, 2 * qx + xx]);
                    }
                }
                assert!((tape.value(pooled).at(&[0, 0, qy, qx]) - acc / 4.0).abs() < 1e-12);
            }
        }
        assert!(matches!(tape.adaptive_avg_pool(x, 5), Err(Error::Config(_))));
    }

    #[test]
    fn shuffle_examples() {
        assert_eq!(shuffle_index(4, 1).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(shuffle_index(4, 2).unwrap(), vec![0, 2, 1, 3]);
        assert!(matches!(shuffle_index(6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn shuffle_inverse_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = rand_tensor(&[2, 12, 2, 3], &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let y = channel_shuffle(&mut tape, x, 4).unwrap();
        let index = shuffle_index(12, 4).unwrap();
        let mut inverse = vec![0; 12];
        for (j, &src) in index.iter().enumerate() {
            inverse[src] = j;
        }
        let back = tape.gather_channels(y, &inverse).unwrap();
        assert_eq!(tape.value(back), &xv);
    }

    /// Per-pixel half-pixel bilinear reference.
    fn bilinear_oracle(src: &[[f64; 2]; 2], oh: usize, ow: usize) -> Vec<f64> {
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = p.floor() as usize;
            (lo, (lo + 1).min(n_in - 1), p - lo as f64)
        };
        let mut out = Vec::new();
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, 2, oh);
            for x in 0..ow {
                let (x0, x1, fx) = coord(x, 2, ow);
                let top = src[y0][x0] * (1.0 - fx) + src[y0][x1] * fx;
                let bot = src[y1][x0] * (1.0 - fx) + src[y1][x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
        out
    }

    #[test]
    fn bilinear_two_by_two_to_four() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = upsample(&mut tape, x, (4, 4), UpsampleMode::Bilinear).unwrap();
        let expected = bilinear_oracle(&[[0.0, 1.0], [2.0, 3.0]], 4, 4);
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // first row: 0, 0.25, 0.75, 1
        assert_eq!(&tape.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = rand_tensor(&[1, 2, 3, 5], &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let y = upsample(&mut tape, x, (3, 5), mode).unwrap();
            assert_eq!(tape.value(y), &xv);
        }
        let c = tape.constant(Tensor::full(&[1, 1, 3, 2], -1.5));
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let y = upsample(&mut tape, c, (7, 4), mode).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == -1.5));
        }
    }
}
