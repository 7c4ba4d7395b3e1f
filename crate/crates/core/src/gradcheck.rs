//! Finite-difference verification of tape gradients, in 64-bit arithmetic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{self, GemSpec, LcmSpec};
use crate::autodiff::{Tape, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::losses::{self, BoundaryWeighting, LabelMap, LossInputs, LossTargets, LossWeights};
use crate::nn::{self, ConvParams, ConvSpec, GcSpec};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over all coordinates of all `inputs` of
/// `|analytic − central difference| / max(1, |central difference|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("every input is a trainable leaf");
        for i in 0..probe[slot].numel() {
            let orig = probe[slot].data()[i];
            probe[slot].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), h)
}

/// Scalarizes `v` as `Σ v ⊙ R` for a fixed pseudo-random `R`, so that every
/// output coordinate contributes a distinct weight.
pub fn project(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let r = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.754_877_666).sin());
    let r = tape.constant(r);
    let prod = tape.mul(v, r)?;
    Ok(tape.sum(prod))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    Primitives,
    NnOps,
    Lcm,
    Gem,
    Losses,
}

impl CheckGroup {
    pub const ALL: [CheckGroup; 5] =
        [CheckGroup::Primitives, CheckGroup::NnOps, CheckGroup::Lcm, CheckGroup::Gem, CheckGroup::Losses];
}

impl fmt::Display for CheckGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckGroup::Primitives => "primitives",
            CheckGroup::NnOps => "nnops",
            CheckGroup::Lcm => "lcm",
            CheckGroup::Gem => "gem",
            CheckGroup::Losses => "losses",
        })
    }
}

/// Parses a `--module` selector; `all` expands to every group.
pub fn parse_groups(s: &str) -> Result<Vec<CheckGroup>> {
    if s == "all" {
        return Ok(CheckGroup::ALL.to_vec());
    }
    Ok(vec![s.parse()?])
}

impl FromStr for CheckGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckGroup::ALL
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub group: CheckGroup,
    pub name: &'static str,
    pub seeds: usize,
    pub worst: f64,
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> Result<f64>);

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for inputs that feed a ReLU kink directly.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn conv_inputs(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kh: usize, kw: usize) -> [Tensor<f64>; 2] {
    [rand_t(rng, &[c_out, c_in, kh, kw]), rand_t(rng, &[c_out])]
}

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", |rng| {
            let ins = [rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2])];
            grad_check_many(|t, v| { let m = t.matmul(v[0], v[1])?; project(t, m) }, &ins, DEFAULT_STEP)
        }),
        ("batched_matmul", |rng| {
            let ins = [rand_t(rng, &[2, 3, 5]), rand_t(rng, &[2, 5, 4])];
            grad_check_many(|t, v| { let m = t.matmul(v[0], v[1])?; project(t, m) }, &ins, DEFAULT_STEP)
        }),
        ("softmax", |rng| {
            let x = rand_t(rng, &[2, 5, 3]);
            let a = grad_check(|t, v| { let s = t.softmax(v, 1)?; project(t, s) }, &x, DEFAULT_STEP)?;
            let b = grad_check(|t, v| { let s = t.softmax(v, 2)?; project(t, s) }, &x, DEFAULT_STEP)?;
            Ok(a.max(b))
        }),
        ("permute_reshape", |rng| {
            let x = rand_t(rng, &[1, 8, 6, 6]);
            grad_check(
                |t, v| {
                    let p = t.permute(v, &[0, 2, 3, 1])?;
                    let r = t.reshape(p, &[36, 8])?;
                    let tr = t.transpose(r)?;
                    project(t, tr)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        ("elementwise", |rng| {
            let ins = [rand_t(rng, &[1, 4, 3, 3]), rand_t(rng, &[1, 4, 3, 3]), rand_t(rng, &[4]), rand_t(rng, &[1, 4])];
            grad_check_many(
                |t, v| {
                    let a = t.add(v[0], v[1])?;
                    let m = t.mul(a, v[1])?;
                    let s = t.sub(m, v[0])?;
                    let c = t.add_channels(s, v[2])?;
                    let d = t.mul_channels(c, v[3])?;
                    let e = t.scale(d, 0.7);
                    let f = t.add_scalar(e, 0.3);
                    project(t, f)
                },
                &ins,
                DEFAULT_STEP,
            )
        }),
        ("relu", |rng| {
            let x = rand_away_from_zero(rng, &[1, 8, 6, 6]);
            grad_check(|t, v| { let r = t.relu(v); project(t, r) }, &x, DEFAULT_STEP)
        }),
        ("concat_mean", |rng| {
            let ins = [rand_t(rng, &[1, 2, 3, 3]), rand_t(rng, &[1, 3, 3, 3])];
            grad_check_many(
                |t, v| {
                    let c = t.concat_channels(&[v[0], v[1]])?;
                    let m = t.mean_along(c, 1)?;
                    let n = t.mean_along(c, 3)?;
                    let a = project(t, m)?;
                    let b = project(t, n)?;
                    let s = t.add(a, b)?;
                    let whole = t.mean(c);
                    t.add(s, whole)
                },
                &ins,
                DEFAULT_STEP,
            )
        }),
        ("softmax_sum_constant", |rng| {
            // Σ softmax(x) is constant, so the gradient must vanish.
            let x = rand_t(rng, &[6]);
            grad_check(|t, v| { let s = t.softmax(v, 0)?; Ok(t.sum(s)) }, &x, DEFAULT_STEP)
        }),
    ]
}

fn conv_case(rng: &mut ChaCha8Rng, geom: ConvGeometry, k: (usize, usize)) -> Result<f64> {
    let [w, b] = conv_inputs(rng, 2, 3, k.0, k.1);
    let ins = [rand_t(rng, &[1, 2, 6, 5]), w, b];
    grad_check_many(
        move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), geom)?;
            project(t, y)
        },
        &ins,
        DEFAULT_STEP,
    )
}

fn nn_cases() -> Vec<Case> {
    vec![
        ("conv2d_same", |rng| conv_case(rng, ConvGeometry::same(3, 3), (3, 3))),
        ("conv2d_strided", |rng| {
            conv_case(rng, ConvGeometry { stride: (2, 2), padding: (1, 1), dilation: (1, 1) }, (3, 3))
        }),
        ("conv2d_dilated", |rng| {
            conv_case(rng, ConvGeometry { stride: (1, 1), padding: (2, 2), dilation: (2, 2) }, (3, 3))
        }),
        ("conv2d_small_input", |rng| {
            let [w, b] = conv_inputs(rng, 2, 2, 3, 3);
            let ins = [rand_t(rng, &[1, 2, 4, 4]), w, b];
            grad_check_many(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::same(3, 3))?;
                    project(t, y)
                },
                &ins,
                DEFAULT_STEP,
            )
        }),
        ("gc_block", |rng| {
            let spec = GcSpec::new("gc", 3, 2, 3)?;
            let mut ins = vec![rand_t(rng, &[1, 3, 4, 5])];
            for c in spec.convs() {
                ins.extend(conv_inputs(rng, c.c_in, c.c_out, c.kernel.0, c.kernel.1));
            }
            grad_check_many(
                |t, v| {
                    let convs = GcSpec::new("gc", 3, 2, 3)?.convs();
                    let bind = |i: usize| ConvParams { weight: v[1 + 2 * i], bias: Some(v[2 + 2 * i]), geom: convs[i].geom };
                    let p = nn::GcParams { path_a: [bind(0), bind(1)], path_b: [bind(2), bind(3)] };
                    let y = nn::gc_block(t, v[0], &p)?;
                    project(t, y)
                },
                &ins,
                DEFAULT_STEP,
            )
        }),
        ("pyramid_pooling", |rng| {
            let mut ins = vec![rand_t(rng, &[1, 4, 6, 6])];
            for _ in 0..3 {
                ins.extend(conv_inputs(rng, 4, 2, 1, 1));
            }
            grad_check_many(
                |t, v| {
                    let convs: Vec<_> = (0..3)
                        .map(|i| ConvParams { weight: v[1 + 2 * i], bias: Some(v[2 + 2 * i]), geom: ConvGeometry::default() })
                        .collect();
                    let y = nn::pyramid_pooling(t, v[0], &[1, 2, 3], &convs)?;
                    project(t, y)
                },
                &ins,
                DEFAULT_STEP,
            )
        }),
        ("channel_shuffle", |rng| {
            let x = rand_t(rng, &[1, 8, 3, 3]);
            grad_check(|t, v| { let y = nn::channel_shuffle(t, v, 4)?; project(t, y) }, &x, DEFAULT_STEP)
        }),
        ("upsample_bilinear", |rng| {
            let x = rand_t(rng, &[1, 2, 3, 4]);
            grad_check(
                |t, v| {
                    let up = nn::upsample(t, v, (7, 6), UpsampleMode::Bilinear)?;
                    let down = nn::upsample(t, v, (2, 3), UpsampleMode::Bilinear)?;
                    let a = project(t, up)?;
                    let b = project(t, down)?;
                    t.add(a, b)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        ("upsample_nearest", |rng| {
            let x = rand_t(rng, &[1, 2, 3, 3]);
            grad_check(|t, v| { let y = nn::upsample(t, v, (6, 5), UpsampleMode::Nearest)?; project(t, y) }, &x, DEFAULT_STEP)
        }),
    ]
}

/// Random parameters for `specs`, in order, as weight/bias pairs.
fn param_inputs(rng: &mut ChaCha8Rng, specs: &[ConvSpec]) -> Vec<Tensor<f64>> {
    specs
        .iter()
        .flat_map(|c| conv_inputs(rng, c.c_in, c.c_out, c.kernel.0, c.kernel.1))
        .collect()
}

fn store_from(specs: &[ConvSpec], tensors: &[Var]) -> Vec<(String, Var)> {
    specs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| [(c.weight_name(), tensors[2 * i]), (c.bias_name(), tensors[2 * i + 1])])
        .collect()
}

fn conv_from(specs: &[ConvSpec], named: &[(String, Var)], name: &str) -> ConvParams {
    let idx = specs.iter().position(|c| c.name == name).expect("known conv");
    let find = |n: String| named.iter().find(|(k, _)| *k == n).expect("bound").1;
    ConvParams {
        weight: find(specs[idx].weight_name()),
        bias: Some(find(specs[idx].bias_name())),
        geom: specs[idx].geom,
    }
}

const AFF_C: usize = 4;
const AFF_N: usize = 3;
const AFF_D: usize = 2;
const AFF_K: usize = 3;

fn lcm_specs() -> Vec<ConvSpec> {
    let s = LcmSpec::new("lcm", AFF_C, AFF_N, AFF_K).expect("odd kernel");
    let mut v = s.gc.convs().to_vec();
    v.push(s.enc);
    v
}

fn gem_specs() -> Vec<ConvSpec> {
    let s = GemSpec::new("gem", AFF_C, AFF_D);
    vec![s.enc_p, s.enc_e, s.enc_k, s.fuse]
}

fn lcm_forward(t: &mut Tape<f64>, s: Var, p: Var, params: &[Var]) -> Result<Var> {
    let specs = lcm_specs();
    let named = store_from(&specs, params);
    let gc = nn::GcParams {
        path_a: [conv_from(&specs, &named, "lcm.gc.a1"), conv_from(&specs, &named, "lcm.gc.a2")],
        path_b: [conv_from(&specs, &named, "lcm.gc.b1"), conv_from(&specs, &named, "lcm.gc.b2")],
    };
    let enc = conv_from(&specs, &named, "lcm.enc");
    let a = affinity::lcm_affinity(t, s, p, &gc, &enc)?;
    affinity::lcm_apply(t, p, &a)
}

fn gem_forward(t: &mut Tape<f64>, p: Var, e: Var, params: &[Var]) -> Result<Var> {
    let specs = gem_specs();
    let named = store_from(&specs, params);
    let c = |n: &str| conv_from(&specs, &named, n);
    let g = affinity::gem_affinity(t, p, e, &c("gem.enc_p"), &c("gem.enc_e"))?;
    affinity::gem_apply(t, p, &g, &c("gem.enc_k"), &c("gem.fuse"))
}

fn affinity_cases(group: CheckGroup) -> Vec<Case> {
    match group {
        CheckGroup::Lcm => vec![
            ("lcm_composite", |rng| {
                let mut ins = vec![rand_t(rng, &[1, AFF_C, 3, 3]), rand_t(rng, &[1, AFF_C, 3, 3])];
                ins.extend(param_inputs(rng, &lcm_specs()));
                grad_check_many(|t, v| { let l = lcm_forward(t, v[0], v[1], &v[2..])?; project(t, l) }, &ins, DEFAULT_STEP)
            }),
            ("lcm_gem_composite", |rng| {
                let mut ins = vec![
                    rand_t(rng, &[1, AFF_C, 3, 3]),
                    rand_t(rng, &[1, AFF_C, 3, 3]),
                    rand_t(rng, &[1, AFF_C, 3, 3]),
                ];
                ins.extend(param_inputs(rng, &lcm_specs()));
                ins.extend(param_inputs(rng, &gem_specs()));
                let split = 3 + 2 * lcm_specs().len();
                grad_check_many(
                    move |t, v| {
                        let l = lcm_forward(t, v[0], v[1], &v[3..split])?;
                        let x = gem_forward(t, v[1], v[2], &v[split..])?;
                        let cat = t.concat_channels(&[l, x])?;
                        project(t, cat)
                    },
                    &ins,
                    DEFAULT_STEP,
                )
            }),
        ],
        CheckGroup::Gem => vec![("gem_composite", |rng| {
            let mut ins = vec![rand_t(rng, &[1, AFF_C, 3, 3]), rand_t(rng, &[1, AFF_C, 3, 3])];
            ins.extend(param_inputs(rng, &gem_specs()));
            grad_check_many(|t, v| { let x = gem_forward(t, v[0], v[1], &v[2..])?; project(t, x) }, &ins, DEFAULT_STEP)
        })],
        _ => Vec::new(),
    }
}

fn random_labels(rng: &mut ChaCha8Rng, shape: [usize; 3], k: usize) -> LabelMap {
    let n = shape.iter().product();
    LabelMap::new(shape, (0..n).map(|_| rng.gen_range(0..k as u8)).collect(), k).expect("in range")
}

/// Boundary targets with both classes present.
fn random_boundary(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> LabelMap {
    let n: usize = shape.iter().product();
    let mut data: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
    data[0] = 0;
    data[1] = 1;
    LabelMap::new(shape, data, 2).expect("binary")
}

fn loss_cases() -> Vec<Case> {
    vec![
        ("cross_entropy", |rng| {
            let t = random_labels(rng, [1, 3, 3], 4);
            let x = rand_t(rng, &[1, 4, 3, 3]);
            grad_check(|tp, v| losses::cross_entropy(tp, v, &t), &x, DEFAULT_STEP)
        }),
        ("ohem_cross_entropy", |rng| {
            let t = random_labels(rng, [1, 3, 3], 4);
            let x = rand_t(rng, &[1, 4, 3, 3]);
            let w = LossWeights { ohem_keep_fraction: 0.5, ohem_min_kept: 2, ..Default::default() };
            grad_check(|tp, v| losses::ohem_cross_entropy(tp, v, &t, &w), &x, DEFAULT_STEP)
        }),
        ("boundary_ce", |rng| {
            let t = random_boundary(rng, [1, 3, 3]);
            let x = rand_t(rng, &[1, 2, 3, 3]);
            let inv = LossWeights::default();
            let fixed = LossWeights { boundary_weighting: BoundaryWeighting::Fixed { pos_weight: 3.0 }, ..Default::default() };
            let a = grad_check(|tp, v| losses::boundary_ce(tp, v, &t, &inv), &x, DEFAULT_STEP)?;
            let b = grad_check(|tp, v| losses::boundary_ce(tp, v, &t, &fixed), &x, DEFAULT_STEP)?;
            Ok(a.max(b))
        }),
        ("skeleton_mse", |rng| {
            let ins = [rand_t(rng, &[1, 3, 3, 3]), rand_t(rng, &[1, 3, 3, 3])];
            grad_check_many(|t, v| losses::skeleton_mse(t, v[0], v[1]), &ins, DEFAULT_STEP)
        }),
        ("total_loss", |rng| {
            let labels = random_labels(rng, [1, 3, 3], 4);
            let boundary = random_boundary(rng, [1, 3, 3]);
            let heat = rand_t(rng, &[1, 2, 3, 3]).map(f64::abs);
            let ins = [
                rand_t(rng, &[1, 4, 3, 3]),
                rand_t(rng, &[1, 4, 3, 3]),
                rand_t(rng, &[1, 2, 3, 3]),
                rand_t(rng, &[1, 2, 3, 3]),
            ];
            let w = LossWeights { alpha: 1.0, beta: 2.0, ohem_keep_fraction: 0.5, ohem_min_kept: 2, ..Default::default() };
            grad_check_many(
                |t, v| {
                    let h = t.constant(heat.clone());
                    let inputs = LossInputs { base_logits: v[0], fine_logits: v[1], boundary_logits: Some(v[2]), skeleton: Some(v[3]) };
                    let targets = LossTargets { labels: &labels, boundary: &boundary, heatmaps: h };
                    Ok(losses::total_loss(t, &inputs, &targets, &w)?.total)
                },
                &ins,
                DEFAULT_STEP,
            )
        }),
    ]
}

fn cases(group: CheckGroup) -> Vec<Case> {
    match group {
        CheckGroup::Primitives => primitive_cases(),
        CheckGroup::NnOps => nn_cases(),
        CheckGroup::Lcm | CheckGroup::Gem => affinity_cases(group),
        CheckGroup::Losses => loss_cases(),
    }
}

/// Runs every check of `groups` over `seeds` random draws each.
pub fn run_suite(groups: &[CheckGroup], seeds: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for &group in groups {
        for (name, case) in cases(group) {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed as u64);
                worst = worst.max(case(&mut rng)?);
            }
            results.push(CheckResult { group, name, seeds, worst });
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[2, 3]);
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly zero-crossing inputs has a one-sided derivative;
        // a kinked input must make the check report a large error.
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let err = grad_check(|t, v| { let r = t.relu(v); Ok(t.sum(r)) }, &x, DEFAULT_STEP).unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn parse_groups_accepts_known_names() {
        assert_eq!(parse_groups("all").unwrap().len(), 5);
        assert_eq!(parse_groups("lcm").unwrap(), vec![CheckGroup::Lcm]);
        assert!(parse_groups("nope").is_err());
    }

    #[test]
    fn suite_passes_on_few_seeds() {
        for r in run_suite(&CheckGroup::ALL, 2).unwrap() {
            assert!(r.worst <= 1e-4, "{} / {}: {}", r.group, r.name, r.worst);
        }
    }
}
