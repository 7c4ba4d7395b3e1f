//! Deterministic synthetic stick-figure samples.
//!
//! Each sample is a single upright figure drawn from filled capsules, with
//! part labels, joint coordinates, a boundary map derived from the labels and
//! per-joint Gaussian heatmaps. The same seed always yields the same sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;
pub const NUM_JOINTS: usize = 6;

pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["background", "head", "torso", "left-arm", "right-arm", "left-leg", "right-leg"];
pub const JOINT_NAMES: [&str; NUM_JOINTS] =
    ["head", "neck", "left-wrist", "right-wrist", "left-ankle", "right-ankle"];

pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const TORSO: u8 = 2;
pub const LEFT_ARM: u8 = 3;
pub const RIGHT_ARM: u8 = 4;
pub const LEFT_LEG: u8 = 5;
pub const RIGHT_LEG: u8 = 6;

/// Class id after a horizontal flip.
pub fn mirror_class(c: u8) -> u8 {
    match c {
        LEFT_ARM => RIGHT_ARM,
        RIGHT_ARM => LEFT_ARM,
        LEFT_LEG => RIGHT_LEG,
        RIGHT_LEG => LEFT_LEG,
        other => other,
    }
}

/// Joint id after a horizontal flip.
pub fn mirror_joint(j: usize) -> usize {
    match j {
        2 => 3,
        3 => 2,
        4 => 5,
        5 => 4,
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Max limb angle perturbation in radians.
    pub pose_range: f64,
    /// Max per-channel color perturbation of each part.
    pub color_jitter: f64,
    pub occlusion_prob: f64,
    pub sigma: f64,
    pub connectivity: Connectivity,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            pose_range: 0.6,
            color_jitter: 0.15,
            occlusion_prob: 0.2,
            sigma: 2.0,
            connectivity: Connectivity::Four,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(config_err(format!("synthetic images must be at least 32x32, got {}x{}", self.height, self.width)));
        }
        if !(self.sigma > 0.0) {
            return Err(config_err("heatmap sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(config_err("occlusion_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Joint {
    pub id: usize,
    /// Pixel column.
    pub x: i32,
    /// Pixel row.
    pub y: i32,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointSet {
    pub joints: Vec<Joint>,
}

impl JointSet {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("joint_id,x,y,visible\n");
        for j in &self.joints {
            out.push_str(&format!("{},{},{},{}\n", j.id, j.x, j.y, u8::from(j.visible)));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| crate::Error::Format { path: "joints.csv".into(), reason: format!("bad row `{line}`") };
        let mut joints = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            let visible = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(line)),
            };
            joints.push(Joint {
                id: f[0].parse().map_err(|_| bad(line))?,
                x: f[1].parse().map_err(|_| bad(line))?,
                y: f[2].parse().map_err(|_| bad(line))?,
                visible,
            });
        }
        Ok(JointSet { joints })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]`.
    pub labels: LabelMap,
    pub joints: JointSet,
    /// `[1, H, W]` with ids `{0, 1}`.
    pub boundary: LabelMap,
    /// `[J, H, W]`.
    pub heatmaps: Tensor<f32>,
}

/// Marks a pixel 1 iff a neighbor (4- or 8-connected) has a different label.
pub fn boundary_from_labels(labels: &LabelMap, connectivity: Connectivity) -> LabelMap {
    let [n, h, w] = labels.shape();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let here = labels.get(b, y, x);
                let edge = offsets.iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && labels.get(b, ny as usize, nx as usize) != here
                });
                out.push(u8::from(edge));
            }
        }
    }
    LabelMap::new([n, h, w], out, 2).expect("binary map")
}

/// Gaussian heatmap per joint; invisible joints give all-zero channels.
pub fn joints_to_heatmaps(joints: &JointSet, h: usize, w: usize, sigma: f64) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[joints.joints.len(), h, w]);
    let denom = 2.0 * sigma * sigma;
    let data = out.data_mut();
    for (c, j) in joints.joints.iter().enumerate() {
        if !j.visible {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - j.x as f64).powi(2) + (y as f64 - j.y as f64).powi(2);
                data[(c * h + y) * w + x] = (-d2 / denom).exp() as f32;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Point {
    x: f64,
    y: f64,
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * vx + (p.y - a.y) * vy) / len2).clamp(0.0, 1.0) };
    ((p.x - a.x - t * vx).powi(2) + (p.y - a.y - t * vy).powi(2)).sqrt()
}

enum Shape {
    Capsule { a: Point, b: Point, radius: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { c: Point, radius: f64 },
}

impl Shape {
    fn contains(&self, p: Point) -> bool {
        match *self {
            Shape::Capsule { a, b, radius } => segment_distance(p, a, b) <= radius,
            Shape::Rect { x0, y0, x1, y1 } => p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1,
            Shape::Disc { c, radius } => ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt() <= radius,
        }
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn offset(p: Point, angle: f64, len: f64) -> Point {
    // angle measured from straight down, positive toward image right
    Point { x: p.x + len * angle.sin(), y: p.y + len * angle.cos() }
}

/// Draws one figure. Pure function of `(seed, cfg)`.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f16e);
    let s = h.min(w) as f64 / 64.0 * rng.gen_range(0.85..1.1);
    // legs swing half as far as arms so they rarely cross
    let mut pose = |base: f64, scale: f64| {
        let r = cfg.pose_range * scale;
        base + if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 }
    };
    let arm_angles = [pose(-0.35, 1.0), pose(0.35, 1.0)];
    let leg_angles = [pose(-0.2, 0.5), pose(0.2, 0.5)];

    let head_r = 5.0 * s;
    let torso_len = 18.0 * s;
    let torso_half = 6.0 * s;
    let arm_len = 16.0 * s;
    let leg_len = 19.0 * s;
    let figure_h = 2.0 * head_r + torso_len + leg_len + 4.0 * s;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.1..0.1) * w as f64;
    let top = rng.gen_range(1.0..(h as f64 - figure_h).max(1.5));

    let head = Point { x: cx, y: top + head_r };
    let neck = Point { x: cx, y: head.y + head_r + 1.0 * s };
    let hip_y = neck.y + torso_len;
    let shoulders = [Point { x: cx - torso_half + s, y: neck.y + 2.0 * s }, Point { x: cx + torso_half - s, y: neck.y + 2.0 * s }];
    let hips = [Point { x: cx - 3.5 * s, y: hip_y }, Point { x: cx + 3.5 * s, y: hip_y }];
    let wrists = [offset(shoulders[0], arm_angles[0], arm_len), offset(shoulders[1], arm_angles[1], arm_len)];
    let ankles = [offset(hips[0], leg_angles[0], leg_len), offset(hips[1], leg_angles[1], leg_len)];

    let skin = jitter_color(&mut rng, [0.85, 0.65, 0.5], cfg.color_jitter);
    let shirt = random_color(&mut rng);
    let pants = random_color(&mut rng);
    let background = random_color(&mut rng);
    let sleeve = jitter_color(&mut rng, shirt, cfg.color_jitter);
    let parts: Vec<(u8, Shape, [f64; 3])> = vec![
        (LEFT_LEG, Shape::Capsule { a: hips[0], b: ankles[0], radius: 2.5 * s }, jitter_color(&mut rng, pants, cfg.color_jitter)),
        (RIGHT_LEG, Shape::Capsule { a: hips[1], b: ankles[1], radius: 2.5 * s }, jitter_color(&mut rng, pants, cfg.color_jitter)),
        (TORSO, Shape::Rect { x0: cx - torso_half, y0: neck.y, x1: cx + torso_half, y1: hip_y + s }, shirt),
        (LEFT_ARM, Shape::Capsule { a: shoulders[0], b: wrists[0], radius: 2.0 * s }, sleeve),
        (RIGHT_ARM, Shape::Capsule { a: shoulders[1], b: wrists[1], radius: 2.0 * s }, sleeve),
        (HEAD, Shape::Disc { c: head, radius: head_r }, skin),
    ];

    let mut labels = vec![BACKGROUND; h * w];
    let mut image = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = Point { x: x as f64, y: y as f64 };
            let mut color = background;
            for (class, shape, c) in &parts {
                if shape.contains(p) {
                    labels[y * w + x] = *class;
                    color = *c;
                }
            }
            for ch in 0..3 {
                let noise = rng.gen_range(-0.04..0.04);
                image[(ch * h + y) * w + x] = (color[ch] + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut occluder: Option<(f64, f64, f64, f64)> = None;
    if rng.gen_bool(cfg.occlusion_prob) {
        let bw = rng.gen_range(8.0..16.0) * s;
        let bh = rng.gen_range(8.0..16.0) * s;
        let x0 = rng.gen_range((cx - 12.0 * s)..(cx + 12.0 * s - bw * 0.5));
        let y0 = rng.gen_range(neck.y..(hip_y + leg_len * 0.5));
        let color = random_color(&mut rng);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64, y as f64);
                if fx >= x0 && fx < x0 + bw && fy >= y0 && fy < y0 + bh {
                    labels[y * w + x] = BACKGROUND;
                    for ch in 0..3 {
                        image[(ch * h + y) * w + x] = color[ch] as f32;
                    }
                }
            }
        }
        occluder = Some((x0, y0, x0 + bw, y0 + bh));
    }

    let positions = [head, neck, wrists[0], wrists[1], ankles[0], ankles[1]];
    let joints = positions
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let (x, y) = (p.x.round() as i32, p.y.round() as i32);
            let inside = x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
            let hidden = occluder.is_some_and(|(x0, y0, x1, y1)| {
                (x as f64) >= x0 && (x as f64) < x1 && (y as f64) >= y0 && (y as f64) < y1
            });
            Joint { id, x, y, visible: inside && !hidden }
        })
        .collect();
    let joints = JointSet { joints };

    let labels = LabelMap::new([1, h, w], labels, NUM_CLASSES)?;
    let boundary = boundary_from_labels(&labels, cfg.connectivity);
    let heatmaps = joints_to_heatmaps(&joints, h, w, cfg.sigma);
    Ok(Sample { image: Tensor::new(&[3, h, w], image)?, labels, joints, boundary, heatmaps })
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[2]
    }

    /// Horizontal mirror with left/right classes and joints swapped.
    pub fn flipped(&self) -> Sample {
        let (h, w) = (self.height(), self.width());
        let mirror_plane = |t: &Tensor<f32>, channel_map: &dyn Fn(usize) -> usize| {
            let c = t.shape()[0];
            let src = t.data();
            let mut out = vec![0.0f32; src.len()];
            for ch in 0..c {
                let dst_ch = channel_map(ch);
                for y in 0..h {
                    for x in 0..w {
                        out[(dst_ch * h + y) * w + (w - 1 - x)] = src[(ch * h + y) * w + x];
                    }
                }
            }
            Tensor::new(t.shape(), out).expect("same shape")
        };
        let mirror_labels = |m: &LabelMap, remap: bool| {
            let mut out = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = m.get(0, y, x);
                    out[y * w + (w - 1 - x)] = if remap { mirror_class(v) } else { v };
                }
            }
            LabelMap::with_ignore([1, h, w], out, m.num_classes(), m.ignore_index()).expect("same domain")
        };
        let mut joints: Vec<Joint> = self
            .joints
            .joints
            .iter()
            .map(|j| Joint { id: mirror_joint(j.id), x: w as i32 - 1 - j.x, ..*j })
            .collect();
        joints.sort_by_key(|j| j.id);
        Sample {
            image: mirror_plane(&self.image, &|c| c),
            labels: mirror_labels(&self.labels, true),
            joints: JointSet { joints },
            boundary: mirror_labels(&self.boundary, false),
            heatmaps: mirror_plane(&self.heatmaps, &mirror_joint),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::new([1, h, w], data.to_vec(), NUM_CLASSES).unwrap()
    }

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(17, &cfg).unwrap(), generate_sample(17, &cfg).unwrap());
        assert_ne!(generate_sample(17, &cfg).unwrap(), generate_sample(18, &cfg).unwrap());
    }

    #[test]
    fn canonical_pose_left_arm_is_left() {
        let cfg = SynthConfig { pose_range: 0.0, occlusion_prob: 0.0, ..Default::default() };
        for seed in 0..10 {
            let s = generate_sample(seed, &cfg).unwrap();
            let centroid = |class: u8| {
                let (mut sum, mut n) = (0.0, 0.0);
                for y in 0..64 {
                    for x in 0..64 {
                        if s.labels.get(0, y, x) == class {
                            sum += x as f64;
                            n += 1.0;
                        }
                    }
                }
                assert!(n > 0.0, "class {class} missing");
                sum / n
            };
            assert!(centroid(LEFT_ARM) < centroid(RIGHT_ARM));
            assert!(centroid(LEFT_LEG) < centroid(RIGHT_LEG));
        }
    }

    #[test]
    fn rejects_small_images() {
        let cfg = SynthConfig { height: 16, ..Default::default() };
        assert!(generate_sample(0, &cfg).is_err());
    }

    #[test]
    fn boundary_of_constant_map_is_empty() {
        let b = boundary_from_labels(&map(3, 3, &[2; 9]), Connectivity::Four);
        assert!(b.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn boundary_of_half_planes() {
        #[rustfmt::skip]
        let labels = map(4, 4, &[
            1, 1, 2, 2,
            1, 1, 2, 2,
            1, 1, 2, 2,
            1, 1, 2, 2,
        ]);
        let b = boundary_from_labels(&labels, Connectivity::Four);
        for y in 0..4 {
            assert_eq!(
                (0..4).map(|x| b.get(0, y, x)).collect::<Vec<_>>(),
                vec![0, 1, 1, 0]
            );
        }
        assert_eq!(b, boundary_from_labels(&labels, Connectivity::Four));
    }

    #[test]
    fn eight_connectivity_marks_diagonals() {
        let labels = map(3, 3, &[1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let four = boundary_from_labels(&labels, Connectivity::Four);
        let eight = boundary_from_labels(&labels, Connectivity::Eight);
        assert_eq!(four.get(0, 1, 1), 0);
        assert_eq!(eight.get(0, 1, 1), 1);
    }

    #[test]
    fn heatmap_values() {
        let joints = JointSet {
            joints: vec![
                Joint { id: 0, x: 10, y: 12, visible: true },
                Joint { id: 1, x: 3, y: 3, visible: false },
            ],
        };
        let hm = joints_to_heatmaps(&joints, 32, 32, 2.0);
        assert_eq!(hm.at(&[0, 12, 10]), 1.0);
        assert!((hm.at(&[0, 12, 12]) as f64 - (-0.5f64).exp()).abs() < 1e-7);
        assert!(hm.data()[32 * 32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flip_swaps_sides_and_round_trips() {
        let s = generate_sample(5, &SynthConfig::default()).unwrap();
        let f = s.flipped();
        assert_eq!(f.flipped(), s);
        let w = s.width();
        for y in 0..s.height() {
            for x in 0..w {
                assert_eq!(f.labels.get(0, y, w - 1 - x), mirror_class(s.labels.get(0, y, x)));
            }
        }
        assert_eq!(f.boundary, boundary_from_labels(&f.labels, Connectivity::Four));
        assert_eq!(f.heatmaps, joints_to_heatmaps(&f.joints, s.height(), w, 2.0));
    }

    #[test]
    fn joints_csv_round_trip() {
        let s = generate_sample(9, &SynthConfig::default()).unwrap();
        let back = JointSet::from_csv(&s.joints.to_csv()).unwrap();
        assert_eq!(back, s.joints);
        assert!(JointSet::from_csv("joint_id,x,y,visible\n0,1,2,3\n").is_err());
    }
}
