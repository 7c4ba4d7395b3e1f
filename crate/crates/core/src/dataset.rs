//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt                 one line per split: `<split> <seed> <seed> ...`
//! <root>/<split>/<seed>/image.acet    [3, H, W]
//! <root>/<split>/<seed>/labels.acet   [H, W]
//! <root>/<split>/<seed>/boundary.acet [H, W]
//! <root>/<split>/<seed>/heatmaps.acet [J, H, W]
//! <root>/<split>/<seed>/joints.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::acet;
use crate::data::{generate_sample, JointSet, Sample, SynthConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::LabelMap;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<u64>>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut fields = line.split_whitespace();
            let name = fields.next().expect("non-empty line").to_string();
            let seeds = fields
                .map(|f| {
                    f.parse::<u64>().map_err(|_| Error::Format { path: origin.display().to_string(), reason: format!("bad seed `{f}`") })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.insert(name, seeds);
        }
        Ok(Manifest { splits })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, seeds) in &self.splits {
            out.push_str(name);
            for s in seeds {
                out.push(' ');
                out.push_str(&s.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format { path: path.display().to_string(), reason: format!("cannot read manifest: {e}") })?;
        Manifest::parse(&text, &path)
    }

    /// Missing manifest reads as empty.
    pub fn load_or_default(root: &Path) -> Result<Self> {
        if root.join(MANIFEST).exists() {
            Manifest::load(root)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::write(root.join(MANIFEST), self.render())?;
        Ok(())
    }
}

pub fn sample_dir(root: &Path, split: &str, seed: u64) -> PathBuf {
    root.join(split).join(seed.to_string())
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [_, h, w] = s.labels.shape();
    acet::write(&dir.join("image.acet"), &s.image)?;
    acet::write(&dir.join("labels.acet"), &s.labels.to_tensor().reshaped(&[h, w])?)?;
    acet::write(&dir.join("boundary.acet"), &s.boundary.to_tensor().reshaped(&[h, w])?)?;
    acet::write(&dir.join("heatmaps.acet"), &s.heatmaps)?;
    fs::write(dir.join("joints.csv"), s.joints.to_csv())?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let format_err = |file: &str, reason: String| Error::Format { path: dir.join(file).display().to_string(), reason };
    let image = acet::read(&dir.join("image.acet"))?;
    let labels = LabelMap::from_tensor(&acet::read(&dir.join("labels.acet"))?, NUM_CLASSES)
        .map_err(|e| format_err("labels.acet", e.to_string()))?;
    let boundary = LabelMap::from_tensor(&acet::read(&dir.join("boundary.acet"))?, 2)
        .map_err(|e| format_err("boundary.acet", e.to_string()))?;
    let heatmaps = acet::read(&dir.join("heatmaps.acet"))?;
    let joints_path = dir.join("joints.csv");
    let joints = JointSet::from_csv(&fs::read_to_string(&joints_path)?)
        .map_err(|e| format_err("joints.csv", e.to_string()))?;
    let [_, h, w] = labels.shape();
    if image.shape() != [3, h, w] || boundary.shape() != labels.shape() || heatmaps.shape() != [joints.joints.len(), h, w] {
        return Err(format_err("", "tensor shapes disagree within sample".into()));
    }
    Ok(Sample { image, labels, joints, boundary, heatmaps })
}

/// Writes `count` samples with seeds `seed_base..seed_base + count` and
/// records them under `split` in the manifest.
pub fn generate_split(root: &Path, split: &str, count: usize, seed_base: u64, cfg: &SynthConfig) -> Result<Vec<u64>> {
    if split.is_empty() || split.contains(char::is_whitespace) || split.contains(['/', '\\']) {
        return Err(crate::error::config_err(format!("invalid split name `{split}`")));
    }
    fs::create_dir_all(root)?;
    let seeds: Vec<u64> = (seed_base..seed_base + count as u64).collect();
    for &seed in &seeds {
        write_sample(&sample_dir(root, split, seed), &generate_sample(seed, cfg)?)?;
    }
    let mut manifest = Manifest::load_or_default(root)?;
    manifest.splits.insert(split.to_string(), seeds.clone());
    manifest.save(root)?;
    Ok(seeds)
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(root)?;
    let seeds = manifest.splits.get(split).ok_or_else(|| Error::Format {
        path: root.join(MANIFEST).display().to_string(),
        reason: format!("split `{split}` not listed"),
    })?;
    seeds.iter().map(|&s| read_sample(&sample_dir(root, split, s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::default();
        m.splits.insert("train".into(), vec![0, 1, 2]);
        m.splits.insert("val".into(), vec![200]);
        let text = m.render();
        assert_eq!(text, "train 0 1 2\nval 200\n");
        assert_eq!(Manifest::parse(&text, Path::new("m")).unwrap(), m);
        assert!(Manifest::parse("train 0 x\n", Path::new("m")).is_err());
    }

    #[test]
    fn sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seeds = generate_split(dir.path(), "val", 2, 40, &SynthConfig::default()).unwrap();
        assert_eq!(seeds, vec![40, 41]);
        let loaded = load_split(dir.path(), "val").unwrap();
        assert_eq!(loaded[1], generate_sample(41, &SynthConfig::default()).unwrap());
        assert!(load_split(dir.path(), "train").is_err());
    }

    #[test]
    fn rejects_bad_split_names() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_split(dir.path(), "a b", 1, 0, &SynthConfig::default()).is_err());
    }
}
