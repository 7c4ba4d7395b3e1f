//! Checkpoint directories.
//!
//! ```text
//! <dir>/net.cfg       network configuration
//! <dir>/params.txt    one `name extent extent ...` line per tensor
//! <dir>/<name>.acet   tensor payloads
//! ```

use std::fs;
use std::path::Path;

use crate::acet;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const NET_CONFIG: &str = "net.cfg";
pub const PARAM_INDEX: &str = "params.txt";

pub fn save(dir: &Path, net: &NetworkConfig, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(NET_CONFIG), net.render())?;
    let mut index = String::new();
    for (name, t) in params.iter() {
        index.push_str(name);
        for e in t.shape() {
            index.push_str(&format!(" {e}"));
        }
        index.push('\n');
        acet::write(&dir.join(format!("{name}.acet")), t)?;
    }
    fs::write(dir.join(PARAM_INDEX), index)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(NetworkConfig, ParamStore)> {
    let net = NetworkConfig::load(&dir.join(NET_CONFIG))?;
    let index_path = dir.join(PARAM_INDEX);
    let index = fs::read_to_string(&index_path)?;
    let bad = |reason: String| Error::Format { path: index_path.display().to_string(), reason };
    let mut params = ParamStore::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let mut fields = line.split_whitespace();
        let name = fields.next().expect("non-empty line");
        let shape = fields
            .map(|f| f.parse::<usize>().map_err(|_| bad(format!("bad extent `{f}` for `{name}`"))))
            .collect::<Result<Vec<_>>>()?;
        let t = acet::read(&dir.join(format!("{name}.acet")))?;
        if t.shape() != shape.as_slice() {
            return Err(bad(format!("`{name}` is listed as {shape:?} but stored as {:?}", t.shape())));
        }
        params.insert(name, t);
    }
    Ok((net, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig { enable_gem: false, ..Default::default() };
        let params = build_network(&cfg).unwrap().init_params(11);
        save(dir.path(), &cfg, &params).unwrap();
        let (cfg2, params2) = load(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
    }

    #[test]
    fn index_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig::default();
        save(dir.path(), &cfg, &build_network(&cfg).unwrap().init_params(0)).unwrap();
        let index = fs::read_to_string(dir.path().join(PARAM_INDEX)).unwrap();
        let first = index.lines().next().unwrap().to_string();
        fs::write(dir.path().join(PARAM_INDEX), index.replacen(&first, &format!("{first} 9"), 1)).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
