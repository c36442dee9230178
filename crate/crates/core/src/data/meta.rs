//! JSON sidecar describing how a dataset file was generated, so evaluation
//! can rebuild the environment (bandit layout and goal, LQ oracle).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{encode_dataset, BanditSpec, LqOracle, LqSpec, OfflineDataset};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "lowercase")]
pub enum DatasetMeta {
    Bandit {
        spec: BanditSpec,
    },
    Lq {
        spec: LqSpec,
        /// Multiplier at which the recorded optimum was computed.
        eta: f64,
        optimum_mean: Vec<f64>,
        optimum_cov: Vec<Vec<f64>>,
    },
}

impl DatasetMeta {
    pub fn lq(oracle: &LqOracle, eta: f64) -> Result<Self> {
        let opt = oracle.optimum(eta)?;
        Ok(DatasetMeta::Lq {
            spec: oracle.spec().clone(),
            eta,
            optimum_mean: opt.mean.iter().copied().collect(),
            optimum_cov: (0..opt.cov.nrows()).map(|i| opt.cov.row(i).iter().copied().collect()).collect(),
        })
    }

    pub fn env_name(&self) -> &'static str {
        match self {
            DatasetMeta::Bandit { .. } => "bandit",
            DatasetMeta::Lq { .. } => "lq",
        }
    }
}

/// `<dataset>.meta.json`
pub fn meta_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn save_meta(meta: &DatasetMeta, dataset: &Path) -> Result<PathBuf> {
    let p = meta_path(dataset);
    std::fs::write(&p, serde_json::to_string_pretty(meta)?)?;
    Ok(p)
}

pub fn load_meta(dataset: &Path) -> Result<DatasetMeta> {
    Ok(serde_json::from_str(&std::fs::read_to_string(meta_path(dataset))?)?)
}

/// SHA-256 (hex) of the dataset's binary encoding.
pub fn dataset_hash(ds: &OfflineDataset) -> String {
    hex::encode(Sha256::digest(encode_dataset(ds)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_bandit_dataset, generate_lq_dataset};

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.dacd");
        let (_, oracle) = generate_lq_dataset(&LqSpec { n: 10, ..LqSpec::default() }).unwrap();
        let m = DatasetMeta::lq(&oracle, 1.0).unwrap();
        assert_eq!(save_meta(&m, &data).unwrap(), dir.path().join("d.dacd.meta.json"));
        assert_eq!(load_meta(&data).unwrap(), m);
        match m {
            DatasetMeta::Lq { optimum_mean, .. } => assert!((optimum_mean[0] - 0.5).abs() < 1e-12 && optimum_mean[1].abs() < 1e-12),
            _ => unreachable!(),
        }
        let b = DatasetMeta::Bandit { spec: BanditSpec::default() };
        let text = serde_json::to_string(&b).unwrap();
        assert!(text.starts_with("{\"env\":\"bandit\""));
    }

    #[test]
    fn hash_tracks_content() {
        let a = generate_bandit_dataset(&BanditSpec { n: 20, ..BanditSpec::default() }).unwrap();
        let b = generate_bandit_dataset(&BanditSpec { n: 20, seed: 1, ..BanditSpec::default() }).unwrap();
        assert_eq!(dataset_hash(&a), dataset_hash(&a.clone()));
        assert_ne!(dataset_hash(&a), dataset_hash(&b));
        assert_eq!(dataset_hash(&a).len(), 64);
    }
}
