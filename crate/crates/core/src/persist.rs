//! Single-file model bundles (`.hcx`).
//!
//! Layout: an ASCII line `HCX <version> <header bytes>`, a JSON header, then
//! little-endian `f64` sections in the order of the header's section table.
//! The header carries a SHA-256 digest over the header (with an empty hash
//! field) followed by the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{ClusterIndex, Preprocessor, Schema};
use crate::error::{Error, Result};
use crate::flow::{DensityThresholds, FlowConfig, FlowModel};
use crate::gradcore::{ParamStore, Tensor};
use crate::hypernet::{HyperConfig, HyperNetwork, RunningStats};
use crate::model::Model;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "HCX";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    hash: String,
    schema: Schema,
    preprocessor: Preprocessor,
    train_config: TrainConfig,
    hyper_config: HyperConfig,
    flow_config: FlowConfig,
    sections: Vec<Section>,
}

/// Summary returned by [`save_bundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub hash: String,
    pub sections: usize,
    pub bytes: usize,
}

fn sections_of(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (_, name, t) in model.hypernet.params.iter() {
        out.push((format!("theta/{name}"), t.clone()));
    }
    for (i, r) in model.hypernet.running.iter().enumerate() {
        out.push((format!("bn/{i}/mean"), Tensor::row_vector(&r.mean)));
        out.push((format!("bn/{i}/var"), Tensor::row_vector(&r.var)));
    }
    for (_, name, t) in model.flow.params.iter() {
        out.push((format!("phi/{name}"), t.clone()));
    }
    out.push((
        "thresholds/per_class".into(),
        Tensor::row_vector(&model.thresholds.per_class),
    ));
    out.push(("thresholds/global".into(), Tensor::scalar(model.thresholds.global)));
    for (c, t) in model.clusters.centers.iter().enumerate() {
        out.push((format!("clusters/{c}"), t.clone()));
    }
    out
}

fn digest(header: &Header, payload: &[u8]) -> String {
    let mut h = header.clone();
    h.hash.clear();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&h).expect("header serializes"));
    hasher.update(payload);
    hex::encode(hasher.finalize())
}

fn encode(model: &Model) -> (Header, Vec<u8>) {
    let sections = sections_of(model);
    let mut payload = Vec::new();
    for (_, t) in &sections {
        payload.extend(t.to_le_bytes());
    }
    let mut header = Header {
        version: FORMAT_VERSION,
        hash: String::new(),
        schema: model.schema.clone(),
        preprocessor: model.preprocessor.clone(),
        train_config: model.config.clone(),
        hyper_config: model.hypernet.config.clone(),
        flow_config: model.flow.config.clone(),
        sections: sections
            .iter()
            .map(|(name, t)| Section {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    header.hash = digest(&header, &payload);
    (header, payload)
}

/// Content digest of a model; independent of where it is stored.
pub fn hash_model(model: &Model) -> String {
    encode(model).0.hash
}

/// Serializes `model` into bundle bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let (header, payload) = encode(model);
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", json.len()).into_bytes();
    out.extend(json);
    out.extend(payload);
    out
}

pub fn save_bundle(model: &Model, path: impl AsRef<Path>) -> Result<BundleManifest> {
    let path = path.as_ref();
    let bytes = to_bytes(model);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let (header, _) = encode(model);
    Ok(BundleManifest {
        version: FORMAT_VERSION,
        hash: header.hash,
        sections: header.sections.len(),
        bytes: bytes.len(),
    })
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Parses bundle bytes, checking the version first and then the digest.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Bundle(m.to_string());
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing preamble"))?;
    let preamble = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("preamble is not text"))?;
    let parts: Vec<&str> = preamble.split(' ').collect();
    if parts.len() != 3 || parts[0] != MAGIC {
        return Err(bad("not an HCX bundle"));
    }
    let version: u32 = parts[1].parse().map_err(|_| bad("unreadable version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::BundleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len: usize = parts[2].parse().map_err(|_| bad("unreadable header length"))?;
    let start = nl + 1;
    let end = start.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| Error::Bundle(format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    let payload = &bytes[end..];
    let expected_len: usize = header.sections.iter().map(|s| s.rows * s.cols * 8).sum();
    if payload.len() != expected_len {
        return Err(Error::Bundle(format!(
            "payload has {} bytes, sections declare {expected_len}",
            payload.len()
        )));
    }
    let actual = digest(&header, payload);
    if actual != header.hash {
        return Err(Error::BundleHash {
            expected: header.hash,
            actual,
        });
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let n = s.rows * s.cols;
        let data = payload[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += 8 * n;
        tensors.push((s.name.as_str(), Tensor::from_vec(s.rows, s.cols, data)));
    }
    assemble(header.clone(), tensors)
}

fn assemble(header: Header, tensors: Vec<(&str, Tensor)>) -> Result<Model> {
    let mut theta = ParamStore::new();
    let mut phi = ParamStore::new();
    let mut bn: Vec<RunningStats> = Vec::new();
    let mut per_class = None;
    let mut global = None;
    let mut centers = Vec::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix("theta/") {
            theta.add(n, t);
        } else if let Some(n) = name.strip_prefix("phi/") {
            phi.add(n, t);
        } else if let Some(rest) = name.strip_prefix("bn/") {
            let (i, kind) = rest.split_once('/').ok_or_else(|| Error::Bundle(format!("section `{name}`")))?;
            let i: usize = i.parse().map_err(|_| Error::Bundle(format!("section `{name}`")))?;
            if bn.len() <= i {
                bn.resize(
                    i + 1,
                    RunningStats {
                        mean: Vec::new(),
                        var: Vec::new(),
                    },
                );
            }
            match kind {
                "mean" => bn[i].mean = t.into_vec(),
                "var" => bn[i].var = t.into_vec(),
                _ => return Err(Error::Bundle(format!("section `{name}`"))),
            }
        } else if name == "thresholds/per_class" {
            per_class = Some(t.into_vec());
        } else if name == "thresholds/global" {
            global = Some(t.item());
        } else if name.starts_with("clusters/") {
            centers.push(t);
        } else {
            return Err(Error::Bundle(format!("unknown section `{name}`")));
        }
    }
    let hidden = header.hyper_config.hidden;
    if bn.iter().any(|r| r.mean.len() != hidden || r.var.len() != hidden) {
        return Err(Error::Bundle("running statistics have the wrong width".into()));
    }
    let hypernet = HyperNetwork::from_parts(header.hyper_config, theta, bn)?;
    let flow = FlowModel::from_parts(header.flow_config, phi)?;
    let thresholds = DensityThresholds {
        per_class: per_class.ok_or_else(|| Error::Bundle("missing thresholds".into()))?,
        global: global.ok_or_else(|| Error::Bundle("missing global threshold".into()))?,
    };
    Ok(Model {
        schema: header.schema,
        preprocessor: header.preprocessor,
        hypernet,
        flow,
        thresholds,
        clusters: ClusterIndex { centers },
        config: header.train_config,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::{Column, DEFAULT_NOISE_SIGMA};

    pub(crate) fn tiny_model(seed: u64) -> Model {
        let schema = Schema::new(
            vec![Column::numeric("a"), Column::categorical("c", &["x", "y"])],
            "t",
            vec!["0".into(), "1".into()],
        )
        .unwrap();
        let preprocessor = Preprocessor {
            schema: schema.clone(),
            stats: vec![
                crate::dataio::ColumnStats::Numeric { mean: 0.1, std: 1.7 },
                crate::dataio::ColumnStats::Categorical {
                    vocabulary: vec!["x".into(), "y".into()],
                },
            ],
            noise_sigma: DEFAULT_NOISE_SIGMA,
        };
        let hc = HyperConfig {
            hidden: 8,
            blocks: 2,
            ..HyperConfig::new(3, 2)
        };
        let mut flow = FlowModel::new(FlowConfig::with_sizes(3, 2, 2, 4, 1), seed);
        for t in flow.params.values_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 1e-3 * i as f64);
        }
        Model {
            schema,
            preprocessor,
            hypernet: HyperNetwork::new(hc, seed),
            flow,
            thresholds: DensityThresholds {
                per_class: vec![-2.5, 0.1 + 0.2],
                global: -1.0 / 3.0,
            },
            clusters: ClusterIndex {
                centers: vec![Tensor::zeros(2, 3), Tensor::full(1, 3, 0.7)],
            },
            config: TrainConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny_model(1);
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.hypernet.params, m.hypernet.params);
        assert_eq!(back.hypernet.running, m.hypernet.running);
        assert_eq!(back.flow.params, m.flow.params);
        assert_eq!(back.thresholds, m.thresholds);
        assert_eq!(back.clusters, m.clusters);
        assert_eq!(back.preprocessor, m.preprocessor);
        assert_eq!(back.config, m.config);
        assert_eq!(hash_model(&back), hash_model(&m));
    }

    #[test]
    fn tampering_is_detected() {
        let m = tiny_model(2);
        let bytes = to_bytes(&m);
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("\"noise_sigma\":0.05").unwrap();
        let mut tampered = bytes.clone();
        tampered[pos + 17] = b'6';
        assert!(matches!(from_bytes(&tampered), Err(Error::BundleHash { .. })));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::BundleHash { .. })));
    }

    #[test]
    fn other_versions_are_rejected_before_hashing() {
        let bytes = to_bytes(&tiny_model(3));
        let mut v2 = b"HCX 2".to_vec();
        v2.extend_from_slice(&bytes[5..]);
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::BundleVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_is_a_clean_error() {
        let bytes = to_bytes(&tiny_model(4));
        for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn hash_is_sensitive_to_one_ulp() {
        let m = tiny_model(5);
        let mut n = m.clone();
        let t = n.hypernet.params.values_mut().next().unwrap();
        let v = t.data()[0];
        t.data_mut()[0] = f64::from_bits(v.to_bits() + 1);
        assert_ne!(hash_model(&m), hash_model(&n));
        assert_eq!(hash_model(&m), hash_model(&m.clone()));
    }

    #[test]
    fn file_round_trip_and_path_independence() {
        let m = tiny_model(6);
        let dir = tempfile::tempdir().unwrap();
        let a = save_bundle(&m, dir.path().join("a.hcx")).unwrap();
        let b = save_bundle(&m, dir.path().join("b.hcx")).unwrap();
        assert_eq!(a.hash, b.hash);
        let back = load_bundle(dir.path().join("a.hcx")).unwrap();
        let probe = Tensor::from_vec(16, 3, (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
        assert_eq!(back.predict_proba(&probe).unwrap(), m.predict_proba(&probe).unwrap());
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        assert_eq!(
            back.flow.log_prob(&probe, &labels).unwrap(),
            m.flow.log_prob(&probe, &labels).unwrap()
        );
        assert_eq!(hash_model(&load_bundle(dir.path().join("b.hcx")).unwrap()), a.hash);
    }
}
