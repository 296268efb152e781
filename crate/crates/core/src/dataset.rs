//! Dataset container, synthetic data generation, and the on-disk feature
//! format.
//!
//! On disk a dataset is one directory holding, per modality, a JSON sidecar
//! `{"n", "l", "d", "dtype": "f64le"}` next to a raw little-endian f64 array
//! file, plus `labels.bin` with n raw f64 labels.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missing::{Modality, ModalBundle};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Per-modality sequence length and feature width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalDims {
    pub len: [usize; 3],
    pub dim: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub bundles: Vec<ModalBundle>,
    pub dims: ModalDims,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Deterministic head/tail split: first `1 - test_fraction` of samples
    /// train, the rest evaluate.
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let n_train = self.len() - n_test;
        let (train, test) = self.bundles.split_at(n_train);
        (
            Dataset { bundles: train.to_vec(), dims: self.dims },
            Dataset { bundles: test.to_vec(), dims: self.dims },
        )
    }
}

/// Generator for planted-signal synthetic data: every modality is a linear
/// readout of one shared latent, tiled over time, plus i.i.d. noise; the
/// label is a clamped noisy linear functional of the same latent. The shared
/// latent guarantees positive cross-modal mutual information by construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub seq_len: [usize; 3],
    pub feat_dim: [usize; 3],
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_noise")]
    pub noise: [f64; 3],
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    /// Standard deviation of the raw label signal before clamping to [-3, 3].
    #[serde(default = "default_label_scale")]
    pub label_scale: f64,
}

fn default_latent_dim() -> usize {
    4
}
fn default_noise() -> [f64; 3] {
    [0.1, 0.1, 0.1]
}
fn default_label_noise() -> f64 {
    0.1
}
fn default_label_scale() -> f64 {
    2.0
}

impl SyntheticSpec {
    pub fn dims(&self) -> ModalDims {
        ModalDims { len: self.seq_len, dim: self.feat_dim }
    }
}

/// Draws a complete labelled dataset. Bit-identical for identical
/// (spec, seed).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let mut rng = seeded(seed, "synthetic");
    let k = spec.latent_dim;
    // Fixed per-dataset projection maps and label functional.
    let maps: Vec<Tensor> = (0..3)
        .map(|m| Tensor::randn(&mut rng, vec![spec.feat_dim[m], k], (1.0 / k as f64).sqrt()))
        .collect();
    let w: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * spec.label_scale / (k as f64).sqrt()
        })
        .collect();

    let mut bundles = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut feats: Vec<Tensor> = Vec::with_capacity(3);
        for m in 0..3 {
            let (l, d) = (spec.seq_len[m], spec.feat_dim[m]);
            let proj: Vec<f64> = (0..d)
                .map(|i| (0..k).map(|j| maps[m].at(i, j) * z[j]).sum())
                .collect();
            let mut data = Vec::with_capacity(l * d);
            for _ in 0..l {
                for p in proj.iter() {
                    let eps: f64 = rng.sample(StandardNormal);
                    data.push(p + spec.noise[m] * eps);
                }
            }
            feats.push(Tensor::from_vec(vec![l, d], data));
        }
        let nu: f64 = rng.sample(StandardNormal);
        let raw: f64 = w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>() + spec.label_noise * nu;
        let label = raw.clamp(-3.0, 3.0);
        bundles.push(ModalBundle::complete(
            [feats[0].clone(), feats[1].clone(), feats[2].clone()],
            label,
        ));
    }
    Dataset { bundles, dims: spec.dims() }
}

// ── Disk container ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    n: usize,
    l: usize,
    d: usize,
    dtype: String,
}

const MODALITY_FILES: [(&str, &str); 3] =
    [("audio.json", "audio.bin"), ("visual.json", "visual.bin"), ("text.json", "text.bin")];

fn write_f64le(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64le(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let expected_bytes = expect * 8;
    if bytes.len() != expected_bytes {
        return Err(Error::DataLoad(format!(
            "{}: expected {expected_bytes} bytes ({expect} f64 values), found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes the dataset into `dir` using the documented container layout.
pub fn save_features(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = dataset.len();
    for m in Modality::ALL {
        let (l, d) = (dataset.dims.len[m.index()], dataset.dims.dim[m.index()]);
        let sidecar = Sidecar { n, l, d, dtype: "f64le".into() };
        let (json_name, bin_name) = MODALITY_FILES[m.index()];
        fs::write(dir.join(json_name), serde_json::to_string_pretty(&sidecar).expect("json"))?;
        write_f64le(
            &dir.join(bin_name),
            dataset.bundles.iter().flat_map(|b| b.features[m.index()].data().iter().copied()),
        )?;
    }
    write_f64le(&dir.join("labels.bin"), dataset.bundles.iter().map(|b| b.label))?;
    Ok(())
}

/// Reads a dataset previously written by [`save_features`]. All samples are
/// complete by construction.
pub fn load_features(dir: &Path) -> Result<Dataset> {
    let mut sidecars = Vec::new();
    for (json_name, _) in MODALITY_FILES {
        let raw = fs::read_to_string(dir.join(json_name))?;
        let sc: Sidecar = serde_json::from_str(&raw)
            .map_err(|e| Error::DataLoad(format!("{json_name}: {e}")))?;
        if sc.dtype != "f64le" {
            return Err(Error::DataLoad(format!(
                "{json_name}: unsupported dtype '{}', expected 'f64le'",
                sc.dtype
            )));
        }
        sidecars.push(sc);
    }
    let n = sidecars[0].n;
    for (sc, (json_name, _)) in sidecars.iter().zip(MODALITY_FILES) {
        if sc.n != n {
            return Err(Error::DataLoad(format!(
                "sample count mismatch: audio.json has n={n}, {json_name} has n={}",
                sc.n
            )));
        }
    }

    let mut per_modality = Vec::new();
    for (sc, (_, bin_name)) in sidecars.iter().zip(MODALITY_FILES) {
        per_modality.push(read_f64le(&dir.join(bin_name), n * sc.l * sc.d)?);
    }
    let labels = read_f64le(&dir.join("labels.bin"), n)?;

    let dims = ModalDims {
        len: [sidecars[0].l, sidecars[1].l, sidecars[2].l],
        dim: [sidecars[0].d, sidecars[1].d, sidecars[2].d],
    };
    let mut bundles = Vec::with_capacity(n);
    for i in 0..n {
        let mut feats = Vec::with_capacity(3);
        for (m, flat) in per_modality.iter().enumerate() {
            let per = sidecars[m].l * sidecars[m].d;
            feats.push(Tensor::from_vec(
                vec![sidecars[m].l, sidecars[m].d],
                flat[i * per..(i + 1) * per].to_vec(),
            ));
        }
        bundles.push(ModalBundle::complete(
            [feats[0].clone(), feats[1].clone(), feats[2].clone()],
            labels[i],
        ));
    }
    Ok(Dataset { bundles, dims })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 12,
            seq_len: [4, 5, 6],
            feat_dim: [3, 2, 4],
            latent_dim: 3,
            noise: [0.1, 0.2, 0.05],
            label_noise: 0.1,
            label_scale: 2.0,
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_synthetic(&small_spec(), 9);
        let b = generate_synthetic(&small_spec(), 9);
        for (x, y) in a.bundles.iter().zip(&b.bundles) {
            assert_eq!(x.label.to_bits(), y.label.to_bits());
            for m in 0..3 {
                assert_eq!(x.features[m], y.features[m]);
            }
        }
    }

    #[test]
    fn zero_samples_is_fine() {
        let mut spec = small_spec();
        spec.n_samples = 0;
        let d = generate_synthetic(&spec, 1);
        assert!(d.is_empty());
    }

    #[test]
    fn labels_live_in_range() {
        let d = generate_synthetic(&small_spec(), 3);
        for b in &d.bundles {
            assert!((-3.0..=3.0).contains(&b.label));
        }
    }

    #[test]
    fn container_round_trip_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&small_spec(), 17);
        save_features(&d, tmp.path()).unwrap();
        let back = load_features(tmp.path()).unwrap();
        assert_eq!(back.dims, d.dims);
        for (x, y) in d.bundles.iter().zip(&back.bundles) {
            assert_eq!(x.label.to_bits(), y.label.to_bits());
            for m in 0..3 {
                assert_eq!(x.features[m], y.features[m]);
            }
        }
    }

    #[test]
    fn truncated_raw_file_names_byte_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&small_spec(), 17);
        save_features(&d, tmp.path()).unwrap();
        let bin = tmp.path().join("visual.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_features(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("expected 960 bytes"), "{err}");
        assert!(err.contains("found 952 bytes"), "{err}");
    }

    #[test]
    fn sidecar_count_mismatch_names_both_values() {
        let tmp = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&small_spec(), 17);
        save_features(&d, tmp.path()).unwrap();
        let sidecar = tmp.path().join("text.json");
        let fixed = fs::read_to_string(&sidecar).unwrap().replace("\"n\": 12", "\"n\": 13");
        fs::write(&sidecar, fixed).unwrap();
        let err = load_features(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("n=12"), "{err}");
        assert!(err.contains("n=13"), "{err}");
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let d = generate_synthetic(&small_spec(), 2);
        let (train, test) = d.split(0.25);
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 3);
    }
}
