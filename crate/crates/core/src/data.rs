//! Paired slide/transcriptomics samples, their on-disk layout, and bag sampling.
//!
//! A dataset directory holds `manifest.json` and one `sample_<id>.bin` per
//! patient. Sample files are little-endian:
//!
//! ```text
//! "MIRD" | version u32 | N_raw u32 | D_p u32 | K u32
//! features f32[N_raw * D_p] (row-major)
//! coords (i32 row, i32 col)[N_raw]
//! expression f32[K]
//! subtype i32 | survival time f64 | event u8
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 4] = b"MIRD";
pub const FORMAT_VERSION: u32 = 1;

/// Patch-level feature vectors of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureBag {
    pub slide_id: String,
    pub d_p: usize,
    /// Row-major `N_raw × d_p`.
    pub features: Vec<f32>,
    /// Grid position of each patch.
    pub coords: Vec<(i32, i32)>,
}

impl PatchFeatureBag {
    pub fn n_patches(&self) -> usize {
        self.coords.len()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.features[i * self.d_p..(i + 1) * self.d_p]
    }

    /// All patches as a `N_raw × d_p` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.n_patches(),
            self.d_p,
            self.features.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptomicsProfile {
    pub sample_id: String,
    pub gene_ids: Vec<String>,
    /// Log-normalized, per-gene standardized expression.
    pub values: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub bag: PatchFeatureBag,
    pub rna: TranscriptomicsProfile,
    pub subtype: usize,
    pub survival: SurvivalLabel,
}

impl PairedSample {
    pub fn id(&self) -> &str {
        &self.bag.slide_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub n_classes: usize,
    pub d_p: usize,
    pub k_genes: usize,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    n_samples: usize,
    n_classes: usize,
    d_p: usize,
    k_genes: usize,
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn id_is_file_safe(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn gene_ids(&self) -> &[String] {
        self.samples.first().map_or(&[], |s| &s.rna.gene_ids)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.subtype).collect()
    }

    pub fn survival(&self) -> Vec<SurvivalLabel> {
        self.samples.iter().map(|s| s.survival).collect()
    }

    /// Expression values as an `n × K` matrix.
    pub fn expression_matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.k_genes);
        for s in &self.samples {
            data.extend(s.rna.values.iter().map(|&v| v as f64));
        }
        Tensor::from_vec(self.len(), self.k_genes, data)
    }

    pub fn find(&self, id: &str) -> Option<&PairedSample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    /// Checks every structural invariant; errors name the offending sample.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Validation("n_classes must be at least 1".into()));
        }
        if self.k_genes == 0 || self.d_p == 0 {
            return Err(Error::Validation("d_p and k_genes must be at least 1".into()));
        }
        let panel = self.gene_ids();
        let unique: HashSet<&String> = panel.iter().collect();
        if unique.len() != panel.len() {
            return Err(Error::Validation("gene ids must be unique".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            let id = s.id();
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
            if !id_is_file_safe(id) {
                return Err(Error::Validation(format!("sample id `{id}` contains unsupported characters")));
            }
            if s.rna.sample_id != id {
                return Err(Error::Validation(format!(
                    "slide id `{id}` paired with transcriptomics sample `{}`",
                    s.rna.sample_id
                )));
            }
            let bag = &s.bag;
            if bag.n_patches() == 0 {
                return Err(Error::Validation(format!("sample `{id}` has an empty bag")));
            }
            if bag.d_p != self.d_p {
                return Err(Error::DimensionMismatch {
                    context: format!("patch features of `{id}`"),
                    expected: self.d_p,
                    found: bag.d_p,
                });
            }
            if bag.features.len() != bag.n_patches() * bag.d_p {
                return Err(Error::Validation(format!("sample `{id}` feature buffer does not match coords")));
            }
            if bag.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("sample `{id}` has non-finite patch features")));
            }
            let coords: HashSet<&(i32, i32)> = bag.coords.iter().collect();
            if coords.len() != bag.coords.len() {
                return Err(Error::Validation(format!("sample `{id}` has duplicated patch coords")));
            }
            if s.rna.values.len() != self.k_genes {
                return Err(Error::DimensionMismatch {
                    context: format!("expression of `{id}`"),
                    expected: self.k_genes,
                    found: s.rna.values.len(),
                });
            }
            if s.rna.gene_ids != panel {
                return Err(Error::Validation(format!("sample `{id}` uses a different gene panel")));
            }
            if s.rna.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("sample `{id}` has non-finite expression values")));
            }
            if s.subtype >= self.n_classes {
                return Err(Error::Validation(format!(
                    "sample `{id}` subtype {} outside [0, {})",
                    s.subtype, self.n_classes
                )));
            }
            if !(s.survival.time > 0.0 && s.survival.time.is_finite()) {
                return Err(Error::Validation(format!("sample `{id}` survival time must be positive")));
            }
        }
        Ok(())
    }
}

fn encode_sample(s: &PairedSample) -> Vec<u8> {
    let bag = &s.bag;
    let n = bag.n_patches();
    let k = s.rna.values.len();
    let mut buf = Vec::with_capacity(24 + 4 * bag.features.len() + 8 * n + 4 * k + 13);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.d_p as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    for v in &bag.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (r, c) in &bag.coords {
        buf.extend_from_slice(&r.to_le_bytes());
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for v in &s.rna.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(s.subtype as i32).to_le_bytes());
    buf.extend_from_slice(&s.survival.time.to_le_bytes());
    buf.push(u8::from(s.survival.event));
    buf
}

/// Little-endian byte cursor that reports truncation against a file path.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptHeader {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {} (needed {n} more)", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_sample(bytes: &[u8], path: &Path, id: &str, d_p: usize, genes: &[String]) -> Result<PairedSample> {
    let mut rd = Reader::new(bytes, path);
    let magic = rd.take(4)?;
    if magic != SAMPLE_MAGIC {
        return Err(Error::CorruptHeader { path: path.to_path_buf(), reason: "bad magic".into() });
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { expected: FORMAT_VERSION, found: version });
    }
    let n = rd.u32()? as usize;
    let file_dp = rd.u32()? as usize;
    let k = rd.u32()? as usize;
    if file_dp != d_p {
        return Err(Error::DimensionMismatch { context: format!("{} (d_p)", path.display()), expected: d_p, found: file_dp });
    }
    if k != genes.len() {
        return Err(Error::DimensionMismatch {
            context: format!("{} (k_genes)", path.display()),
            expected: genes.len(),
            found: k,
        });
    }
    let expected_len = n * d_p * 4 + n * 8 + k * 4 + 4 + 8 + 1;
    if rd.remaining() != expected_len {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("payload is {} bytes, header implies {expected_len}", rd.remaining()),
        });
    }
    let features = (0..n * d_p).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
    let coords = (0..n).map(|_| Ok((rd.i32()?, rd.i32()?))).collect::<Result<Vec<_>>>()?;
    let values = (0..k).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
    let subtype = rd.i32()?;
    let time = rd.f64()?;
    let event = rd.u8()?;
    if subtype < 0 {
        return Err(Error::Validation(format!("sample `{id}` has negative subtype")));
    }
    Ok(PairedSample {
        bag: PatchFeatureBag { slide_id: id.to_string(), d_p, features, coords },
        rna: TranscriptomicsProfile { sample_id: id.to_string(), gene_ids: genes.to_vec(), values },
        subtype: subtype as usize,
        survival: SurvivalLabel { time, event: event != 0 },
    })
}

pub fn sample_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("sample_{id}.bin"))
}

/// Writes `manifest.json` plus one binary file per sample.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n_samples: ds.len(),
        n_classes: ds.n_classes,
        d_p: ds.d_p,
        k_genes: ds.k_genes,
        gene_ids: ds.gene_ids().to_vec(),
        sample_ids: ds.samples.iter().map(|s| s.id().to_string()).collect(),
        metadata: ds.metadata.clone(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    for s in &ds.samples {
        let p = sample_path(dir, s.id());
        fs::write(&p, encode_sample(s)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version { expected: FORMAT_VERSION, found: manifest.version });
    }
    if manifest.sample_ids.len() != manifest.n_samples {
        return Err(Error::DimensionMismatch {
            context: "manifest sample_ids".into(),
            expected: manifest.n_samples,
            found: manifest.sample_ids.len(),
        });
    }
    if manifest.gene_ids.len() != manifest.k_genes {
        return Err(Error::DimensionMismatch {
            context: "manifest gene_ids".into(),
            expected: manifest.k_genes,
            found: manifest.gene_ids.len(),
        });
    }
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for id in &manifest.sample_ids {
        if !id_is_file_safe(id) {
            return Err(Error::Validation(format!("sample id `{id}` contains unsupported characters")));
        }
        let p = sample_path(dir, id);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        samples.push(decode_sample(&bytes, &p, id, manifest.d_p, &manifest.gene_ids)?);
    }
    let ds = Dataset {
        samples,
        n_classes: manifest.n_classes,
        d_p: manifest.d_p,
        k_genes: manifest.k_genes,
        metadata: manifest.metadata,
    };
    ds.validate()?;
    Ok(ds)
}

/// A fixed-size draw from a bag.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBag {
    /// `n_fixed × d_p`
    pub features: Tensor,
    /// Index into the original bag of each selected row.
    pub indices: Vec<usize>,
    pub coords: Vec<(i32, i32)>,
}

/// Uniformly samples `n_fixed` patches: without replacement when the bag is
/// large enough, with replacement otherwise.
pub fn sample_bag(bag: &PatchFeatureBag, n_fixed: usize, seed: u64) -> Result<SampledBag> {
    let n = bag.n_patches();
    if n == 0 {
        return Err(Error::Validation(format!("bag `{}` is empty", bag.slide_id)));
    }
    if n_fixed == 0 {
        return Err(Error::Config("n_fixed must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if n >= n_fixed {
        index::sample(&mut rng, n, n_fixed).into_vec()
    } else {
        (0..n_fixed).map(|_| rng.random_range(0..n)).collect()
    };
    let mut data = Vec::with_capacity(n_fixed * bag.d_p);
    for &i in &indices {
        data.extend(bag.patch(i).iter().map(|&v| v as f64));
    }
    Ok(SampledBag {
        features: Tensor::from_vec(n_fixed, bag.d_p, data),
        coords: indices.iter().map(|&i| bag.coords[i]).collect(),
        indices,
    })
}
