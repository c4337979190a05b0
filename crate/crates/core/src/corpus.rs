//! On-disk corpora: a `corpus.json` index next to per-case volume files.
//!
//! Phantom corpora store clean volume, label map, and target mask per case.
//! External corpora store degraded/reference volume pairs whose degradation
//! is the data's own.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_recipe, DegradationRecipe, Interval, Stage};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::phantom::{generate_phantom, target_mask, PhantomCase, PhantomSpec};
use crate::stream::{self, domain};
use crate::volume::{load_labels, load_mask, load_volume, save_labels, save_mask, save_volume, Volume};

pub const CORPUS_INDEX: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub case_id: String,
    pub seed: u64,
    /// Volume stems relative to the corpus directory.
    pub clean: String,
    pub labels: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub degraded: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusIndex {
    Phantom {
        spec: PhantomSpec,
        target_radius: usize,
        cases: Vec<CaseEntry>,
    },
    External {
        generator: Option<ExternalSpec>,
        pairs: Vec<PairEntry>,
    },
}

/// Generator settings for the phantom stand-in of an external low-dose set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSpec {
    pub phantom: PhantomSpec,
    pub photons: Interval,
    pub read_sigma: Interval,
}

impl Default for ExternalSpec {
    fn default() -> Self {
        ExternalSpec {
            phantom: PhantomSpec::default(),
            photons: Interval { lo: 50.0, hi: 150.0 },
            read_sigma: Interval { lo: 0.01, hi: 0.02 },
        }
    }
}

/// Seeds with the top bit set never collide with ordinary corpus seeds.
pub const EXTERNAL_SEED_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPair {
    pub id: String,
    pub degraded: Volume,
    pub reference: Volume,
}

fn read_index(dir: &Path) -> Result<CorpusIndex> {
    let p = dir.join(CORPUS_INDEX);
    let text = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Header { path: p, message: e.to_string() })
}

fn write_index(dir: &Path, index: &CorpusIndex) -> Result<PathBuf> {
    let p = dir.join(CORPUS_INDEX);
    let mut text = serde_json::to_vec_pretty(index)?;
    text.push(b'\n');
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

/// Every file a volume stem expands to.
fn pair_files(dir: &Path, stem: &str) -> [PathBuf; 2] {
    let (h, r) = crate::volume::file_pair(&dir.join(stem));
    [h, r]
}

/// Writes the cases and returns every file written, index last.
pub fn save_phantom_corpus(dir: &Path, spec: &PhantomSpec, target_radius: usize, cases: &[PhantomCase]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for c in cases {
        let e = CaseEntry {
            case_id: c.case_id.clone(),
            seed: c.seed,
            clean: format!("{}_clean", c.case_id),
            labels: format!("{}_labels", c.case_id),
            target: format!("{}_target", c.case_id),
        };
        save_volume(&c.clean, &dir.join(&e.clean))?;
        save_labels(&c.labels, &dir.join(&e.labels))?;
        save_mask(&target_mask(c, target_radius), &dir.join(&e.target))?;
        for stem in [&e.clean, &e.labels, &e.target] {
            written.extend(pair_files(dir, stem));
        }
        entries.push(e);
    }
    let index = CorpusIndex::Phantom { spec: spec.clone(), target_radius, cases: entries };
    written.push(write_index(dir, &index)?);
    Ok(written)
}

pub fn load_phantom_corpus(dir: &Path) -> Result<Vec<PhantomCase>> {
    let CorpusIndex::Phantom { cases, .. } = read_index(dir)? else {
        return Err(Error::Corpus(format!("{} is not a phantom corpus", dir.display())));
    };
    cases
        .iter()
        .map(|e| {
            let (clean, _) = load_volume(&dir.join(&e.clean))?;
            let labels = load_labels(&dir.join(&e.labels))?;
            labels.check_matches(&clean)?;
            let target = load_mask(&dir.join(&e.target))?;
            if target.dim() != clean.dim() {
                return Err(Error::Shape(format!("{}: target mask shape differs from volume", e.case_id)));
            }
            Ok(PhantomCase { case_id: e.case_id.clone(), seed: e.seed, clean, labels, target })
        })
        .collect()
}

/// All files belonging to a corpus directory, index first, in index order.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![dir.join(CORPUS_INDEX)];
    match read_index(dir)? {
        CorpusIndex::Phantom { cases, .. } => {
            for e in &cases {
                for stem in [&e.clean, &e.labels, &e.target] {
                    out.extend(pair_files(dir, stem));
                }
            }
        }
        CorpusIndex::External { pairs, .. } => {
            for e in &pairs {
                for stem in [&e.degraded, &e.reference] {
                    out.extend(pair_files(dir, stem));
                }
            }
        }
    }
    Ok(out)
}

/// Noise-only recipe for external pair `index`.
pub fn external_recipe(spec: &ExternalSpec, index: usize) -> DegradationRecipe {
    let mut rng = stream::rng(stream::key(&[domain::EXTERNAL, spec.phantom.seed, index as u64]));
    let photons = rng.random_range(spec.photons.lo..=spec.photons.hi);
    let read_sigma = rng.random_range(spec.read_sigma.lo..=spec.read_sigma.hi);
    DegradationRecipe {
        stages: vec![Stage::PoissonGaussian { photons, read_sigma }],
        seed: stream::key(&[domain::EXTERNAL, spec.phantom.seed, index as u64, 1]),
        blur_level: None,
    }
}

pub fn generate_external_pairs(spec: &ExternalSpec, count: usize, exec: Exec) -> Result<Vec<ExternalPair>> {
    if !(spec.photons.lo > 0.0 && spec.photons.lo <= spec.photons.hi)
        || !(spec.read_sigma.lo >= 0.0 && spec.read_sigma.lo <= spec.read_sigma.hi)
    {
        return Err(Error::InvalidParam(format!("invalid external noise ranges {spec:?}")));
    }
    spec.phantom.validate()?;
    exec.try_map(count, |i| {
        let seed = (spec.phantom.seed ^ i as u64) | EXTERNAL_SEED_BIT;
        let case = generate_phantom(&spec.phantom.with_seed(seed))?;
        let degraded = apply_recipe(&case.clean, &external_recipe(spec, i));
        Ok(ExternalPair { id: format!("ext-{seed:016x}"), degraded, reference: case.clean })
    })
}

pub fn save_external_corpus(dir: &Path, generator: Option<&ExternalSpec>, pairs: &[ExternalPair]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for p in pairs {
        let e = PairEntry {
            id: p.id.clone(),
            degraded: format!("{}_degraded", p.id),
            reference: format!("{}_reference", p.id),
        };
        save_volume(&p.degraded, &dir.join(&e.degraded))?;
        save_volume(&p.reference, &dir.join(&e.reference))?;
        written.extend(pair_files(dir, &e.degraded));
        written.extend(pair_files(dir, &e.reference));
        entries.push(e);
    }
    let index = CorpusIndex::External { generator: generator.cloned(), pairs: entries };
    written.push(write_index(dir, &index)?);
    Ok(written)
}

pub fn load_external_corpus(dir: &Path) -> Result<Vec<ExternalPair>> {
    let CorpusIndex::External { pairs, .. } = read_index(dir)? else {
        return Err(Error::Corpus(format!("{} is not an external corpus", dir.display())));
    };
    pairs
        .iter()
        .map(|e| {
            let (degraded, _) = load_volume(&dir.join(&e.degraded))?;
            let (reference, _) = load_volume(&dir.join(&e.reference))?;
            if degraded.dim() != reference.dim() {
                return Err(Error::Shape(format!(
                    "{}: degraded {:?} vs reference {:?}",
                    e.id,
                    degraded.dim(),
                    reference.dim()
                )));
            }
            Ok(ExternalPair { id: e.id.clone(), degraded, reference })
        })
        .collect()
}
