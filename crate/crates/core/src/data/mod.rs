//! Paired draft/real datasets on disk, class partitions and exemplar draws.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! draft/{id}.png    design draft
//! real/{id}.png     real garment photo
//! labels.json       [{"id", "sleeve": "short"|"long", "bottom": "short"|"long", "class_id"}]
//! synth/{id}.warp   ground-truth warps and masks (synthetic sets only)
//! ```

pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{contract, Error, Result};
use crate::imagecore::{ImagePlane, ValueRange};
use crate::params::ParamStore;
use crate::sampler::WarpGrid;

pub use synth::{synth_pair, MannequinTemplate, SynthConfig, SynthPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Length {
    Short,
    Long,
}

/// Sleeve and bottom length; encoded as `sleeve * 2 + bottom` with
/// short = 0 and long = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GarmentLabel {
    pub sleeve: Length,
    pub bottom: Length,
}

impl GarmentLabel {
    pub fn encode(self) -> usize {
        (self.sleeve as usize) * 2 + self.bottom as usize
    }

    pub fn decode(code: usize) -> Result<Self> {
        contract!(code < 4, "label code {code} out of range 0..4");
        let len = |b| if b == 1 { Length::Long } else { Length::Short };
        Ok(GarmentLabel { sleeve: len(code / 2), bottom: len(code % 2) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub draft: ImagePlane,
    pub real: ImagePlane,
    pub label: GarmentLabel,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: String,
    pub sleeve: Length,
    pub bottom: Length,
    pub class_id: u32,
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.exists() {
        return Ok(BTreeSet::new());
    }
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn read_labels(root: &Path) -> Result<Vec<LabelRecord>> {
    let path = root.join("labels.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn label_map(records: Vec<LabelRecord>) -> Result<BTreeMap<String, LabelRecord>> {
    let mut map = BTreeMap::new();
    for r in records {
        if r.class_id == 0 {
            return Err(Error::Data(format!("sample `{}` has class_id 0; ids start at 1", r.id)));
        }
        if let Some(prev) = map.insert(r.id.clone(), r) {
            return Err(Error::Data(format!("duplicate id `{}` in labels.json", prev.id)));
        }
    }
    Ok(map)
}

/// Loads and validates every pair, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<PairedSample>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{}: not a dataset directory", root.display())));
    }
    let drafts = png_ids(&root.join("draft"))?;
    let reals = png_ids(&root.join("real"))?;
    if drafts.is_empty() && reals.is_empty() && !root.join("labels.json").exists() {
        log::warn!("{}: empty dataset", root.display());
        return Ok(Vec::new());
    }
    let unpaired: Vec<&String> = drafts.symmetric_difference(&reals).collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!("ids without a draft/real counterpart: {unpaired:?}")));
    }
    let labels = label_map(read_labels(root)?)?;
    let unlabeled: Vec<&String> = drafts.iter().filter(|id| !labels.contains_key(*id)).collect();
    if !unlabeled.is_empty() {
        return Err(Error::Data(format!("ids missing from labels.json: {unlabeled:?}")));
    }
    let orphans: Vec<&String> = labels.keys().filter(|id| !drafts.contains(*id)).collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!("labels.json lists ids without images: {orphans:?}")));
    }
    let mut out = Vec::with_capacity(drafts.len());
    let mut size: Option<[usize; 3]> = None;
    for id in &drafts {
        let draft = ImagePlane::load_png(&root.join("draft").join(format!("{id}.png")), ValueRange::SignedUnit)?;
        let real = ImagePlane::load_png(&root.join("real").join(format!("{id}.png")), ValueRange::SignedUnit)?;
        for (kind, plane) in [("draft", &draft), ("real", &real)] {
            let s = plane.shape();
            match size {
                None => size = Some(s),
                Some(expected) if expected != s => {
                    return Err(Error::Data(format!(
                        "{kind}/{id}.png is {}x{}, dataset resolution is {}x{}",
                        s[1], s[2], expected[1], expected[2]
                    )))
                }
                _ => {}
            }
        }
        let r = &labels[id];
        out.push(PairedSample {
            id: id.clone(),
            draft,
            real,
            label: GarmentLabel { sleeve: r.sleeve, bottom: r.bottom },
            class_id: r.class_id,
        });
    }
    Ok(out)
}

/// First `train_count` samples (in id order) for training, the rest for test.
pub fn split(samples: &[PairedSample], train_count: usize) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    contract!(
        train_count <= samples.len(),
        "train_count {train_count} exceeds dataset size {}",
        samples.len()
    );
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let test = sorted.split_off(train_count);
    Ok((sorted, test))
}

/// SHA-256 over sorted `(id, draft-file hash, real-file hash)` and labels.
pub fn dataset_digest(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let drafts = png_ids(&root.join("draft"))?;
    for id in &drafts {
        h.update(id.as_bytes());
        for kind in ["draft", "real"] {
            let p = root.join(kind).join(format!("{id}.png"));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            h.update(Sha256::digest(&bytes));
        }
    }
    let labels = root.join("labels.json");
    if labels.exists() {
        let bytes = fs::read(&labels).map_err(|e| Error::io(&labels, e))?;
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes samples in the on-disk layout.
pub fn write_dataset(root: &Path, samples: &[PairedSample]) -> Result<()> {
    for sub in ["draft", "real"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        s.draft.save_png(&root.join("draft").join(format!("{}.png", s.id)))?;
        s.real.save_png(&root.join("real").join(format!("{}.png", s.id)))?;
        records.push(LabelRecord {
            id: s.id.clone(),
            sleeve: s.label.sleeve,
            bottom: s.label.bottom,
            class_id: s.class_id,
        });
    }
    let path = root.join("labels.json");
    let text = serde_json::to_string_pretty(&records).expect("labels serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Ground truth stored next to a synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub real_to_draft: WarpGrid,
    pub draft_to_real: WarpGrid,
    pub draft_mask: ImagePlane,
    pub real_mask: ImagePlane,
}

fn truth_path(root: &Path, id: &str) -> PathBuf {
    root.join("synth").join(format!("{id}.warp"))
}

pub fn write_truth(root: &Path, pair: &SynthPair) -> Result<()> {
    let dir = root.join("synth");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = pair.real_mask.height();
    let m = pair.real_mask.width();
    let mut store = ParamStore::new();
    store.insert("real_to_draft", &[2, n, m], pair.real_to_draft.coords().to_vec(), false);
    store.insert("draft_to_real", &[2, n, m], pair.draft_to_real.coords().to_vec(), false);
    store.insert("draft_mask", &[1, n, m], pair.draft_mask.data().to_vec(), false);
    store.insert("real_mask", &[1, n, m], pair.real_mask.data().to_vec(), false);
    let meta = serde_json::to_value(&pair.params).expect("params serialize");
    checkpoint::save(&truth_path(root, &pair.sample.id), &meta, &store)
}

/// Ground truth for `id`, or `None` for non-synthetic samples.
pub fn read_truth(root: &Path, id: &str) -> Result<Option<SynthTruth>> {
    let path = truth_path(root, id);
    if !path.exists() {
        return Ok(None);
    }
    let a = checkpoint::load(&path)?;
    let get = |k: &str| {
        a.tensors.get(k).ok_or_else(|| Error::Data(format!("{}: missing `{k}`", path.display())))
    };
    let grid = |k: &str| -> Result<WarpGrid> {
        let e = get(k)?;
        WarpGrid::new(e.data.clone(), e.shape[1], e.shape[2])
    };
    let mask = |k: &str| -> Result<ImagePlane> {
        let e = get(k)?;
        ImagePlane::new(e.data.clone(), 1, e.shape[1], e.shape[2], ValueRange::Unit)
    };
    Ok(Some(SynthTruth {
        real_to_draft: grid("real_to_draft")?,
        draft_to_real: grid("draft_to_real")?,
        draft_mask: mask("draft_mask")?,
        real_mask: mask("real_mask")?,
    }))
}

/// Generates `cfg.count` pairs with ids `000000…` from `cfg.seed`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    use rand::SeedableRng;
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count).map(|k| synth_pair(cfg, &format!("{k:06}"), &mut rng)).collect()
}

/// Sample indices grouped by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    classes: BTreeMap<u32, Vec<usize>>,
}

impl ClassPartition {
    pub fn new(samples: &[PairedSample]) -> Self {
        let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            classes.entry(s.class_id).or_default().push(i);
        }
        ClassPartition { classes }
    }

    pub fn members(&self, class_id: u32) -> Option<&[usize]> {
        self.classes.get(&class_id).map(Vec::as_slice)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }
}

/// Uniform draw of a sample index from `class_id`, skipping `exclude`.
/// A class whose only member is excluded yields that member, with a warning.
pub fn select_exemplar<R: Rng>(
    partition: &ClassPartition,
    class_id: u32,
    exclude: Option<usize>,
    rng: &mut R,
) -> Result<usize> {
    let members = partition
        .members(class_id)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::Data(format!("class {class_id} has no samples")))?;
    let candidates: Vec<usize> = members.iter().copied().filter(|&i| Some(i) != exclude).collect();
    if candidates.is_empty() {
        log::warn!("class {class_id} has a single sample; using it as its own exemplar");
        return Ok(members[0]);
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}
