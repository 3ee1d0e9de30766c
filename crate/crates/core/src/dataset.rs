//! Family-disjoint pair datasets.
//!
//! A dataset is built in two steps. [`build_manifest`] filters and caps
//! families, splits them into train/val/test, and lists pair records:
//! every within-family pair per split, every cross-family pair for val and
//! test, and a repeated random sample of cross-family pairs for train.
//! [`materialize`] then computes (or imports) one BPPM per sequence, renders
//! and resizes each dot-plot once, and writes one composite PGM per record.
//!
//! All randomness comes from one 64-bit seed; each use draws from its own
//! sub-stream keyed by a purpose tag (see [`stream_rng`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bppm::{self, Bppm, BppmError, EnergyModel};
use crate::imaging::{self, GrayImage, Transfer};
use crate::seqio::{self, Family, RnaSequence, SeqError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("split counts {counts:?} do not sum to {families} families")]
    SplitCounts { counts: (usize, usize, usize), families: usize },
    #[error("need at least 2 families to sample different-family pairs, got {0}")]
    TooFewFamilies(usize),
    #[error("sequence {0} is referenced by the manifest but was not provided")]
    MissingSequence(String),
    #[error("BPPM for {key}: {msg}")]
    BadBppm { key: String, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Bppm(#[from] BppmError),
    #[error(transparent)]
    Image(#[from] imaging::ImageError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Same,
    Different,
}

impl Label {
    /// Network class index: 0 = different, 1 = same.
    pub fn class(self) -> usize {
        match self {
            Label::Different => 0,
            Label::Same => 1,
        }
    }

    pub fn from_class(class: usize) -> Self {
        if class == 1 {
            Label::Same
        } else {
            Label::Different
        }
    }
}

/// One composite image: `seq_a` fills the upper-right triangle, `seq_b` the
/// lower-left.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seq_a: String,
    pub seq_b: String,
    pub family_a: String,
    pub family_b: String,
    pub label: Label,
    pub split: Split,
    pub image_path: String,
}

impl PairRecord {
    fn new(a: &RnaSequence, b: &RnaSequence, split: Split) -> Self {
        let label = if a.family == b.family { Label::Same } else { Label::Different };
        Self {
            seq_a: a.id.clone(),
            seq_b: b.id.clone(),
            family_a: a.family.clone(),
            family_b: b.family.clone(),
            label,
            split,
            image_path: String::new(),
        }
    }

    pub fn key_a(&self) -> String {
        format!("{}/{}", self.family_a, self.seq_a)
    }

    pub fn key_b(&self) -> String {
        format!("{}/{}", self.family_b, self.seq_b)
    }
}

/// Family accessions per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn families(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, accession: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.families(s).iter().any(|a| a == accession))
    }
}

/// Derives an independent generator for one purpose from the run seed.
///
/// The seed, the tag bytes and the indices are folded through the SplitMix64
/// finalizer; the result seeds a ChaCha8 stream.
pub fn stream_rng(seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = mix(seed);
    for chunk in tag.as_bytes().chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h = mix(h ^ u64::from_le_bytes(buf));
    }
    h = mix(h ^ tag.len() as u64);
    for &i in indices {
        h = mix(h ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Drops members outside `[min_len, max_len]`, then families left with fewer
/// than `min_members`.
pub fn filter_families(families: Vec<Family>, min_len: usize, max_len: usize, min_members: usize) -> Vec<Family> {
    families
        .into_iter()
        .filter_map(|mut f| {
            f.members.retain(|m| (min_len..=max_len).contains(&m.len()));
            (f.members.len() >= min_members).then_some(f)
        })
        .collect()
}

/// Keeps a uniform random subset of `cap` members (sorted by id) when the
/// family is larger than `cap`.
pub fn truncate_family(mut family: Family, cap: usize, rng: &mut impl Rng) -> Family {
    assert!(cap >= 1, "cap must be at least 1");
    if family.members.len() > cap {
        let mut keep = index::sample(rng, family.members.len(), cap).into_vec();
        keep.sort_unstable();
        let members = std::mem::take(&mut family.members);
        family.members = keep.into_iter().map(|i| members[i].clone()).collect();
        family.members.sort_by(|a, b| a.id.cmp(&b.id));
    }
    family
}

/// `(floor(0.7 F), floor(0.1 F), rest)`.
pub fn default_split_counts(n_families: usize) -> (usize, usize, usize) {
    let train = n_families * 7 / 10;
    let val = n_families / 10;
    (train, val, n_families - train - val)
}

/// Uniform random partition of `accessions` into groups of the given sizes.
/// Each group is sorted.
pub fn split_families(
    accessions: &[String],
    counts: (usize, usize, usize),
    seed: u64,
    rng: &mut impl Rng,
) -> Result<SplitPlan, DatasetError> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != accessions.len() {
        return Err(DatasetError::SplitCounts {
            counts,
            families: accessions.len(),
        });
    }
    let mut shuffled = accessions.to_vec();
    shuffled.shuffle(rng);
    let mut take = |n: usize| {
        let mut part: Vec<String> = shuffled.drain(..n).collect();
        part.sort();
        part
    };
    Ok(SplitPlan {
        train: take(n_train),
        val: take(n_val),
        test: take(n_test),
        seed,
    })
}

/// Orders two sequences so the lexicographically smaller `(id, family)` comes
/// first.
fn ordered<'a>(x: &'a RnaSequence, y: &'a RnaSequence) -> (&'a RnaSequence, &'a RnaSequence) {
    if (&x.id, &x.family) <= (&y.id, &y.family) {
        (x, y)
    } else {
        (y, x)
    }
}

/// All unordered within-family pairs.
pub fn enumerate_same_pairs(families: &[Family], split: Split) -> Vec<PairRecord> {
    let mut out = Vec::new();
    for f in families {
        for (i, x) in f.members.iter().enumerate() {
            for y in &f.members[i + 1..] {
                let (a, b) = ordered(x, y);
                out.push(PairRecord::new(a, b, split));
            }
        }
    }
    out
}

/// All unordered cross-family pairs.
pub fn enumerate_diff_pairs_exhaustive(families: &[Family], split: Split) -> Vec<PairRecord> {
    let mut out = Vec::new();
    for (i, f) in families.iter().enumerate() {
        for g in &families[i + 1..] {
            for x in &f.members {
                for y in &g.members {
                    let (a, b) = ordered(x, y);
                    out.push(PairRecord::new(a, b, split));
                }
            }
        }
    }
    out
}

/// Repeated anchor sampling: in each repetition every family draws one anchor
/// member, which is paired with a freshly drawn member of every other family.
/// Yields `F * (F - 1) * reps` records; the anchor is `seq_a`.
pub fn sample_diff_pairs_train(
    families: &[Family],
    reps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairRecord>, DatasetError> {
    let n = families.len();
    if n < 2 {
        return Err(DatasetError::TooFewFamilies(n));
    }
    let mut out = Vec::with_capacity(n * (n - 1) * reps);
    for _ in 0..reps {
        for (fi, f) in families.iter().enumerate() {
            let anchor = &f.members[rng.random_range(0..f.members.len())];
            for (gi, g) in families.iter().enumerate() {
                if gi == fi {
                    continue;
                }
                let partner = &g.members[rng.random_range(0..g.members.len())];
                out.push(PairRecord::new(anchor, partner, Split::Train));
            }
        }
    }
    Ok(out)
}

/// Random families for experiments: each family has a uniform random ancestor
/// of length `seq_len`, and each member resamples every ancestor position
/// uniformly from `ACGU` with probability `mutation_rate`.
pub fn synth_families(
    n_families: usize,
    members_per_family: usize,
    seq_len: usize,
    mutation_rate: f64,
    rng: &mut impl Rng,
) -> Vec<Family> {
    assert!((0.0..=1.0).contains(&mutation_rate), "mutation rate must be in [0, 1]");
    const ALPHABET: &[u8; 4] = b"ACGU";
    (0..n_families)
        .map(|f| {
            let accession = format!("SYN{f:03}");
            let ancestor: Vec<u8> = (0..seq_len).map(|_| ALPHABET[rng.random_range(0..4)]).collect();
            let members = (0..members_per_family)
                .map(|m| {
                    let residues: String = ancestor
                        .iter()
                        .map(|&c| {
                            if rng.random::<f64>() < mutation_rate {
                                ALPHABET[rng.random_range(0..4)] as char
                            } else {
                                c as char
                            }
                        })
                        .collect();
                    RnaSequence::new(format!("m{m:03}"), accession.clone(), &residues).unwrap()
                })
                .collect();
            Family { accession, members }
        })
        .collect()
}

/// Options for [`build_manifest`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub min_members: usize,
    pub cap: usize,
    /// Explicit `(train, val, test)` family counts; `None` uses
    /// [`default_split_counts`].
    pub split: Option<(usize, usize, usize)>,
    pub reps: usize,
    pub seed: u64,
    pub image_side: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            min_len: 200,
            max_len: 260,
            min_members: 2,
            cap: 30,
            split: None,
            reps: 20,
            seed: 7,
            image_side: 64,
        }
    }
}

/// Header line of the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub plan: SplitPlan,
    pub seed: u64,
    pub image_side: usize,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.records_in(split).filter(|r| r.label == label).count()
    }

    /// JSON lines: the header, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).unwrap();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, e: serde_json::Error| DatasetError::Manifest {
            line: line + 1,
            msg: e.to_string(),
        };
        let (n, first) = lines.next().ok_or(DatasetError::Manifest {
            line: 1,
            msg: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| bad(n, e))?;
        let records = lines
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| bad(n, e)))
            .collect::<Result<_, _>>()?;
        let manifest = Self { header, records };
        manifest.check()?;
        Ok(manifest)
    }

    /// Checks label consistency and that every record's families belong to
    /// the record's split.
    pub fn check(&self) -> Result<(), DatasetError> {
        let plan = &self.header.plan;
        let mut seen = BTreeSet::new();
        for s in Split::ALL {
            for acc in plan.families(s) {
                if !seen.insert(acc) {
                    return Err(DatasetError::Config(format!("family {acc} assigned to more than one split")));
                }
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            let fail = |msg: String| DatasetError::Manifest { line: i + 2, msg };
            if (r.label == Label::Same) != (r.family_a == r.family_b) {
                return Err(fail("label disagrees with families".into()));
            }
            if r.label == Label::Same && r.seq_a == r.seq_b {
                return Err(fail("same-family record pairs a sequence with itself".into()));
            }
            for fam in [&r.family_a, &r.family_b] {
                if plan.split_of(fam) != Some(r.split) {
                    return Err(fail(format!("family {fam} is not in split {}", r.split.as_str())));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut text = String::new();
        for line in io::BufReader::new(file).lines() {
            text.push_str(&line.map_err(io_err(path))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

/// Filters, caps and splits `families`, then lists the pair records. Returns
/// the manifest (without image paths) and the selected families.
pub fn build_manifest(
    families: Vec<Family>,
    cfg: &DatasetConfig,
    model: &EnergyModel,
) -> Result<(DatasetManifest, Vec<Family>), DatasetError> {
    if cfg.cap == 0 || cfg.image_side == 0 {
        return Err(DatasetError::Config("cap and image side must be positive".into()));
    }
    let mut families = filter_families(families, cfg.min_len, cfg.max_len, cfg.min_members);
    families.sort_by(|a, b| a.accession.cmp(&b.accession));
    let families: Vec<Family> = families
        .into_iter()
        .enumerate()
        .map(|(i, f)| truncate_family(f, cfg.cap, &mut stream_rng(cfg.seed, "truncate", &[i as u64])))
        .collect();
    let accessions: Vec<String> = families.iter().map(|f| f.accession.clone()).collect();
    let counts = cfg.split.unwrap_or_else(|| default_split_counts(accessions.len()));
    let plan = split_families(&accessions, counts, cfg.seed, &mut stream_rng(cfg.seed, "split", &[]))?;

    let by_acc: BTreeMap<&str, &Family> = families.iter().map(|f| (f.accession.as_str(), f)).collect();
    let mut records = Vec::new();
    for split in Split::ALL {
        let members: Vec<Family> = plan
            .families(split)
            .iter()
            .map(|a| by_acc[a.as_str()].clone())
            .collect();
        records.extend(enumerate_same_pairs(&members, split));
        match split {
            Split::Train if members.len() >= 2 => {
                records.extend(sample_diff_pairs_train(
                    &members,
                    cfg.reps,
                    &mut stream_rng(cfg.seed, "train-diff", &[]),
                )?);
            }
            Split::Train => {}
            _ => records.extend(enumerate_diff_pairs_exhaustive(&members, split)),
        }
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            plan,
            seed: cfg.seed,
            image_side: cfg.image_side,
            model_fingerprint: model.fingerprint(),
        },
        records,
    };
    manifest.check()?;
    Ok((manifest, families))
}

/// File-name stem for a sequence key (`family/id`). The first `/` becomes
/// `__`; any other character outside `[A-Za-z0-9._-]` becomes `_`, and then a
/// hash of the key is appended so distinct keys keep distinct names.
pub fn file_stem(key: &str) -> String {
    let (family, id) = key.split_once('/').unwrap_or(("", key));
    let safe = |c: char| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_');
    let clean = |s: &str| s.chars().map(|c| if safe(c) { c } else { '_' }).collect::<String>();
    let stem = format!("{}__{}", clean(family), clean(id));
    if family.chars().chain(id.chars()).all(safe) {
        return stem;
    }
    let hash = key
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    format!("{stem}-{hash:016x}")
}

/// Where BPPMs come from during [`materialize`].
#[derive(Debug, Clone, PartialEq)]
pub enum BppmSource {
    /// Compute with the energy model, caching under `<out>/bppm/`.
    Compute { model: EnergyModel, prune: Option<f64> },
    /// Read `<dir>/<stem>.bppm` files produced elsewhere.
    Import(PathBuf),
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn load_bppm(path: &Path, key: &str, n: usize) -> Result<Option<Bppm>, DatasetError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    let b = Bppm::from_text(&text)?;
    if b.n() != n {
        return Err(DatasetError::BadBppm {
            key: key.to_string(),
            msg: format!("matrix size {} does not match sequence length {n}", b.n()),
        });
    }
    Ok(Some(b))
}

/// Returns the BPPM for `seq`, using the cache directory when possible.
fn bppm_for(seq: &RnaSequence, source: &BppmSource, cache_dir: &Path) -> Result<Bppm, DatasetError> {
    let key = seq.key();
    let name = format!("{}.bppm", file_stem(&key));
    match source {
        BppmSource::Import(dir) => load_bppm(&dir.join(&name), &key, seq.len())?.ok_or_else(|| DatasetError::BadBppm {
            key,
            msg: format!("no {name} in {}", dir.display()),
        }),
        BppmSource::Compute { model, prune } => {
            let path = cache_dir.join(&name);
            if let Some(b) = load_bppm(&path, &key, seq.len())? {
                return Ok(b);
            }
            let t = prune.unwrap_or_else(|| bppm::default_prune_threshold(seq.len()));
            let b = bppm::compute_bppm(seq, model, t);
            write_atomic(&path, b.to_text().as_bytes())?;
            Ok(b)
        }
    }
}

/// Writes BPPMs, composite images, `sequences.fasta` and `manifest.jsonl`
/// under `out_dir`, and returns the manifest with image paths filled in
/// (relative to `out_dir`).
///
/// Computed BPPMs are cached in `<out_dir>/bppm/`; the cache is discarded if
/// it was built with a different energy model.
pub fn materialize(
    manifest: &DatasetManifest,
    sequences: &[RnaSequence],
    source: &BppmSource,
    transfer: Transfer,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    let side = manifest.header.image_side;
    let by_key: HashMap<String, &RnaSequence> = sequences.iter().map(|s| (s.key(), s)).collect();
    let mut needed = BTreeSet::new();
    for r in &manifest.records {
        needed.insert(r.key_a());
        needed.insert(r.key_b());
    }
    let needed: Vec<&RnaSequence> = needed
        .iter()
        .map(|k| by_key.get(k).copied().ok_or_else(|| DatasetError::MissingSequence(k.clone())))
        .collect::<Result<_, _>>()?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cache_dir = out_dir.join("bppm");
    let stamp = cache_dir.join("MODEL");
    let fingerprint = match source {
        BppmSource::Compute { model, prune } => format!("{} prune={prune:?}\n", model.fingerprint()),
        BppmSource::Import(dir) => format!("import {}\n", dir.display()),
    };
    if fs::read_to_string(&stamp).ok().as_deref() != Some(fingerprint.as_str()) && cache_dir.exists() {
        fs::remove_dir_all(&cache_dir).map_err(io_err(&cache_dir))?;
    }
    fs::create_dir_all(&cache_dir).map_err(io_err(&cache_dir))?;
    fs::write(&stamp, &fingerprint).map_err(io_err(&stamp))?;

    // one task per distinct sequence, so each cache file has a single writer
    let plots: HashMap<String, GrayImage> = needed
        .par_iter()
        .map(|seq| {
            let b = bppm_for(seq, source, &cache_dir)?;
            let img = imaging::resize_bilinear(&imaging::bppm_to_image_with(&b, transfer), side);
            Ok((seq.key(), img))
        })
        .collect::<Result<_, DatasetError>>()?;

    let mut out = manifest.clone();
    for split in Split::ALL {
        let dir = out_dir.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut per_split = [0usize; 3];
    for r in &mut out.records {
        let idx = &mut per_split[r.split as usize];
        r.image_path = format!("images/{}/{:07}.pgm", r.split.as_str(), *idx);
        *idx += 1;
    }
    out.records.par_iter().try_for_each(|r| {
        let img = imaging::compose_pair(&plots[&r.key_a()], &plots[&r.key_b()])?;
        let path = out_dir.join(&r.image_path);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(&imaging::write_pgm(&img)).map_err(io_err(&path))
    })?;

    let mut used: Vec<RnaSequence> = needed.into_iter().cloned().collect();
    used.sort_by_key(|s| s.key());
    let fasta = out_dir.join("sequences.fasta");
    fs::write(&fasta, seqio::serialize_fasta(&used)).map_err(io_err(&fasta))?;
    out.write(&out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn family(acc: &str, lens: &[usize]) -> Family {
        let members = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| RnaSequence::new(format!("s{i:02}"), acc, &"A".repeat(l)).unwrap())
            .collect();
        Family::new(acc, members).unwrap()
    }

    fn families(sizes: &[usize]) -> Vec<Family> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &m)| family(&format!("F{i:03}"), &vec![10; m]))
            .collect()
    }

    fn choose2(m: usize) -> usize {
        m * m.saturating_sub(1) / 2
    }

    #[test]
    fn filter_examples() {
        let kept = filter_families(vec![family("A", &[210, 255, 300]), family("B", &[100, 150])], 200, 260, 2);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].members.len(), 2);
        assert!(kept[0].members.iter().all(|m| (200..=260).contains(&m.len())));
    }

    #[test]
    fn truncate_examples() {
        let big = families(&[50]).remove(0);
        let mut rng = stream_rng(1, "t", &[]);
        let t = truncate_family(big.clone(), 30, &mut rng);
        assert_eq!(t.members.len(), 30);
        assert!(t.members.iter().all(|m| big.members.contains(m)));
        assert!(t.members.windows(2).all(|w| w[0].id < w[1].id));
        let again = truncate_family(big.clone(), 30, &mut stream_rng(1, "t", &[]));
        assert_eq!(t, again);
        let small = families(&[12]).remove(0);
        assert_eq!(truncate_family(small.clone(), 30, &mut rng), small);
    }

    #[test]
    fn split_examples() {
        assert_eq!(default_split_counts(10), (7, 1, 2));
        assert_eq!(default_split_counts(168), (117, 16, 35));
        let accs: Vec<String> = (0..168).map(|i| format!("RF{i:05}")).collect();
        let plan = split_families(&accs, (121, 19, 28), 7, &mut stream_rng(7, "split", &[])).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (121, 19, 28));
        let mut all: Vec<_> = plan.train.iter().chain(&plan.val).chain(&plan.test).cloned().collect();
        all.sort();
        assert_eq!(all, accs);
        assert!(matches!(
            split_families(&accs, (100, 19, 28), 7, &mut stream_rng(7, "s", &[])),
            Err(DatasetError::SplitCounts { .. })
        ));
    }

    #[test]
    fn pair_count_examples() {
        assert_eq!(enumerate_same_pairs(&families(&[30]), Split::Train).len(), 435);
        assert_eq!(enumerate_same_pairs(&families(&[2]), Split::Train).len(), 1);
        assert_eq!(enumerate_same_pairs(&families(&[3, 4]), Split::Train).len(), 9);
        assert_eq!(enumerate_diff_pairs_exhaustive(&families(&[3, 4]), Split::Val).len(), 12);
        assert_eq!(enumerate_diff_pairs_exhaustive(&families(&[2, 2, 2]), Split::Val).len(), 12);
        assert!(enumerate_diff_pairs_exhaustive(&families(&[5]), Split::Val).is_empty());
    }

    #[test]
    fn sampled_train_pairs() {
        let fams = families(&[3, 5]);
        let recs = sample_diff_pairs_train(&fams, 1, &mut stream_rng(0, "x", &[])).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].family_a, "F000");
        assert_eq!(recs[1].family_a, "F001");
        let fams = families(&[2; 121]);
        let recs = sample_diff_pairs_train(&fams, 20, &mut stream_rng(3, "x", &[])).unwrap();
        assert_eq!(recs.len(), 290_400);
        let again = sample_diff_pairs_train(&fams, 20, &mut stream_rng(3, "x", &[])).unwrap();
        assert_eq!(recs, again);
        assert!(matches!(
            sample_diff_pairs_train(&families(&[4]), 1, &mut stream_rng(0, "x", &[])),
            Err(DatasetError::TooFewFamilies(1))
        ));
    }

    #[test]
    fn anchor_is_shared_within_a_repetition() {
        let fams = families(&[6, 6, 6, 6]);
        let recs = sample_diff_pairs_train(&fams, 3, &mut stream_rng(9, "x", &[])).unwrap();
        for chunk in recs.chunks(3) {
            assert!(chunk.iter().all(|r| r.seq_a == chunk[0].seq_a && r.family_a == chunk[0].family_a));
        }
    }

    #[test]
    fn enumerated_pairs_put_smaller_id_first() {
        let fams = families(&[4, 3]);
        for r in enumerate_same_pairs(&fams, Split::Test)
            .iter()
            .chain(&enumerate_diff_pairs_exhaustive(&fams, Split::Test))
        {
            assert!((&r.seq_a, &r.family_a) <= (&r.seq_b, &r.family_b));
        }
    }

    #[test]
    fn stream_rng_separates_purposes() {
        let draw = |mut r: ChaCha8Rng| r.random::<u64>();
        assert_eq!(draw(stream_rng(1, "a", &[2])), draw(stream_rng(1, "a", &[2])));
        assert_ne!(draw(stream_rng(1, "a", &[2])), draw(stream_rng(1, "a", &[3])));
        assert_ne!(draw(stream_rng(1, "a", &[])), draw(stream_rng(1, "b", &[])));
        assert_ne!(draw(stream_rng(1, "a", &[])), draw(stream_rng(2, "a", &[])));
    }

    #[test]
    fn synth_mutation_extremes() {
        let mut rng = stream_rng(5, "synth", &[]);
        let fams = synth_families(3, 4, 50, 0.0, &mut rng);
        for f in &fams {
            assert!(f.members.iter().all(|m| m.residues() == f.members[0].residues()));
            assert_eq!(f.members.len(), 4);
        }
        assert_ne!(fams[0].members[0].residues(), fams[1].members[0].residues());
        let fams = synth_families(1, 200, 40, 1.0, &mut rng);
        // iid uniform: each letter near 25% overall
        let total = 200.0 * 40.0;
        for letter in b"ACGU" {
            let count = fams[0].members.iter().flat_map(|m| m.as_bytes()).filter(|&&c| c == *letter).count();
            assert!((count as f64 / total - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn synth_expected_hamming_distance() {
        // a zero-rate run from a cloned generator reproduces the ancestor
        let (len, mu, draws) = (100usize, 0.3, 2000usize);
        let mut rng = stream_rng(11, "hamming", &[]);
        let mut total = 0usize;
        for _ in 0..draws {
            let mut r1 = rng.clone();
            let ancestor = synth_families(1, 1, len, 0.0, &mut r1).remove(0).members.remove(0);
            let member = synth_families(1, 1, len, mu, &mut rng).remove(0).members.remove(0);
            total += ancestor
                .as_bytes()
                .iter()
                .zip(member.as_bytes())
                .filter(|(a, b)| a != b)
                .count();
        }
        let p = mu * 0.75;
        let mean = total as f64 / draws as f64;
        let sigma = (len as f64 * p * (1.0 - p) / draws as f64).sqrt();
        assert!((mean - len as f64 * p).abs() <= 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn manifest_counts_and_round_trip() {
        let fams = families(&[3, 4, 5, 2, 6, 3, 4, 2, 5, 3]);
        let cfg = DatasetConfig {
            min_len: 1,
            max_len: 100,
            reps: 2,
            ..Default::default()
        };
        let (m, selected) = build_manifest(fams, &cfg, &EnergyModel::default()).unwrap();
        assert_eq!(selected.len(), 10);
        let sizes: BTreeMap<&str, usize> = selected.iter().map(|f| (f.accession.as_str(), f.len())).collect();
        let plan = &m.header.plan;
        assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (7, 1, 2));
        for split in Split::ALL {
            let ms: Vec<usize> = plan.families(split).iter().map(|a| sizes[a.as_str()]).collect();
            assert_eq!(m.count(split, Label::Same), ms.iter().map(|&x| choose2(x)).sum::<usize>());
            let diff = match split {
                Split::Train => ms.len() * (ms.len() - 1) * 2,
                _ => (0..ms.len()).flat_map(|i| (i + 1..ms.len()).map(move |j| (i, j))).map(|(i, j)| ms[i] * ms[j]).sum(),
            };
            assert_eq!(m.count(split, Label::Different), diff);
        }
        let text = m.to_jsonl();
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
        let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for key in ["seq_a", "seq_b", "family_a", "family_b", "label", "split", "image_path"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn manifest_check_rejects_cross_split_records() {
        let cfg = DatasetConfig {
            min_len: 1,
            max_len: 100,
            split: Some((2, 1, 1)),
            reps: 1,
            ..Default::default()
        };
        let (mut m, _) = build_manifest(families(&[2, 2, 2, 2]), &cfg, &EnergyModel::default()).unwrap();
        let test_fam = m.header.plan.test[0].clone();
        m.records[0].family_b = test_fam;
        m.records[0].label = Label::Different;
        assert!(m.check().is_err());
    }

    #[test]
    fn file_stems() {
        assert_eq!(file_stem("RF00005/s1"), "RF00005__s1");
        let odd = file_stem("RF1/AB12.1/3-40");
        assert!(odd.starts_with("RF1__AB12.1_3-40-"));
        assert_ne!(file_stem("a/b c"), file_stem("a/b_c"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn count_identities_and_disjointness(sizes in prop::collection::vec(2usize..7, 4..12), reps in 1usize..4, seed in any::<u64>()) {
            let cfg = DatasetConfig { min_len: 1, max_len: 100, reps, seed, ..Default::default() };
            let (m, selected) = build_manifest(families(&sizes), &cfg, &EnergyModel::default()).unwrap();
            let sizes: BTreeMap<&str, usize> = selected.iter().map(|f| (f.accession.as_str(), f.len())).collect();
            let plan = &m.header.plan;
            for split in Split::ALL {
                let ms: Vec<usize> = plan.families(split).iter().map(|a| sizes[a.as_str()]).collect();
                prop_assert_eq!(m.count(split, Label::Same), ms.iter().map(|&x| choose2(x)).sum::<usize>());
                if split == Split::Train {
                    let f = ms.len();
                    prop_assert_eq!(m.count(split, Label::Different), if f >= 2 { f * (f - 1) * reps } else { 0 });
                } else {
                    let total: usize = ms.iter().sum();
                    let cross = (total * total - ms.iter().map(|x| x * x).sum::<usize>()) / 2;
                    prop_assert_eq!(m.count(split, Label::Different), cross);
                }
            }
            let mut key_split: HashMap<String, Split> = HashMap::new();
            for r in &m.records {
                prop_assert_eq!(r.label == Label::Same, r.family_a == r.family_b);
                for k in [r.key_a(), r.key_b()] {
                    let prev = key_split.insert(k, r.split);
                    prop_assert!(prev.is_none() || prev == Some(r.split));
                }
            }
            let (again, _) = build_manifest(families(&sizes.values().copied().collect::<Vec<_>>()), &cfg, &EnergyModel::default()).unwrap();
            prop_assert_eq!(again.records.len(), m.records.len());
        }
    }
}
