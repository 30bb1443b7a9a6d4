//! Triplet batch construction and data provisioning.
//!
//! A triplet holds three utterances of one speaker: the first two from the
//! same session with the same augmentation tag, the third from a different
//! session with a different augmentation tag. Speakers and sessions that
//! cannot form such triplets are skipped and reported, not failed.
//!
//! Data comes either from a synthetic factor world with persisted ground
//! truth (speaker factors, session factors, mixing maps) or from
//! precomputed-embedding files produced by an external extractor.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_f64, stream_rng, Stream};

pub const EMBEDDINGS_FILE: &str = "embeddings.emb";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const EMB_MAGIC: &[u8; 4] = b"EMB1";

// ---------------------------------------------------------------------------
// Metadata
// ---------------------------------------------------------------------------

/// Per-utterance bookkeeping driving triplet construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub utt_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub augmentation_tag: String,
}

/// One training triplet, by utterance id. `u1` and `u2` share a session and
/// augmentation tag; `u3` is the same speaker from a different session with
/// a different tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletIndex {
    pub u1: String,
    pub u2: String,
    pub u3: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipEntry {
    pub speaker_id: String,
    pub session_id: Option<String>,
    pub reason: String,
}

/// Speakers/sessions that could not contribute triplets, with reasons.
#[derive(Debug, Clone, Default)]
pub struct SkipReport {
    pub entries: Vec<SkipEntry>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mentions_speaker(&self, speaker_id: &str) -> bool {
        self.entries.iter().any(|e| e.speaker_id == speaker_id)
    }
}

/// Checks that a session id never spans two speakers.
fn validate_session_ownership(metadata: &[UtteranceMeta]) -> Result<()> {
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for m in metadata {
        match owner.get(m.session_id.as_str()) {
            None => {
                owner.insert(&m.session_id, &m.speaker_id);
            }
            Some(&spk) if spk != m.speaker_id => {
                return Err(Error::Config(format!(
                    "session {} belongs to both speaker {} and speaker {}",
                    m.session_id, spk, m.speaker_id
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Builds one triplet per eligible (speaker, session) pair.
///
/// `u1` and `u2` are drawn without replacement from one same-tag group of
/// the session (draw order randomized so query/support roles rotate across
/// epochs); `u3` is drawn from the speaker's other sessions among utterances
/// with a different tag. Ineligible speakers and sessions land in the skip
/// report.
pub fn build_triplets(
    metadata: &[UtteranceMeta],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TripletIndex>, SkipReport)> {
    validate_session_ownership(metadata)?;

    // speaker -> session -> utterances, in deterministic sorted order
    let mut by_speaker: BTreeMap<&str, BTreeMap<&str, Vec<&UtteranceMeta>>> = BTreeMap::new();
    for m in metadata {
        by_speaker
            .entry(&m.speaker_id)
            .or_default()
            .entry(&m.session_id)
            .or_default()
            .push(m);
    }

    let mut triplets = Vec::new();
    let mut skips = SkipReport::default();
    for (&speaker, sessions) in &by_speaker {
        if sessions.len() < 2 {
            skips.entries.push(SkipEntry {
                speaker_id: speaker.to_string(),
                session_id: None,
                reason: "fewer than 2 sessions".into(),
            });
            continue;
        }
        for (&session, utts) in sessions {
            if utts.len() < 2 {
                skips.entries.push(SkipEntry {
                    speaker_id: speaker.to_string(),
                    session_id: Some(session.to_string()),
                    reason: "fewer than 2 utterances".into(),
                });
                continue;
            }
            let mut groups: BTreeMap<&str, Vec<&UtteranceMeta>> = BTreeMap::new();
            for &u in utts {
                groups.entry(&u.augmentation_tag).or_default().push(u);
            }
            let mut candidate_tags: Vec<&str> = groups
                .iter()
                .filter(|(_, g)| g.len() >= 2)
                .map(|(&t, _)| t)
                .collect();
            if candidate_tags.is_empty() {
                skips.entries.push(SkipEntry {
                    speaker_id: speaker.to_string(),
                    session_id: Some(session.to_string()),
                    reason: "no augmentation tag shared by 2 utterances".into(),
                });
                continue;
            }
            candidate_tags.shuffle(rng);
            let mut emitted = false;
            for tag in candidate_tags {
                let others: Vec<&UtteranceMeta> = sessions
                    .iter()
                    .filter(|(&s, _)| s != session)
                    .flat_map(|(_, us)| us.iter().copied())
                    .filter(|u| u.augmentation_tag != tag)
                    .collect();
                if others.is_empty() {
                    continue;
                }
                let group = &groups[tag];
                let i = rng.random_range(0..group.len());
                let mut j = rng.random_range(0..group.len() - 1);
                if j >= i {
                    j += 1;
                }
                let third = others[rng.random_range(0..others.len())];
                triplets.push(TripletIndex {
                    u1: group[i].utt_id.clone(),
                    u2: group[j].utt_id.clone(),
                    u3: third.utt_id.clone(),
                });
                emitted = true;
                break;
            }
            if !emitted {
                skips.entries.push(SkipEntry {
                    speaker_id: speaker.to_string(),
                    session_id: Some(session.to_string()),
                    reason: "no cross-session utterance with a different augmentation tag".into(),
                });
            }
        }
    }
    if triplets.is_empty() {
        return Err(Error::EmptyDataset(
            "no speaker has two sessions with compatible augmentation tags".into(),
        ));
    }
    Ok((triplets, skips))
}

// ---------------------------------------------------------------------------
// Synthetic factor world
// ---------------------------------------------------------------------------

/// Linear factor world standing in for a real corpus: per-speaker factors,
/// per-session environment factors, shared per-tag augmentation offsets, and
/// fixed random mixing maps into embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthWorld {
    pub n_speakers: usize,
    pub sessions_per_speaker: usize,
    pub utterances_per_session: usize,
    pub speaker_factor_dim: usize,
    pub env_factor_dim: usize,
    pub embedding_dim: usize,
    pub noise_sigma: f64,
    pub aug_sigma: f64,
    /// Number of distinct augmentation tags available overall.
    pub aug_pool_size: usize,
    /// Distinct tags used within one session.
    pub aug_tags_per_session: usize,
    /// Derived from the run seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthWorld {
    fn default() -> Self {
        SynthWorld {
            n_speakers: 50,
            sessions_per_speaker: 8,
            utterances_per_session: 4,
            speaker_factor_dim: 16,
            env_factor_dim: 16,
            embedding_dim: 64,
            noise_sigma: 0.05,
            aug_sigma: 1.0,
            aug_pool_size: 4,
            aug_tags_per_session: 2,
            seed: 0,
        }
    }
}

impl SynthWorld {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_speakers", self.n_speakers),
            ("sessions_per_speaker", self.sessions_per_speaker),
            ("utterances_per_session", self.utterances_per_session),
            ("speaker_factor_dim", self.speaker_factor_dim),
            ("env_factor_dim", self.env_factor_dim),
            ("embedding_dim", self.embedding_dim),
            ("aug_pool_size", self.aug_pool_size),
            ("aug_tags_per_session", self.aug_tags_per_session),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("world.{name} must be positive")));
            }
        }
        if self.aug_tags_per_session > self.aug_pool_size {
            return Err(Error::Config(format!(
                "world.aug_tags_per_session {} exceeds aug_pool_size {}",
                self.aug_tags_per_session, self.aug_pool_size
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("world.noise_sigma must be non-negative".into()));
        }
        if !(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0) {
            return Err(Error::Config("world.aug_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_utterances(&self) -> usize {
        self.n_speakers * self.sessions_per_speaker * self.utterances_per_session
    }
}

/// Everything the synthetic generator knows, persisted for probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub speaker_factor_dim: usize,
    pub env_factor_dim: usize,
    pub embedding_dim: usize,
    pub noise_sigma: f64,
    pub aug_sigma: f64,
    /// speaker_factor_dim x embedding_dim
    pub mixing_speaker: Vec<Vec<f64>>,
    /// env_factor_dim x embedding_dim
    pub mixing_env: Vec<Vec<f64>>,
    pub speaker_factors: BTreeMap<String, Vec<f64>>,
    pub session_factors: BTreeMap<String, Vec<f64>>,
    /// Keyed by `"<session_id>#<tag>"`.
    pub aug_offsets: BTreeMap<String, Vec<f64>>,
}

impl GroundTruth {
    /// Noiseless component of an utterance's embedding, recomputed from the
    /// stored factors.
    pub fn clean_embedding(&self, meta: &UtteranceMeta) -> Result<Vec<f64>> {
        let s = self
            .speaker_factors
            .get(&meta.speaker_id)
            .ok_or_else(|| Error::Protocol(format!("no speaker factor for {}", meta.speaker_id)))?;
        let v = self
            .session_factors
            .get(&meta.session_id)
            .ok_or_else(|| Error::Protocol(format!("no session factor for {}", meta.session_id)))?;
        let key = format!("{}#{}", meta.session_id, meta.augmentation_tag);
        let offset = self
            .aug_offsets
            .get(&key)
            .ok_or_else(|| Error::Protocol(format!("no augmentation offset for {key}")))?;
        let mut e = vec![0.0; self.embedding_dim];
        for (i, &si) in s.iter().enumerate() {
            for (d, val) in e.iter_mut().enumerate() {
                *val += si * self.mixing_speaker[i][d];
            }
        }
        for (i, vi) in v.iter().enumerate() {
            let env_i = vi + offset[i];
            for (d, val) in e.iter_mut().enumerate() {
                *val += env_i * self.mixing_env[i][d];
            }
        }
        Ok(e)
    }
}

/// Generates the synthetic dataset. Identical config and seed always yield a
/// bit-identical dataset.
pub fn synth_generate(world: &SynthWorld) -> Result<Dataset> {
    world.validate()?;
    let mut rng = stream_rng(world.seed, Stream::World);
    let d = world.embedding_dim;
    let ds = world.speaker_factor_dim;
    let de = world.env_factor_dim;

    let draw_matrix = |rng: &mut ChaCha8Rng, rows: usize, scale: f64| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..d).map(|_| scale * normal_f64(rng)).collect())
            .collect()
    };
    // Column scale keeps each embedding coordinate at unit variance per factor block.
    let mixing_speaker = draw_matrix(&mut rng, ds, 1.0 / (ds as f64).sqrt());
    let mixing_env = draw_matrix(&mut rng, de, 1.0 / (de as f64).sqrt());

    let mut store = EmbeddingStore::new(d)?;
    let mut metadata = Vec::with_capacity(world.n_utterances());
    let mut speaker_factors = BTreeMap::new();
    let mut session_factors = BTreeMap::new();
    let mut aug_offsets = BTreeMap::new();

    let tag_pool: Vec<String> = (0..world.aug_pool_size).map(|p| format!("aug{p}")).collect();
    for k in 0..world.n_speakers {
        let speaker_id = format!("spk{k:03}");
        let s: Vec<f64> = (0..ds).map(|_| normal_f64(&mut rng)).collect();
        speaker_factors.insert(speaker_id.clone(), s.clone());
        for m in 0..world.sessions_per_speaker {
            let session_id = format!("{speaker_id}-ses{m:02}");
            let v: Vec<f64> = (0..de).map(|_| normal_f64(&mut rng)).collect();
            session_factors.insert(session_id.clone(), v.clone());

            let mut pool_idx: Vec<usize> = (0..world.aug_pool_size).collect();
            pool_idx.shuffle(&mut rng);
            let session_tags: Vec<&String> = pool_idx[..world.aug_tags_per_session]
                .iter()
                .map(|&i| &tag_pool[i])
                .collect();
            let offsets: Vec<Vec<f64>> = session_tags
                .iter()
                .map(|tag| {
                    let off: Vec<f64> = (0..de).map(|_| world.aug_sigma * normal_f64(&mut rng)).collect();
                    aug_offsets.insert(format!("{session_id}#{tag}"), off.clone());
                    off
                })
                .collect();

            for u in 0..world.utterances_per_session {
                let slot = u % session_tags.len();
                let tag = session_tags[slot];
                let offset = &offsets[slot];
                let utt_id = format!("{session_id}-utt{u:02}");
                let mut e = vec![0.0_f64; d];
                for (i, &si) in s.iter().enumerate() {
                    for (dst, w) in e.iter_mut().zip(&mixing_speaker[i]) {
                        *dst += si * w;
                    }
                }
                for i in 0..de {
                    let env_i = v[i] + offset[i];
                    for (dst, w) in e.iter_mut().zip(&mixing_env[i]) {
                        *dst += env_i * w;
                    }
                }
                for dst in e.iter_mut() {
                    *dst += world.noise_sigma * normal_f64(&mut rng);
                }
                store.insert(utt_id.clone(), e.iter().map(|&x| x as f32).collect())?;
                metadata.push(UtteranceMeta {
                    utt_id,
                    speaker_id: speaker_id.clone(),
                    session_id: session_id.clone(),
                    augmentation_tag: tag.clone(),
                });
            }
        }
    }

    let ground_truth = GroundTruth {
        speaker_factor_dim: ds,
        env_factor_dim: de,
        embedding_dim: d,
        noise_sigma: world.noise_sigma,
        aug_sigma: world.aug_sigma,
        mixing_speaker,
        mixing_env,
        speaker_factors,
        session_factors,
        aug_offsets,
    };
    Dataset::new(store, metadata, Some(ground_truth))
}

// ---------------------------------------------------------------------------
// Embedding store and its binary container
// ---------------------------------------------------------------------------

/// Utterance id to embedding map with a fixed dimension. Iteration order is
/// sorted by id, so serialization is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    map: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            map: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, utt_id: String, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::shape(
                format!("embedding for {utt_id}"),
                format!("{} values", self.dim),
                format!("{}", embedding.len()),
            ));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for {utt_id}")));
        }
        self.map.insert(utt_id, embedding);
        Ok(())
    }

    pub fn get(&self, utt_id: &str) -> Option<&[f32]> {
        self.map.get(utt_id).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f32>)> {
        self.map.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

/// Writes the binary embedding container: magic `EMB1`, little-endian u32
/// dimension and record count, then `(u16 id length, id bytes, dim f32)` per
/// record in sorted id order.
pub fn save_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (id, emb) in store.iter() {
        let id_bytes = id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("utterance id {id} exceeds {} bytes", u16::MAX),
            });
        }
        buf.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(id_bytes);
        for v in emb {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads the binary embedding container. When `expected_dim` is given, a
/// mismatching header is rejected before any record is read.
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingStore> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::format(&pstr, "file shorter than the 12-byte header"));
    }
    if &bytes[0..4] != EMB_MAGIC {
        return Err(Error::format(&pstr, "bad magic bytes (expected EMB1)"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::format(&pstr, "header declares dimension 0"));
    }
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::format(
                &pstr,
                format!("header declares dimension {dim} but {expected} was expected"),
            ));
        }
    }
    let mut store = EmbeddingStore::new(dim)?;
    let mut pos = 12usize;
    for record in 0..count {
        let truncated = |what: &str| {
            Error::format(
                &pstr,
                format!("truncated record {record} of {count}: {what}"),
            )
        };
        if pos + 2 > bytes.len() {
            return Err(truncated("missing id length"));
        }
        let id_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + id_len > bytes.len() {
            return Err(truncated("missing id bytes"));
        }
        let id = std::str::from_utf8(&bytes[pos..pos + id_len])
            .map_err(|_| Error::format(&pstr, format!("record {record}: id is not valid UTF-8")))?
            .to_string();
        pos += id_len;
        let payload = dim * 4;
        if pos + payload > bytes.len() {
            return Err(truncated("missing embedding payload"));
        }
        let mut emb = Vec::with_capacity(dim);
        for i in 0..dim {
            let off = pos + i * 4;
            emb.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        pos += payload;
        store.insert(id, emb)?;
    }
    if pos != bytes.len() {
        return Err(Error::format(
            &pstr,
            format!("{} trailing bytes after the last record", bytes.len() - pos),
        ));
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// Dataset: embeddings + metadata (+ optional ground truth)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dataset {
    pub embeddings: EmbeddingStore,
    pub metadata: Vec<UtteranceMeta>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(
        embeddings: EmbeddingStore,
        metadata: Vec<UtteranceMeta>,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self> {
        validate_session_ownership(&metadata)?;
        let mut seen = std::collections::BTreeSet::new();
        for m in &metadata {
            if !seen.insert(m.utt_id.as_str()) {
                return Err(Error::Config(format!("duplicate utterance id {}", m.utt_id)));
            }
            if embeddings.get(&m.utt_id).is_none() {
                return Err(Error::Config(format!(
                    "metadata references utterance {} with no embedding",
                    m.utt_id
                )));
            }
        }
        Ok(Dataset {
            embeddings,
            metadata,
            ground_truth,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn n_utterances(&self) -> usize {
        self.metadata.len()
    }

    /// Sorted unique speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .metadata
            .iter()
            .map(|m| m.speaker_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        s.sort();
        s
    }

    pub fn embedding(&self, utt_id: &str) -> Result<&[f32]> {
        self.embeddings
            .get(utt_id)
            .ok_or_else(|| Error::Protocol(format!("utterance {utt_id} not found in embedding store")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_embeddings(&self.embeddings, &dir.join(EMBEDDINGS_FILE))?;
        save_metadata(&self.metadata, &dir.join(METADATA_FILE))?;
        if let Some(gt) = &self.ground_truth {
            let json = serde_json::to_string_pretty(gt)?;
            fs::write(dir.join(GROUND_TRUTH_FILE), json)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let embeddings = load_embeddings(&dir.join(EMBEDDINGS_FILE), None)?;
        let metadata = load_metadata(&dir.join(METADATA_FILE))?;
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let ground_truth = if gt_path.exists() {
            let text = fs::read_to_string(&gt_path)?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Dataset::new(embeddings, metadata, ground_truth)
    }
}

/// JSON-lines metadata: one object per utterance.
pub fn save_metadata(metadata: &[UtteranceMeta], path: &Path) -> Result<()> {
    let mut out = String::new();
    for m in metadata {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_metadata(path: &Path) -> Result<Vec<UtteranceMeta>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: UtteranceMeta = serde_json::from_str(line).map_err(|e| {
            Error::format(
                path.display().to_string(),
                format!("line {}: {e}", lineno + 1),
            )
        })?;
        out.push(m);
    }
    Ok(out)
}
