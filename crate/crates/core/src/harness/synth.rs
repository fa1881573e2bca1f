//! Seeded synthetic benchmark where the answer to most questions can only
//! be read off an injected entity vector.
//!
//! Entity-keyed questions look like `who is in the picture of zxq...?`. The
//! alias is not segmentable into wordpieces, so without injection every
//! entity-keyed question tokenizes identically and image features are pure
//! noise. With injection, the aligned entity vector carries its class
//! centroid. Control questions name a class-specific cue word that is in
//! the vocabulary and are answerable from text alone.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::write_dataset;
use super::HarnessError;
use crate::embeddings::{EmbeddingTable, Namespace};
use crate::injector::{entity_lookup_key, END_TOKEN, SEPARATOR_TOKEN, START_TOKEN, UNKNOWN_TOKEN};
use crate::model::{RegionStore, VisualInput};
use crate::spans::{Answer, MetaEntity, QuestionRecord};

pub const ENTITY_TYPE: &str = "entity-keyed";
pub const CONTROL_TYPE: &str = "control";
pub const HOP_TYPE: &str = "1-hop";
pub const ALIAS_PREFIX: &str = "zx";

const TEMPLATE_WORDS: &[&str] = &["who", "is", "in", "the", "picture", "of"];
const CLASS_NAMES: &[&str] = &[
    "painter", "senator", "pilot", "singer", "chemist", "boxer", "poet", "banker", "dancer",
    "farmer", "judge", "sailor",
];
const CUES_PER_CLASS: usize = 2;
const CONSONANTS: &[u8] = b"bcdfghklmnprstvw";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_classes: usize,
    pub num_questions: usize,
    pub num_holdout: usize,
    pub num_test: usize,
    pub control_fraction: f64,
    pub wiki_dim: usize,
    pub wordpiece_dim: usize,
    pub num_regions: usize,
    pub region_feat_dim: usize,
    /// Std of entity vectors around their class centroid.
    pub entity_noise: f64,
    /// Std of the noise added to wordpiece vectors on top of the linear map.
    pub alignment_noise: f64,
    pub num_filler_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_entities: 64,
            num_classes: 8,
            num_questions: 1400,
            num_holdout: 200,
            num_test: 200,
            control_fraction: 0.2,
            wiki_dim: 16,
            wordpiece_dim: 16,
            num_regions: 4,
            region_feat_dim: 8,
            entity_noise: 0.35,
            alignment_noise: 0.05,
            num_filler_words: 48,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(format!("synthetic: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.num_entities < self.num_classes {
            return bad("num_entities must be at least num_classes");
        }
        if self.num_holdout + self.num_test >= self.num_questions {
            return bad("num_holdout + num_test must leave training questions");
        }
        if !(0.0..=1.0).contains(&self.control_fraction) {
            return bad("control_fraction must be in [0, 1]");
        }
        if self.wiki_dim == 0
            || self.wordpiece_dim == 0
            || self.num_regions == 0
            || self.region_feat_dim == 0
        {
            return bad("dimensions must be positive");
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        self.num_questions - self.num_holdout - self.num_test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub config: SynthConfig,
    pub records: Vec<QuestionRecord>,
    pub wiki: EmbeddingTable,
    pub wordpieces: EmbeddingTable,
    pub regions: RegionStore,
    /// Entity key → answer class.
    pub entity_classes: IndexMap<String, usize>,
    pub class_names: Vec<String>,
    /// Cue words per class.
    pub cues: Vec<Vec<String>>,
}

/// File locations of a written benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub dataset: PathBuf,
    pub wiki_embeddings: PathBuf,
    pub wordpiece_embeddings: PathBuf,
    pub region_index: PathBuf,
    pub region_bin: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dataset: dir.join("dataset.jsonl"),
            wiki_embeddings: dir.join("wiki.txt"),
            wordpiece_embeddings: dir.join("wordpieces.txt"),
            region_index: dir.join("regions.json"),
            region_bin: dir.join("regions.bin"),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let c = *CONSONANTS.choose(rng).expect("non-empty");
    let v = *VOWELS.choose(rng).expect("non-empty");
    format!("{}{}", c as char, v as char)
}

/// A fresh pseudo-word of `syllables` consonant-vowel pairs.
fn pseudo_word(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    syllables: usize,
    taken: &mut std::collections::HashSet<String>,
) -> String {
    loop {
        let mut w = prefix.to_string();
        for _ in 0..syllables {
            w.push_str(&syllable(rng));
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticBenchmark, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken: std::collections::HashSet<String> =
        TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();

    let class_names: Vec<String> = (0..cfg.num_classes)
        .map(|c| match CLASS_NAMES.get(c) {
            Some(n) => n.to_string(),
            None => pseudo_word(&mut rng, "", 3, &mut taken),
        })
        .collect();
    taken.extend(class_names.iter().cloned());
    let cues: Vec<Vec<String>> = (0..cfg.num_classes)
        .map(|_| {
            (0..CUES_PER_CLASS)
                .map(|_| pseudo_word(&mut rng, "", 3, &mut taken))
                .collect()
        })
        .collect();
    let fillers: Vec<String> = (0..cfg.num_filler_words)
        .map(|_| pseudo_word(&mut rng, "", 2, &mut taken))
        .collect();
    let aliases: Vec<String> = (0..cfg.num_entities)
        .map(|_| pseudo_word(&mut rng, ALIAS_PREFIX, 3, &mut taken))
        .collect();

    // wordpiece space = W* · wiki space + noise
    let w_star = Array2::from_shape_vec(
        (cfg.wordpiece_dim, cfg.wiki_dim),
        normal_vec(
            &mut rng,
            cfg.wordpiece_dim * cfg.wiki_dim,
            1.0 / (cfg.wiki_dim as f64).sqrt(),
        ),
    )
    .expect("shape");
    let project = |rng: &mut ChaCha8Rng, v: &[f64], noise: f64| -> Vec<f64> {
        let x = ndarray::ArrayView1::from(v);
        let y = w_star.dot(&x);
        let n = normal_vec(rng, cfg.wordpiece_dim, noise);
        y.iter().zip(n).map(|(a, b)| a + b).collect()
    };

    let mut wiki = EmbeddingTable::new(cfg.wiki_dim, true)?;
    let mut wordpieces = EmbeddingTable::new(cfg.wordpiece_dim, false)?;
    for special in [START_TOKEN, END_TOKEN, UNKNOWN_TOKEN, SEPARATOR_TOKEN, "?"] {
        let v = normal_vec(&mut rng, cfg.wiki_dim, 1.0);
        let p = project(&mut rng, &v, cfg.alignment_noise);
        wordpieces.insert(Namespace::Wordpiece, special, p)?;
    }
    let words = TEMPLATE_WORDS
        .iter()
        .map(|w| w.to_string())
        .chain(class_names.iter().cloned())
        .chain(cues.iter().flatten().cloned())
        .chain(fillers.iter().cloned());
    for w in words {
        let v = normal_vec(&mut rng, cfg.wiki_dim, 1.0);
        let p = project(&mut rng, &v, cfg.alignment_noise);
        wiki.insert(Namespace::Word, w.clone(), v)?;
        wordpieces.insert(Namespace::Wordpiece, w, p)?;
    }
    let centroids: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| normal_vec(&mut rng, cfg.wiki_dim, 1.0))
        .collect();
    let mut entity_classes = IndexMap::new();
    for (e, alias) in aliases.iter().enumerate() {
        let class = e % cfg.num_classes;
        let noise = normal_vec(&mut rng, cfg.wiki_dim, cfg.entity_noise);
        let v = centroids[class]
            .iter()
            .zip(noise)
            .map(|(c, n)| c + n)
            .collect();
        let key = entity_lookup_key(alias);
        wiki.insert(Namespace::Entity, key.clone(), v)?;
        entity_classes.insert(key, class);
    }

    let mut regions = RegionStore::new(cfg.region_feat_dim);
    let mut records = Vec::with_capacity(cfg.num_questions);
    let train = cfg.num_train();
    for i in 0..cfg.num_questions {
        let split = if i < train {
            "train"
        } else if i < train + cfg.num_holdout {
            "holdout"
        } else {
            "test"
        };
        let control = rng.random::<f64>() < cfg.control_fraction;
        let (question, class, types, meta) = if control {
            let class = rng.random_range(0..cfg.num_classes);
            let cue = cues[class].choose(&mut rng).expect("cues");
            (
                format!("who is in the picture of the {cue}?"),
                class,
                vec![CONTROL_TYPE.to_string()],
                vec![],
            )
        } else {
            let e = rng.random_range(0..cfg.num_entities);
            let alias = &aliases[e];
            (
                format!("who is in the picture of {alias}?"),
                e % cfg.num_classes,
                vec![HOP_TYPE.to_string(), ENTITY_TYPE.to_string()],
                vec![MetaEntity {
                    name: alias.clone(),
                    wiki_title: Some(entity_lookup_key(alias)),
                }],
            )
        };
        let image_ref = format!("synth-img-{i:05}");
        let features = Array2::from_shape_simple_fn((cfg.num_regions, cfg.region_feat_dim), || {
            round_f32(StandardNormal.sample(&mut rng))
        });
        let mut boxes = Array2::zeros((cfg.num_regions, 4));
        for r in 0..cfg.num_regions {
            let x1: f64 = rng.random_range(0.0..0.5);
            let y1: f64 = rng.random_range(0.0..0.5);
            let w: f64 = rng.random_range(0.1..0.5);
            let h: f64 = rng.random_range(0.1..0.5);
            for (c, v) in [x1, y1, x1 + w, y1 + h].into_iter().enumerate() {
                boxes[[r, c]] = round_f32(v);
            }
        }
        regions.insert(&image_ref, &VisualInput { features, boxes })?;
        records.push(QuestionRecord {
            id: format!("synth-{i:05}"),
            question,
            caption: None,
            image_ref,
            answers: vec![Answer {
                text: class_names[class].clone(),
                weight: 1.0,
            }],
            question_types: types,
            meta_entities: meta,
            split: split.to_string(),
        });
    }

    Ok(SyntheticBenchmark {
        config: cfg.clone(),
        records,
        wiki,
        wordpieces,
        regions,
        entity_classes,
        class_names,
        cues,
    })
}

impl SyntheticBenchmark {
    /// Writes dataset, embedding tables and region store into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DataPaths, HarnessError> {
        fs::create_dir_all(dir)?;
        let paths = DataPaths::in_dir(dir);
        let mut buf = Vec::new();
        write_dataset(&self.records, &mut buf)?;
        fs::write(&paths.dataset, buf)?;
        self.wiki.save(&paths.wiki_embeddings)?;
        self.wordpieces.save(&paths.wordpiece_embeddings)?;
        self.regions.save(&paths.region_index, &paths.region_bin)?;
        Ok(paths)
    }

    /// SHA-256 over the serialized dataset, tables and region features.
    pub fn checksum(&self) -> Result<String, HarnessError> {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        write_dataset(&self.records, &mut buf)?;
        self.wiki.write(&mut buf)?;
        self.wordpieces.write(&mut buf)?;
        hasher.update(&buf);
        for r in &self.records {
            if let Some(v) = self.regions.get(&r.image_ref) {
                for x in v.features.iter().chain(v.boxes.iter()) {
                    hasher.update(x.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}
