use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{vocab, Polarity, Sample, SampleMeta, Task};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

/// Shape and difficulty knobs of the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_patches: usize,
    pub patch_feature_dim: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Fraction of patches carrying the polarity prototype.
    pub majority_fraction: f64,
    pub noise_std: f64,
    /// Number of non-polarity prototypes used for the remaining patches.
    pub distractor_symbols: usize,
    /// Fixes the prototypes, i.e. the task itself.
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_patches: 16,
            patch_feature_dim: 32,
            max_text_len: 12,
            vocab_size: 64,
            majority_fraction: 0.75,
            noise_std: 0.1,
            distractor_symbols: 6,
            data_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= vocab::FIRST_DISTRACTOR {
            return Err(Error::Config(format!(
                "vocab_size must exceed {} reserved ids",
                vocab::FIRST_DISTRACTOR
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must be at least 2".into()));
        }
        if self.patch_feature_dim == 0 {
            return Err(Error::Config("patch_feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.majority_fraction) {
            return Err(Error::Config("majority_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        if self.distractor_symbols == 0 && self.majority_count() < self.n_patches {
            return Err(Error::Config(
                "distractor_symbols must be positive when some patches are distractors".into(),
            ));
        }
        Ok(())
    }

    pub fn majority_count(&self) -> usize {
        (self.majority_fraction * self.n_patches as f64).round() as usize
    }
}

/// Deterministic sample generator with fixed unit-norm prototypes.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: DataConfig,
    /// Rows: positive polarity, negative polarity, then distractors.
    prototypes: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(cfg: DataConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed::derive_named(cfg.data_seed, "prototypes"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..2 + cfg.distractor_symbols)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.patch_feature_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(Generator { cfg, prototypes })
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    pub fn prototype(&self, polarity: Polarity) -> &[f64] {
        match polarity {
            Polarity::Pos => &self.prototypes[0],
            Polarity::Neg => &self.prototypes[1],
        }
    }

    /// Draws both polarities uniformly, then renders the sample.
    pub fn gen_sample(&self, task: Task, rng_seed: u64) -> Sample {
        let mut rng = seed::rng(rng_seed);
        let image = if rng.random_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
        let text = if rng.random_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
        self.render(task, image, text, rng_seed, &mut rng)
    }

    /// Renders a sample with fixed polarities; noise and distractors come from `rng_seed`.
    pub fn gen_with_polarities(
        &self,
        task: Task,
        image: Polarity,
        text: Polarity,
        rng_seed: u64,
    ) -> Sample {
        let mut rng = seed::rng(seed::derive(rng_seed, 0x5eed));
        self.render(task, image, text, rng_seed, &mut rng)
    }

    fn render<R: Rng>(
        &self,
        task: Task,
        image: Polarity,
        text: Polarity,
        sample_seed: u64,
        rng: &mut R,
    ) -> Sample {
        let cfg = &self.cfg;
        let majority = cfg.majority_count().min(cfg.n_patches);
        let mut order: Vec<usize> = (0..cfg.n_patches).collect();
        order.shuffle(rng);
        let mut symbol = vec![0usize; cfg.n_patches];
        let polarity_symbol = match image {
            Polarity::Pos => 0,
            Polarity::Neg => 1,
        };
        for (rank, &slot) in order.iter().enumerate() {
            symbol[slot] = if rank < majority {
                polarity_symbol
            } else {
                2 + rng.random_range(0..cfg.distractor_symbols)
            };
        }
        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut data = Vec::with_capacity(cfg.n_patches * cfg.patch_feature_dim);
        for &s in &symbol {
            for &p in &self.prototypes[s] {
                let eps = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(p + eps);
            }
        }
        let patches =
            Tensor::new([cfg.n_patches, cfg.patch_feature_dim], data).expect("sized above");

        let n_distractors = cfg.max_text_len - 2;
        let mut words: Vec<usize> = (0..n_distractors)
            .map(|_| rng.random_range(vocab::FIRST_DISTRACTOR..cfg.vocab_size))
            .collect();
        let polarity_token = match text {
            Polarity::Pos => vocab::POS_TOK,
            Polarity::Neg => vocab::NEG_TOK,
        };
        let at = rng.random_range(0..=n_distractors);
        words.insert(at, polarity_token);
        let mut tokens = Vec::with_capacity(cfg.max_text_len);
        tokens.push(vocab::CLS);
        tokens.extend(words);

        Sample {
            patches,
            tokens,
            mask_index: None,
            label: task.label(image, text),
            meta: SampleMeta {
                task,
                image_polarity: image,
                text_polarity: text,
                seed: sample_seed,
            },
        }
    }
}
