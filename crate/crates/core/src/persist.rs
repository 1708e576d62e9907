//! Run configuration files and binary checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "MOPEBAF\0"
//! crc32     u32      over every byte after this field
//! version   u32
//! config    u64 length + UTF-8 TOML of the run configuration
//! tensors   u32 count, then per tensor:
//!           u32 name length + name, u32 ndim, u64 dims.., f64 values..
//! optimizer u8 flag; when 1: u64 step, then first and second moments
//!           in parameter order (shapes as above)
//! rng       u64 train seed, u64 epochs started, u64 steps taken
//! ```

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_template, make_fewshot_split, DataConfig, FewShotSplit, Generator, PromptTemplate, Task,
    TemplateMode,
};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, ModelConfig, ParamStore};
use crate::numerics::Tensor;
use crate::training::{OptimizerState, TrainConfig};

/// `[data]` section: task, split sizes, seeds and generator difficulty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub task: Task,
    pub shots_per_class: usize,
    pub test_size: usize,
    /// Fixes the task instance (prototypes).
    pub data_seed: u64,
    /// Fixes which samples land in train/dev/test.
    pub split_seed: u64,
    pub majority_fraction: f64,
    pub noise_std: f64,
    pub distractor_symbols: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            task: Task::Sarcasm2,
            shots_per_class: 16,
            test_size: 512,
            data_seed: 0,
            split_seed: 0,
            majority_fraction: d.majority_fraction,
            noise_std: d.noise_std,
            distractor_symbols: d.distractor_symbols,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    pub mode: TemplateMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub template: TemplateSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults for `task`.
    pub fn desk(task: Task) -> Self {
        RunConfig {
            out_dir: default_out_dir(),
            data: DataSection {
                task,
                ..DataSection::default()
            },
            template: TemplateSection::default(),
            model: ModelConfig::desk(task),
            train: TrainConfig::desk(),
        }
    }

    /// Parses a configuration; omitted keys take the desk defaults of the
    /// configured task, unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let task = match user.get("data").and_then(|d| d.get("task")) {
            Some(toml::Value::String(s)) => s.parse::<Task>().map_err(|e| Error::Config(format!("data.task: {e}")))?,
            Some(_) => return Err(Error::Config("data.task: expected a string".into())),
            None => Task::Sarcasm2,
        };
        let defaults = toml::Table::try_from(Self::desk(task))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let mut merged = defaults;
        merge(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    /// Field and cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data_config().validate()?;
        let task = self.data.task;
        if self.model.n_classes != task.n_classes() {
            return Err(Error::Config(format!(
                "model.n_classes: {} does not match task {task:?} with {} classes",
                self.model.n_classes,
                task.n_classes()
            )));
        }
        if self.data.shots_per_class == 0 {
            return Err(Error::Config("data.shots_per_class: must be at least 1".into()));
        }
        if self.model.head == HeadKind::LmVerbalizer && !self.template.mode.has_mask() {
            return Err(Error::Config(
                "template.mode: the LM head needs a template with a [MASK] slot".into(),
            ));
        }
        let t = self.prompt_template();
        if let Some(pos) = t.mask_position() {
            if pos + 2 > self.model.max_text_len {
                return Err(Error::Config(format!(
                    "model.max_text_len: {} leaves no room for the template and polarity word",
                    self.model.max_text_len
                )));
            }
        }
        Ok(())
    }

    /// Same run with every seed (task instance, split, init, shuffles) set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.data_seed = seed;
        c.data.split_seed = seed;
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            majority_fraction: self.data.majority_fraction,
            noise_std: self.data.noise_std,
            distractor_symbols: self.data.distractor_symbols,
            ..self.model.data_config(self.data.data_seed)
        }
    }

    pub fn prompt_template(&self) -> PromptTemplate {
        PromptTemplate::for_task(self.template.mode, self.data.task)
    }

    /// Regenerates the few-shot split and applies the template to every sample.
    pub fn split(&self) -> Result<FewShotSplit> {
        let gen = Generator::new(self.data_config())?;
        let mut split = make_fewshot_split(
            &gen,
            self.data.task,
            self.data.shots_per_class,
            self.data.test_size,
            self.data.split_seed,
        )?;
        let t = self.prompt_template();
        let max = self.model.max_text_len;
        for part in [&mut split.train, &mut split.dev, &mut split.test] {
            for s in part.iter_mut() {
                *s = apply_template(s, &t, max)?;
            }
        }
        Ok(split)
    }
}

/// Shuffle-stream position saved with a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub train_seed: u64,
    pub epochs: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MOPEBAF\0";

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend(CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_toml_string();
        body.extend((cfg.len() as u64).to_le_bytes());
        body.extend(cfg.as_bytes());
        body.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            body.extend((name.len() as u32).to_le_bytes());
            body.extend(name.as_bytes());
            put_tensor(&mut body, t);
        }
        match &self.optimizer {
            Some(o) => {
                body.push(1);
                body.extend(o.step.to_le_bytes());
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut body, t);
                }
            }
            None => body.push(0),
        }
        for x in [self.rng.train_seed, self.rng.epochs, self.rng.step] {
            body.extend(x.to_le_bytes());
        }
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend(MAGIC);
        out.extend(crc32fast::hash(&body).to_le_bytes());
        out.extend(body);
        out
    }

    /// Parses and verifies a checkpoint: checksum, version, configuration and
    /// parameter names/shapes against the configured model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let stored = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let body = &bytes[12..];
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut c = Cursor { buf: body, pos: 0 };
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n = c.len()?;
        let config = RunConfig::from_toml_str(&c.string(n)?)?;
        let count = c.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = c.u32()? as usize;
            let name = c.string(n)?;
            let t = c.tensor()?;
            params
                .insert(name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let optimizer = match c.u8()? {
            0 => None,
            1 => {
                let step = c.u64()?;
                let m = (0..count).map(|_| c.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| c.tensor()).collect::<Result<Vec<_>>>()?;
                for (i, p) in params.tensors().iter().enumerate() {
                    if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
                        return Err(Error::Format(format!(
                            "optimizer moments for {} have the wrong shape",
                            params.name(i)
                        )));
                    }
                }
                Some(OptimizerState { m, v, step })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        let rng = RngState {
            train_seed: c.u64()?,
            epochs: c.u64()?,
            step: c.u64()?,
        };
        if c.pos != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let ckpt = Checkpoint {
            config,
            params,
            optimizer,
            rng,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }
}
