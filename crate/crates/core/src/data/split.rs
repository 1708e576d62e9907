use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Generator, Polarity, Sample, SampleMeta, Task};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Dev,
    Test,
}

impl Partition {
    fn tag(self) -> u64 {
        match self {
            Partition::Train => 0x7261_696e,
            Partition::Dev => 0x6465_7600,
            Partition::Test => 0x7465_7374,
        }
    }
}

/// Class-balanced few-shot train/dev sets plus a naturally distributed test set.
#[derive(Clone, Debug)]
pub struct FewShotSplit {
    pub task: Task,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
    pub shots_per_class: usize,
    pub seed: u64,
}

fn sample_seed(split_seed: u64, part: Partition, i: u64) -> u64 {
    seed::derive(seed::derive(split_seed, part.tag()), i)
}

fn balanced(gen: &Generator, task: Task, shots: usize, split_seed: u64, part: Partition) -> Vec<Sample> {
    let k = task.n_classes();
    let mut counts = vec![0usize; k];
    let mut out = Vec::with_capacity(k * shots);
    let mut i = 0u64;
    while out.len() < k * shots {
        let s = gen.gen_sample(task, sample_seed(split_seed, part, i));
        i += 1;
        if counts[s.label] < shots {
            counts[s.label] += 1;
            out.push(s);
        }
    }
    out
}

/// Draws train and dev with exactly `shots_per_class` samples per class and
/// `test_size` test samples. Partitions use distinct derived seed streams.
pub fn make_fewshot_split(
    gen: &Generator,
    task: Task,
    shots_per_class: usize,
    test_size: usize,
    split_seed: u64,
) -> Result<FewShotSplit> {
    if shots_per_class == 0 {
        return Err(Error::Input("shots_per_class must be at least 1".into()));
    }
    let train = balanced(gen, task, shots_per_class, split_seed, Partition::Train);
    let dev = balanced(gen, task, shots_per_class, split_seed, Partition::Dev);
    let test = (0..test_size as u64)
        .map(|i| gen.gen_sample(task, sample_seed(split_seed, Partition::Test, i)))
        .collect();
    Ok(FewShotSplit {
        task,
        train,
        dev,
        test,
        shots_per_class,
        seed: split_seed,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    seed: u64,
    task: Task,
    image_polarity: Polarity,
    text_polarity: Polarity,
    label: usize,
    tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_index: Option<usize>,
    patch_shape: [usize; 2],
    /// Little-endian `f64` payload.
    patches: String,
}

/// Writes one JSON record per line.
pub fn write_jsonl<W: Write>(samples: &[Sample], mut w: W) -> Result<()> {
    for s in samples {
        let bytes: Vec<u8> = s.patches.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        let rec = Record {
            seed: s.meta.seed,
            task: s.meta.task,
            image_polarity: s.meta.image_polarity,
            text_polarity: s.meta.text_polarity,
            label: s.label,
            tokens: s.tokens.clone(),
            mask_index: s.mask_index,
            patch_shape: [s.patches.rows(), s.patches.cols()],
            patches: B64.encode(bytes),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        let bytes = B64
            .decode(rec.patches.as_bytes())
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!("line {}: truncated patch payload", n + 1)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if rec.label != rec.task.label(rec.image_polarity, rec.text_polarity) {
            return Err(Error::Format(format!("line {}: label disagrees with polarities", n + 1)));
        }
        out.push(Sample {
            patches: Tensor::new(rec.patch_shape, data)?,
            tokens: rec.tokens,
            mask_index: rec.mask_index,
            label: rec.label,
            meta: SampleMeta {
                task: rec.task,
                image_polarity: rec.image_polarity,
                text_polarity: rec.text_polarity,
                seed: rec.seed,
            },
        });
    }
    Ok(out)
}
