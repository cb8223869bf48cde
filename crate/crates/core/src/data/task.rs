use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::tokens;

/// Parameters of the synthetic sparse-semantics translation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_semantic: usize,
    pub expansion_min: usize,
    pub expansion_max: usize,
    pub units_per_semantic: usize,
    pub sent_len_min: usize,
    pub sent_len_max: usize,
    pub feat_dim: usize,
    pub feat_noise_sigma: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 1234,
            n_semantic: 40,
            expansion_min: 2,
            expansion_max: 5,
            units_per_semantic: 8,
            sent_len_min: 3,
            sent_len_max: 8,
            feat_dim: 16,
            feat_noise_sigma: 0.05,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if self.n_semantic == 0 {
            return fail("n_semantic must be positive");
        }
        if self.expansion_min < 1 || self.expansion_max < self.expansion_min {
            return fail("expansion range must satisfy 1 <= min <= max");
        }
        if self.units_per_semantic == 0 {
            return fail("units_per_semantic must be positive");
        }
        if self.expansion_max > 1 && self.units_per_semantic < 2 {
            return fail("expansions longer than one unit need at least two units per semantic token");
        }
        if self.sent_len_min < 1 || self.sent_len_max < self.sent_len_min {
            return fail("sentence length range must satisfy 1 <= min <= max");
        }
        if self.feat_dim == 0 {
            return fail("feat_dim must be positive");
        }
        if !(self.feat_noise_sigma >= 0.0) {
            return fail("feat_noise_sigma must be non-negative");
        }
        Ok(())
    }

    /// `n_semantic × units_per_semantic` units plus bos/eos/pad.
    pub fn unit_vocab(&self) -> usize {
        self.n_semantic * self.units_per_semantic + tokens::unit::RESERVED
    }

    /// Semantic tokens plus blank/pad/bos/eos.
    pub fn text_vocab(&self) -> usize {
        self.n_semantic + tokens::text::RESERVED
    }

    pub fn onset_unit(&self, semantic: usize) -> usize {
        tokens::unit::FIRST + semantic * self.units_per_semantic
    }

    /// Semantic group of a unit and whether it is that group's onset.
    pub fn unit_group(&self, unit: usize) -> Option<(usize, bool)> {
        let rel = unit.checked_sub(tokens::unit::FIRST)?;
        let group = rel / self.units_per_semantic;
        (group < self.n_semantic).then_some((group, rel % self.units_per_semantic == 0))
    }

    /// Safe generation bound: every target fits with room for eos.
    pub fn max_decode_len(&self) -> usize {
        2 + self.expansion_max * self.sent_len_max
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task spec always serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One quadruplet: featurized source, source text, target text, target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    pub src_tokens: Vec<usize>,
    pub src_feats: Vec<Vec<f64>>,
    pub x_text: Vec<usize>,
    pub y_text: Vec<usize>,
    /// Expanded target units terminated by eos.
    pub units: Vec<usize>,
}

impl Sample {
    pub fn feats_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.src_feats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// Fixed seeded tables shared by all splits.
struct TaskTables {
    permutation: Vec<usize>,
    embeddings: Vec<Vec<f64>>,
}

impl TaskTables {
    fn new(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut permutation: Vec<usize> = (0..spec.n_semantic).collect();
        permutation.shuffle(rng);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let embeddings = (0..spec.n_semantic)
            .map(|_| (0..spec.feat_dim).map(|_| normal.sample(rng)).collect())
            .collect();
        Self {
            permutation,
            embeddings,
        }
    }
}

/// Deterministic function of `spec` (including its seed).
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tables = TaskTables::new(spec, &mut rng);
    let noise = Normal::new(0.0, spec.feat_noise_sigma).map_err(|e| Error::config(e.to_string()))?;

    let mut next_id = 0u64;
    let mut split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        (0..n)
            .map(|_| {
                let s = generate_sample(spec, &tables, &noise, &mut rng, next_id);
                next_id += 1;
                s
            })
            .collect::<Vec<_>>()
    };
    let train = split(1, spec.n_train);
    let dev = split(2, spec.n_dev);
    let test = split(3, spec.n_test);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}

fn generate_sample(spec: &TaskSpec, tables: &TaskTables, noise: &Normal<f64>, rng: &mut ChaCha8Rng, id: u64) -> Sample {
    let len = rng.gen_range(spec.sent_len_min..=spec.sent_len_max);
    let x_text: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.n_semantic)).collect();
    let y_text: Vec<usize> = x_text.iter().map(|&x| tables.permutation[x]).collect();
    let mut units = Vec::new();
    for &y in &y_text {
        let count = rng.gen_range(spec.expansion_min..=spec.expansion_max);
        let onset = spec.onset_unit(y);
        units.push(onset);
        for _ in 1..count {
            units.push(onset + rng.gen_range(1..spec.units_per_semantic));
        }
    }
    units.push(tokens::unit::EOS);
    let src_feats = x_text
        .iter()
        .map(|&x| tables.embeddings[x].iter().map(|&e| e + noise.sample(rng)).collect())
        .collect();
    Sample {
        id,
        src_tokens: x_text.clone(),
        src_feats,
        x_text,
        y_text,
        units,
    }
}

/// Maps units back to semantic tokens: an onset, or a change of group,
/// starts a new token. Reading stops at eos.
pub fn collapse_units(units: &[usize], spec: &TaskSpec) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for (pos, &u) in units.iter().enumerate() {
        if u == tokens::unit::EOS {
            break;
        }
        let (group, onset) = spec
            .unit_group(u)
            .ok_or_else(|| Error::Data(format!("unknown unit id {u} at position {pos}")))?;
        if onset || current != Some(group) {
            out.push(group);
        }
        current = Some(group);
    }
    Ok(out)
}
