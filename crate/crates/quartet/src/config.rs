//! Plain `key = value` configuration files for `train` and `sweep`.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may
//! appear once; unknown keys are rejected. Lists are comma-separated.
//!
//! ```text
//! task = sequence        # or regression
//! dims = 64,128,128,32
//! pair = quest-rtn       # train: exact | quest-rtn | quest-sr
//! steps = 600
//! ```

use std::collections::BTreeMap;
use std::str::FromStr;

use quartet_core::qlinear::{BackwardRounding, LayerConfig};
use quartet_core::trainkit::{SchemePair, SequenceTask, Task, TeacherStudent, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    /// `source` names the file in error messages.
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split_once('#').map_or(raw, |(c, _)| c).trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Usage(format!("{source}:{line}: expected `key = value`, found `{content}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::Usage(format!("{source}:{line}: empty key or value")));
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (line, value.to_string())) {
                return Err(Error::Usage(format!("{source}:{line}: duplicate key `{key}` (first set on line {first})")));
            }
        }
        Ok(Self {
            source: source.into(),
            entries,
        })
    }

    fn err(&self, line: usize, msg: impl std::fmt::Display) -> Error {
        Error::Usage(format!("{}:{line}: {msg}", self.source))
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<(usize, T)>> {
        let Some((line, v)) = self.entries.remove(key) else {
            return Ok(None);
        };
        match v.parse() {
            Ok(t) => Ok(Some((line, t))),
            Err(_) => Err(self.err(line, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.map_or(default, |(_, v)| v))
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<(usize, Vec<T>)>> {
        let Some((line, v)) = self.entries.remove(key) else {
            return Ok(None);
        };
        let items: std::result::Result<Vec<T>, _> = v.split(',').map(|s| s.trim().parse()).collect();
        match items {
            Ok(items) if !items.is_empty() => Ok(Some((line, items))),
            _ => Err(self.err(line, format!("invalid list `{v}` for `{key}`"))),
        }
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(self.err(*line, format!("unknown key `{key}`"))),
            None => Ok(()),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Scheme pair by name (see [`PAIR_NAMES`]); `quartet` aliases `quest-rtn`.
pub fn parse_pair(name: &str) -> Option<SchemePair> {
    match name {
        "exact" => Some(SchemePair::exact()),
        "quest-rtn" | "quartet" => Some(SchemePair::quartet()),
        "quest-sr" => Some(SchemePair::quartet_sr()),
        "rtn-rtn" => Some(SchemePair::new(
            "rtn-rtn",
            LayerConfig {
                forward: Some(quartet_core::quantizers::QuantScheme::RtnAbsMax),
                ..LayerConfig::quartet()
            },
        )),
        "quest-exact" => Some(SchemePair::new(
            "quest-exact",
            LayerConfig::quartet().with_backward(BackwardRounding::Identity),
        )),
        _ => None,
    }
}

pub const PAIR_NAMES: &str = "exact, quest-rtn, quest-sr, rtn-rtn, quest-exact";

struct Common {
    task: Task,
    dims: Vec<usize>,
    train: TrainConfig,
}

fn common(kv: &mut KeyValues) -> Result<Common> {
    let task_line = kv.take::<String>("task")?;
    let task_seed = kv.take_or("task_seed", 2024u64)?;
    let task = match task_line.as_ref().map(|(l, t)| (*l, t.as_str())) {
        None | Some((_, "sequence")) => {
            let vocab = kv.take_or("vocab", 32usize)?;
            let temperature = kv.take_or("temperature", 0.5f64)?;
            if vocab < 2 || !(temperature > 0.0) {
                return Err(Error::Usage(format!("{}: vocab must be >= 2 and temperature > 0", kv.source())));
            }
            Task::Sequence(SequenceTask::new(vocab, temperature, task_seed))
        }
        Some((_, "regression")) => {
            let input = kv.take_or("input", 64usize)?;
            let hidden = kv.take_or("hidden", 64usize)?;
            let output = kv.take_or("output", 32usize)?;
            let noise = kv.take_or("noise", 0.5f64)?;
            if input == 0 || hidden == 0 || output == 0 || !(noise >= 0.0) {
                return Err(Error::Usage(format!("{}: teacher sizes must be positive and noise >= 0", kv.source())));
            }
            Task::TeacherStudent(TeacherStudent::new(input, hidden, output, noise, task_seed))
        }
        Some((line, other)) => return Err(kv.err(line, format!("unknown task `{other}` (sequence, regression)"))),
    };
    let dims = match kv.take_list::<usize>("dims")? {
        Some((line, dims)) => {
            if dims.len() < 2 || dims.iter().any(|&d| d == 0 || d % 32 != 0) {
                return Err(kv.err(line, "dims need at least two entries, each a positive multiple of 32"));
            }
            if dims[0] != task.input_dim() || dims[dims.len() - 1] != task.output_dim() {
                return Err(kv.err(
                    line,
                    format!("dims must start at {} and end at {} for this task", task.input_dim(), task.output_dim()),
                ));
            }
            dims
        }
        None => {
            let d = Task::default_dims().to_vec();
            if d[0] != task.input_dim() || d[d.len() - 1] != task.output_dim() {
                return Err(Error::Usage(format!("{}: `dims` is required for this task", kv.source())));
            }
            d
        }
    };
    let def = TrainConfig::default();
    let train = TrainConfig {
        steps: kv.take_or("steps", def.steps)?,
        batch_size: kv.take_or("batch_size", def.batch_size)?,
        lr: kv.take_or("lr", def.lr)?,
        weight_decay: kv.take_or("weight_decay", def.weight_decay)?,
        clip: kv.take_or("clip", def.clip)?,
        warmup_frac: kv.take_or("warmup_frac", def.warmup_frac)?,
        final_lr_frac: kv.take_or("final_lr_frac", def.final_lr_frac)?,
        log_every: kv.take_or("log_every", def.log_every)?,
        eval_size: kv.take_or("eval_size", def.eval_size)?,
        seed: 0,
    };
    train
        .validate()
        .map_err(|e| Error::Usage(format!("{}: {e}", kv.source())))?;
    Ok(Common { task, dims, train })
}

fn pair_at(kv: &KeyValues, line: usize, name: &str) -> Result<SchemePair> {
    parse_pair(name).ok_or_else(|| kv.err(line, format!("unknown pair `{name}` ({PAIR_NAMES})")))
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub task: Task,
    pub dims: Vec<usize>,
    pub pair: SchemePair,
    /// `seed` is left at 0; the command line supplies it.
    pub train: TrainConfig,
}

impl TrainSpec {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(source, text)?;
        let c = common(&mut kv)?;
        let pair = match kv.take::<String>("pair")? {
            Some((line, name)) => pair_at(&kv, line, &name)?,
            None => SchemePair::quartet(),
        };
        kv.finish()?;
        Ok(Self {
            task: c.task,
            dims: c.dims,
            pair,
            train: c.train,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub task: Task,
    pub dims: Vec<usize>,
    pub pairs: Vec<SchemePair>,
    pub ratios: Vec<f64>,
    /// Seeds run are `seed, seed + 1, ...` from the command line seed.
    pub seeds: usize,
    pub base: TrainConfig,
}

impl SweepSpec {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(source, text)?;
        if let Some((line, _)) = kv.entries.get("steps") {
            return Err(kv.err(*line, "`steps` is set per ratio in a sweep"));
        }
        let c = common(&mut kv)?;
        let pairs = match kv.take_list::<String>("pairs")? {
            Some((line, names)) => names.iter().map(|n| pair_at(&kv, line, n)).collect::<Result<Vec<_>>>()?,
            None => vec![SchemePair::exact(), SchemePair::quartet(), SchemePair::quartet_sr()],
        };
        let ratios = match kv.take_list::<f64>("ratios")? {
            Some((line, r)) => {
                if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(kv.err(line, "ratios must be positive"));
                }
                r
            }
            None => vec![10.0, 25.0, 50.0],
        };
        let seeds = match kv.take::<usize>("seeds")? {
            Some((line, 0)) => return Err(kv.err(line, "seeds must be at least 1")),
            Some((_, s)) => s,
            None => 3,
        };
        kv.finish()?;
        Ok(Self {
            task: c.task,
            dims: c.dims,
            pairs,
            ratios,
            seeds,
            base: c.train,
        })
    }
}
