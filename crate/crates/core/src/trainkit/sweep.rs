use alloc::string::String;
use alloc::vec::Vec;

use super::model::Model;
use super::task::Task;
use super::train::{train, TrainConfig};
use crate::qlinear::{BackwardRounding, LayerConfig};
use crate::Result;

/// A named forward/backward configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemePair {
    pub name: String,
    pub layer: LayerConfig,
}

impl SchemePair {
    pub fn new(name: &str, layer: LayerConfig) -> Self {
        Self { name: name.into(), layer }
    }

    pub fn exact() -> Self {
        Self::new("exact", LayerConfig::exact())
    }

    /// QuEST forward, RTN backward.
    pub fn quartet() -> Self {
        Self::new("quest-rtn", LayerConfig::quartet())
    }

    /// QuEST forward, stochastic-rounding backward.
    pub fn quartet_sr() -> Self {
        Self::new("quest-sr", LayerConfig::quartet().with_backward(BackwardRounding::Stochastic))
    }

    pub fn is_exact(&self) -> bool {
        self.layer.forward.is_none() && self.layer.backward == BackwardRounding::Identity
    }
}

#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub dims: Vec<usize>,
    pub task: Task,
    /// Everything except `steps` and `seed`, which the sweep sets.
    pub base: TrainConfig,
    pub pairs: Vec<SchemePair>,
    /// Training samples per parameter.
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub pair: String,
    pub ratio: f64,
    pub steps: usize,
    /// Final held-out loss per seed; `None` when that run diverged.
    pub losses: Vec<Option<f64>>,
    pub gaps: Vec<f64>,
    pub gap_mean: f64,
    pub gap_median: f64,
    pub gap_std: f64,
    pub diverged: usize,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Trains every pair at every ratio and seed and reports the gap to the
/// exact pair run with the same seed and budget. Initial weights depend
/// only on the seed, so all pairs start from the same point.
pub fn loss_gap_sweep(setup: &SweepSetup) -> Result<Vec<SweepCell>> {
    let params = Model::new(&setup.dims, 0)?.param_count() as f64;
    let exact = SchemePair::exact();
    let mut cells = Vec::new();
    for &ratio in &setup.ratios {
        let steps = libm::ceil(ratio * params / setup.base.batch_size as f64).max(1.0) as usize;
        let run = |pair: &SchemePair, seed: u64| -> Result<Option<f64>> {
            let cfg = TrainConfig {
                steps,
                seed,
                ..setup.base.clone()
            };
            let model = Model::new(&setup.dims, seed)?;
            Ok(train(model, &setup.task, &pair.layer, &cfg)?.outcome.final_loss())
        };
        let reference: Vec<Option<f64>> = setup.seeds.iter().map(|&s| run(&exact, s)).collect::<Result<_>>()?;
        for pair in &setup.pairs {
            let losses = if pair.is_exact() {
                reference.clone()
            } else {
                setup.seeds.iter().map(|&s| run(pair, s)).collect::<Result<_>>()?
            };
            let gaps: Vec<f64> = losses
                .iter()
                .zip(&reference)
                .filter_map(|(q, e)| Some(q.as_ref()? - e.as_ref()?))
                .collect();
            let n = gaps.len() as f64;
            let gap_mean = gaps.iter().sum::<f64>() / n;
            let gap_std = if gaps.len() > 1 {
                libm::sqrt(gaps.iter().map(|g| (g - gap_mean) * (g - gap_mean)).sum::<f64>() / (n - 1.0))
            } else {
                0.0
            };
            cells.push(SweepCell {
                pair: pair.name.clone(),
                ratio,
                steps,
                diverged: losses.iter().filter(|l| l.is_none()).count(),
                gap_median: median(&gaps),
                losses,
                gaps,
                gap_mean,
                gap_std,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::TeacherStudent;
    use std::vec;

    #[test]
    fn exact_pair_has_zero_gap() {
        let setup = SweepSetup {
            dims: vec![32, 32, 32],
            task: Task::TeacherStudent(TeacherStudent::new(32, 32, 32, 0.1, 1)),
            base: TrainConfig {
                batch_size: 32,
                eval_size: 32,
                ..TrainConfig::default()
            },
            pairs: vec![SchemePair::exact(), SchemePair::quartet()],
            ratios: vec![0.5],
            seeds: vec![1, 2],
        };
        let cells = loss_gap_sweep(&setup).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].steps, 32);
        assert!(cells[0].gaps.iter().all(|&g| g == 0.0));
        assert_eq!(cells[1].gaps.len(), 2);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
