use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::Result;
use crate::rewards::{Dimension, RewardStats, RewardVector};

/// Held-out evaluation run by a trainer every `interval` steps (and at step 0
/// and the final step).
pub struct EvalHook<'a> {
    pub interval: usize,
    pub evaluate: &'a (dyn Fn(&Denoiser) -> Result<RewardStats> + Sync),
}

impl EvalHook<'_> {
    pub(crate) fn due(&self, step: usize, last: usize) -> bool {
        step == 0 || step == last || (self.interval > 0 && step % self.interval == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `None` when the step was skipped.
    pub loss: Option<f64>,
    /// Mean raw reward of the step's candidates (or of the pair, offline).
    pub candidate_mean: RewardVector,
    /// Winner minus loser on the selection criterion.
    pub gap: Option<f64>,
    pub ref_update: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub stats: RewardStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub ref_updates: Vec<usize>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainRunMetrics {
    pub(crate) fn maybe_eval(
        &mut self,
        hook: Option<&EvalHook<'_>>,
        step: usize,
        last: usize,
        policy: &Denoiser,
    ) -> Result<()> {
        if let Some(hook) = hook {
            if hook.due(step, last) {
                let stats = (hook.evaluate)(policy)?;
                self.evals.push(EvalRecord { step, stats });
            }
        }
        Ok(())
    }

    pub fn skipped(&self) -> usize {
        self.steps.iter().filter(|s| s.loss.is_none()).count()
    }

    pub fn eval_mean(&self, step: usize, dim: Dimension) -> Option<f64> {
        self.evals
            .iter()
            .find(|e| e.step == step)
            .map(|e| e.stats.mean.get(dim))
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Per-step curve: `step,loss,<dimension means>,gap,ref_update`; skipped
    /// steps leave `loss` and `gap` empty.
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend(Dimension::ALL.iter().map(|d| d.to_string()));
        header.extend(["gap".to_string(), "ref_update".to_string()]);
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), cell(s.loss)];
            row.extend(Dimension::ALL.iter().map(|&d| s.candidate_mean.get(d).to_string()));
            row.push(cell(s.gap));
            row.push(u8::from(s.ref_update).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Held-out evaluations: `step,<dim>_mean,<dim>_std,...`.
    pub fn write_eval_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        for d in Dimension::ALL {
            header.push(format!("{d}_mean"));
            header.push(format!("{d}_std"));
        }
        w.write_record(&header)?;
        for e in &self.evals {
            let mut row = vec![e.step.to_string()];
            for d in Dimension::ALL {
                row.push(e.stats.mean.get(d).to_string());
                row.push(e.stats.std.get(d).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_has_one_row_per_step() {
        let mut m = TrainRunMetrics::default();
        for step in 1..=3 {
            m.steps.push(StepRecord {
                step,
                loss: (step != 2).then_some(0.5),
                candidate_mean: RewardVector::default(),
                gap: (step != 2).then_some(1.0),
                ref_update: step == 3,
            });
        }
        let mut buf = Vec::new();
        m.write_curve_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "step,loss,visual_quality,temporal_consistency,dynamic_degree,alignment,global,gap,ref_update"
        );
        assert_eq!(lines[2], "2,,0,0,0,0,0,,0");
        assert!(lines[3].ends_with(",1"));
        assert_eq!(m.skipped(), 1);
    }
}
