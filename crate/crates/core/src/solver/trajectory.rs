use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::scalar::Scalar;

/// States visited by one sampling run.
///
/// `states[i]` is the corrected state at `times[i]`; `predicted[i]` is the
/// predictor output there (equal to the initial noise at `i = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub predicted: Vec<Vec<T>>,
    pub nfe_used: usize,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct StepRecord<'a, T> {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    i: usize,
    t: T,
    x: &'a [T],
    x_corr: &'a [T],
}

impl<T: Scalar> Trajectory<T> {
    pub(crate) fn start(times: Vec<T>, x_init: Vec<T>) -> Self {
        Trajectory {
            times,
            states: vec![x_init.clone()],
            predicted: vec![x_init],
            nfe_used: 0,
            seed: None,
        }
    }

    pub(crate) fn push(&mut self, predicted: Vec<T>, corrected: Vec<T>) {
        self.predicted.push(predicted);
        self.states.push(corrected);
    }

    pub fn endpoint(&self) -> &[T] {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Writes one JSON object per step: `{i, t, x, x_corr}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, ((t, x), xc)) in self.times.iter().zip(&self.predicted).zip(&self.states).enumerate() {
            let rec = StepRecord {
                seed: self.seed,
                i,
                t: *t,
                x,
                x_corr: xc,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
