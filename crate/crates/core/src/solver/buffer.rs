use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::scalar::Scalar;

/// Rolling buffer of previous model outputs, oldest first.
///
/// Times strictly decrease from the oldest to the newest entry. Pushing onto
/// a full buffer evicts the oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    entries: VecDeque<ModelOutput<T>>,
    capacity: usize,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Buffer {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, output: ModelOutput<T>) -> Result<()> {
        if let Some(newest) = self.entries.back() {
            if !(output.t < newest.t) {
                return Err(Error::Contract(format!(
                    "buffer times must decrease: pushing t={} after t={}",
                    output.t, newest.t
                )));
            }
            if output.param != newest.param {
                return Err(Error::Contract("buffer entries must share a parameterization".into()));
            }
            if output.value.len() != newest.value.len() {
                return Err(Error::Contract("buffer entries must share a dimension".into()));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(output);
        Ok(())
    }

    pub fn newest(&self) -> Option<&ModelOutput<T>> {
        self.entries.back()
    }

    /// Entry `k` steps back from the newest (`k = 0` is the newest).
    pub fn back(&self, k: usize) -> Option<&ModelOutput<T>> {
        self.entries.len().checked_sub(k + 1).and_then(|i| self.entries.get(i))
    }

    /// Oldest-to-newest iteration.
    pub fn iter(&self) -> impl Iterator<Item = &ModelOutput<T>> {
        self.entries.iter()
    }

    /// Returns a copy whose newest output is replaced.
    pub fn with_newest_replaced(&self, output: ModelOutput<T>) -> Result<Self> {
        let newest = self
            .entries
            .back()
            .ok_or_else(|| Error::Contract("cannot replace the newest entry of an empty buffer".into()))?;
        if output.t != newest.t {
            return Err(Error::Contract(format!(
                "replacement at t={} does not match newest entry at t={}",
                output.t, newest.t
            )));
        }
        if output.param != newest.param || output.value.len() != newest.value.len() {
            return Err(Error::Contract("replacement differs in parameterization or dimension".into()));
        }
        let mut out = self.clone();
        *out.entries.back_mut().unwrap() = output;
        Ok(out)
    }
}
