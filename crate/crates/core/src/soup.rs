//! Temporal model selection and federated model patching.
//!
//! Each client keeps its own soup of historical global checkpoints. After
//! the interpolation start round, a client admits the current global model
//! into its soup when doing so does not lower validation accuracy of the
//! averaged model, then replaces its local model by the uniform average of
//! the soup and the local model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::nn::{Batch, MlpArchitecture, ParamVector};

/// What happens to the soup when a global checkpoint is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Append the checkpoint; the soup grows over time.
    #[default]
    Accumulate,
    /// Reset the soup to just the new checkpoint.
    Replace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoupEntry {
    pub round: usize,
    pub params: ParamVector,
}

/// Ordered set of selected global checkpoints. Rounds strictly increase and
/// all entries share one length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SoupSet {
    entries: Vec<SoupEntry>,
}

impl SoupSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SoupEntry] {
        &self.entries
    }

    pub fn rounds(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.round).collect()
    }

    pub fn push(&mut self, round: usize, params: ParamVector) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if round <= last.round {
                return Err(Error::config(format!(
                    "soup rounds must increase: {round} after {}",
                    last.round
                )));
            }
            last.params.expect_len("soup entry", params.len())?;
        }
        self.entries.push(SoupEntry { round, params });
        Ok(())
    }

    fn replace(&mut self, round: usize, params: ParamVector) {
        self.entries.clear();
        self.entries.push(SoupEntry { round, params });
    }
}

/// Outcome of one selection test: validation accuracy with and without the
/// candidate global model in the average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub with_global: f64,
    pub without_global: f64,
    pub selected: bool,
}

/// Validation accuracy (argmax, ties to the lowest class).
pub fn val_acc(arch: &MlpArchitecture, params: &ParamVector, val: &Batch) -> Result<f64> {
    accuracy(arch, params, val)
}

/// Uniform mean of every soup entry and every extra vector.
///
/// Computed as `first + mean(x − first)`, so averaging copies of one vector
/// returns it bit for bit.
pub fn soup_average(soup: &SoupSet, extras: &[&ParamVector]) -> Result<ParamVector> {
    let mut members = soup
        .entries
        .iter()
        .map(|e| &e.params)
        .chain(extras.iter().copied());
    let first = members
        .next()
        .ok_or_else(|| Error::config("cannot average an empty soup with no extra models"))?;
    let mut sum_diff = vec![0.0; first.len()];
    let mut count = 1usize;
    for m in members {
        m.expect_len("soup average", first.len())?;
        for ((s, x), f) in sum_diff.iter_mut().zip(m.iter()).zip(first.iter()) {
            *s += x - f;
        }
        count += 1;
    }
    let n = count as f64;
    ParamVector::new(
        first
            .iter()
            .zip(&sum_diff)
            .map(|(f, s)| f + s / n)
            .collect(),
    )
}

/// Greedy temporal selection. Compares the validation accuracy of
/// `average(soup ∪ {local, global})` against `average(soup ∪ {local})` and
/// admits `global` when the first is at least the second.
pub fn maybe_select(
    soup: &mut SoupSet,
    round: usize,
    global: &ParamVector,
    local: &ParamVector,
    arch: &MlpArchitecture,
    val: &Batch,
    mode: SelectionMode,
) -> Result<Selection> {
    global.expect_len("selection candidate", local.len())?;
    let with_global = val_acc(arch, &soup_average(soup, &[local, global])?, val)?;
    let without_global = val_acc(arch, &soup_average(soup, &[local])?, val)?;
    let selected = with_global >= without_global;
    if selected {
        match mode {
            SelectionMode::Accumulate => soup.push(round, global.clone())?,
            SelectionMode::Replace => soup.replace(round, global.clone()),
        }
    }
    Ok(Selection {
        with_global,
        without_global,
        selected,
    })
}

/// Model patching: the uniform average of the soup and `local`.
pub fn patch(soup: &SoupSet, local: &ParamVector) -> Result<ParamVector> {
    if soup.is_empty() {
        return Ok(local.clone());
    }
    soup_average(soup, &[local])
}
