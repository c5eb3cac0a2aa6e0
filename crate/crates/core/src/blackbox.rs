//! The query-only boundary around the target classifier.
//!
//! A [`BlackBox`] owns its model privately. The only things that cross the
//! boundary are inputs going in and [`BlackBoxReply`] values (probabilities
//! and a label) coming out, and every single-input evaluation is counted.
//! There is no accessor for the wrapped model and no backward pass.
//!
//! The first-order baseline needs gradients through the classifier; it gets
//! them from a separate [`WhiteBox`] built from its own copy of the model.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::models::{Classifier, ClassifierCache};
use crate::numerics::{Mode, Tensor};

/// Anything that maps a batch of inputs to class probabilities.
pub trait Predictor: Send + Sync {
    /// Shape of one input, without the batch dimension.
    fn input_shape(&self) -> Vec<usize>;
    fn classes(&self) -> usize;
    /// One probability row per batch item.
    fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Classifier {
    fn input_shape(&self) -> Vec<usize> {
        self.config().input_shape().to_vec()
    }
    fn classes(&self) -> usize {
        self.config().classes
    }
    fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let out = self.forward(batch, Mode::Inference)?;
        Ok((0..batch.batch())
            .map(|i| out.probabilities.item_slice(i).to_vec())
            .collect())
    }
}

/// What the black box returns for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct BlackBoxReply {
    pub probabilities: Vec<f64>,
    pub predicted_label: usize,
}

impl BlackBoxReply {
    fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let predicted_label = argmax(&probabilities);
        Self {
            probabilities,
            predicted_label,
        }
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Which part of a pipeline a query belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Clean-input replies used as training targets.
    Reference,
    Training,
    Certification,
    /// Diagnostics outside training and certification.
    Evaluation,
}

const PHASES: usize = 4;

impl Phase {
    fn index(self) -> usize {
        match self {
            Phase::Reference => 0,
            Phase::Training => 1,
            Phase::Certification => 2,
            Phase::Evaluation => 3,
        }
    }
}

/// Monotone per-phase query tallies.
#[derive(Debug, Default)]
pub struct QueryCounter {
    phases: [AtomicU64; PHASES],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuerySnapshot {
    pub reference: u64,
    pub training: u64,
    pub certification: u64,
    pub evaluation: u64,
}

impl QuerySnapshot {
    pub fn total(&self) -> u64 {
        self.reference + self.training + self.certification + self.evaluation
    }

    pub fn phase(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Reference => self.reference,
            Phase::Training => self.training,
            Phase::Certification => self.certification,
            Phase::Evaluation => self.evaluation,
        }
    }
}

impl QueryCounter {
    fn add(&self, phase: Phase, n: u64) {
        self.phases[phase.index()].fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> QuerySnapshot {
        let get = |p: Phase| self.phases[p.index()].load(Ordering::Relaxed);
        QuerySnapshot {
            reference: get(Phase::Reference),
            training: get(Phase::Training),
            certification: get(Phase::Certification),
            evaluation: get(Phase::Evaluation),
        }
    }

    pub fn total(&self) -> u64 {
        self.snapshot().total()
    }
}

pub struct BlackBox {
    model: Box<dyn Predictor>,
    input_shape: Vec<usize>,
    classes: usize,
    input_range: Option<(f64, f64)>,
    counter: QueryCounter,
}

impl BlackBox {
    /// Seals `model`. When `input_range` is set, queries with any entry
    /// outside it are rejected.
    pub fn seal(model: impl Predictor + 'static, input_range: Option<(f64, f64)>) -> Self {
        let input_shape = model.input_shape();
        let classes = model.classes();
        Self {
            model: Box::new(model),
            input_shape,
            classes,
            input_range,
            counter: QueryCounter::default(),
        }
    }

    /// Seals an image classifier with the `[0, 1]` pixel range.
    pub fn seal_image_classifier(classifier: Classifier) -> Self {
        Self::seal(classifier, Some((0.0, 1.0)))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counter(&self) -> &QueryCounter {
        &self.counter
    }

    pub fn queries(&self) -> QuerySnapshot {
        self.counter.snapshot()
    }

    /// Clamps `x` into the valid input range (identity when unbounded).
    pub fn project(&self, x: &Tensor) -> Tensor {
        match self.input_range {
            Some((lo, hi)) => x.clamp(lo, hi),
            None => x.clone(),
        }
    }

    fn validate(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::QueryRejected(format!(
                "input shape {:?} does not match model input (N, {:?})",
                batch.shape(),
                self.input_shape
            )));
        }
        if let Some(pos) = batch.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::QueryRejected(format!("non-finite input at flat index {pos}")));
        }
        if let Some((lo, hi)) = self.input_range {
            if let Some(pos) = batch.data().iter().position(|&v| v < lo || v > hi) {
                return Err(Error::QueryRejected(format!(
                    "input value {} at flat index {pos} outside [{lo}, {hi}]",
                    batch.data()[pos]
                )));
            }
        }
        Ok(())
    }

    /// Evaluates every item of `batch`; the counter for `phase` advances by
    /// the batch size only on success.
    pub fn query(&self, phase: Phase, batch: &Tensor) -> Result<Vec<BlackBoxReply>> {
        self.validate(batch)?;
        let rows = self.model.predict(batch)?;
        if rows.len() != batch.batch() || rows.iter().any(|r| r.len() != self.classes) {
            return Err(Error::QueryRejected("model returned malformed probabilities".into()));
        }
        self.counter.add(phase, rows.len() as u64);
        Ok(rows.into_iter().map(BlackBoxReply::from_probabilities).collect())
    }

    /// Single-input convenience; `x` carries a leading dimension of 1.
    pub fn query_one(&self, phase: Phase, x: &Tensor) -> Result<BlackBoxReply> {
        if x.batch() != 1 {
            return Err(Error::QueryRejected(format!(
                "query_one expects a batch of 1, got {}",
                x.batch()
            )));
        }
        Ok(self.query(phase, x)?.pop().expect("one reply"))
    }
}

/// Full-access handle to a classifier, for first-order baselines only.
pub struct WhiteBox {
    classifier: Classifier,
}

pub struct WhiteBoxOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub cache: ClassifierCache,
}

impl WhiteBox {
    pub fn new(classifier: Classifier) -> Self {
        Self { classifier }
    }

    pub fn forward(&self, x: &Tensor) -> Result<WhiteBoxOutput> {
        let out = self.classifier.forward(x, Mode::Inference)?;
        Ok(WhiteBoxOutput {
            logits: out.logits,
            probabilities: out.probabilities,
            cache: out.cache,
        })
    }

    /// Gradient of a loss w.r.t. the input, given its gradient w.r.t. the
    /// logits. Classifier parameters are never changed.
    pub fn input_gradient(&mut self, cache: &ClassifierCache, grad_logits: &Tensor) -> Result<Tensor> {
        use crate::numerics::Module;
        let g = self.classifier.backward(cache, grad_logits)?;
        self.classifier.zero_grad();
        Ok(g)
    }
}

/// Toy predictors with analytically known behaviour.
pub mod toy {
    use super::*;

    /// Always answers `label` with probability 1.
    pub struct Constant {
        pub input_shape: Vec<usize>,
        pub classes: usize,
        pub label: usize,
    }

    impl Predictor for Constant {
        fn input_shape(&self) -> Vec<usize> {
            self.input_shape.clone()
        }
        fn classes(&self) -> usize {
            self.classes
        }
        fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
            let mut row = vec![0.0; self.classes];
            row[self.label] = 1.0;
            Ok(vec![row; batch.batch()])
        }
    }

    /// Two-class linear rule: class 1 iff `w·x > 0`.
    pub struct LinearSign {
        pub weights: Vec<f64>,
    }

    impl Predictor for LinearSign {
        fn input_shape(&self) -> Vec<usize> {
            vec![self.weights.len()]
        }
        fn classes(&self) -> usize {
            2
        }
        fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
            Ok((0..batch.batch())
                .map(|i| {
                    let s: f64 = batch
                        .item_slice(i)
                        .iter()
                        .zip(&self.weights)
                        .map(|(a, b)| a * b)
                        .sum();
                    if s > 0.0 {
                        vec![0.0, 1.0]
                    } else {
                        vec![1.0, 0.0]
                    }
                })
                .collect())
        }
    }
}
