use super::Classifier;
use crate::error::Result;
use crate::types::{CostLedger, FeatureVector, PredictionDistribution};

/// Anything that maps an embedding to a class posterior.
pub trait Predictor: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, x: &FeatureVector) -> Result<PredictionDistribution>;
}

impl Predictor for Classifier {
    fn input_dim(&self) -> usize {
        self.architecture().input_dim
    }

    fn output_dim(&self) -> usize {
        self.architecture().output_dim
    }

    fn predict(&self, x: &FeatureVector) -> Result<PredictionDistribution> {
        Classifier::predict(self, x)
    }
}

/// Query-only access to a model. The wrapped model's weights and training
/// data are unreachable through this type; every query is counted.
pub struct BlackBoxHandle<'a> {
    inner: &'a dyn Predictor,
    ledger: CostLedger,
}

impl<'a> BlackBoxHandle<'a> {
    pub fn new(inner: &'a dyn Predictor) -> Self {
        Self {
            inner,
            ledger: CostLedger::default(),
        }
    }

    pub fn query(&mut self, x: &FeatureVector) -> Result<PredictionDistribution> {
        let response = self.inner.predict(x)?;
        self.ledger.record_query();
        Ok(response)
    }

    /// Embedding dimension the model accepts.
    pub fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// Length of every response.
    pub fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    /// Charge `count` responses materialized as pseudo-samples of
    /// `bytes_each` encoded bytes.
    pub fn record_transfer(&mut self, count: u64, bytes_each: u64) {
        self.ledger.record_pseudo_samples(count, count * bytes_each);
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger
    }
}

pub fn query_blackbox(handle: &mut BlackBoxHandle<'_>, x: &FeatureVector) -> Result<PredictionDistribution> {
    handle.query(x)
}
