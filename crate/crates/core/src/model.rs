use serde::{Deserialize, Serialize};

use crate::counterfact::{generate_all, render_set, CounterfactualBatch, CounterfactualSet};
use crate::dataio::{ClusterIndex, Dataset, FeatureLayout, Preprocessor, RawDataset, RawValue, Schema};
use crate::error::{Error, Result};
use crate::flow::{DensityThresholds, FlowModel};
use crate::gradcore::Tensor;
use crate::hypernet::{feature_importance, FeatureImportance, HyperNetwork};
use crate::training::TrainConfig;

/// A trained classifier together with everything needed to encode inputs
/// and score counterfactuals.
#[derive(Clone, Debug)]
pub struct Model {
    pub schema: Schema,
    pub preprocessor: Preprocessor,
    pub hypernet: HyperNetwork,
    pub flow: FlowModel,
    pub thresholds: DensityThresholds,
    pub clusters: ClusterIndex,
    pub config: TrainConfig,
}

/// Prediction, explanation and counterfactuals for one raw row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub importance: FeatureImportance,
    pub counterfactuals: CounterfactualSet,
}

impl Model {
    pub fn layout(&self) -> FeatureLayout {
        self.preprocessor.layout()
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    /// Encodes a raw dataset whose schema matches the model's.
    pub fn encode(&self, data: &RawDataset) -> Result<Dataset> {
        if data.schema.columns != self.schema.columns {
            return Err(Error::Schema("dataset columns differ from the model schema".into()));
        }
        self.preprocessor.encode(data, None)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.hypernet.predict_proba(x)
    }

    pub fn counterfactuals(&self, x: &Tensor) -> Result<CounterfactualBatch> {
        generate_all(&self.hypernet, &self.flow, &self.layout(), x)
    }

    /// Full explanation of one raw row.
    pub fn explain(&self, row: &[RawValue]) -> Result<Explanation> {
        let mut enc = vec![0.0; self.preprocessor.dim()];
        self.preprocessor.encode_row(row, &mut enc)?;
        let x = Tensor::row_vector(&enc);
        let batch = self.counterfactuals(&x)?;
        let counterfactuals = render_set(&self.preprocessor, &x, &batch, 0, self.thresholds.global);
        let importance = feature_importance(&self.hypernet, &enc)?;
        Ok(Explanation {
            importance,
            counterfactuals,
        })
    }
}
