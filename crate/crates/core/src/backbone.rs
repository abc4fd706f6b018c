use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Matrix;

/// One named weight matrix. Weights are stored input-major (`d_in × d_out`):
/// a layer maps a row vector `h` to `h · W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub weight: Matrix,
}

/// Ordered chain of `L ≥ 2` named layers hosting projections and adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredBackbone {
    layers: Vec<Layer>,
}

impl LayeredBackbone {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::ConfigInvalid(format!("backbone needs at least 2 layers, got {}", layers.len())));
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::ConfigInvalid(format!("duplicate layer name {}", layer.name)));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "{} outputs {} features but {} expects {}",
                    pair[0].name,
                    pair[0].weight.cols(),
                    pair[1].name,
                    pair[1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    pub fn weight(&self, i: usize) -> &Matrix {
        &self.layers[i].weight
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.weight)
    }

    /// Replaces the weight of layer `i`, keeping its shape.
    pub fn set_weight(&mut self, i: usize, weight: Matrix) -> Result<()> {
        if weight.shape() != self.layers[i].weight.shape() {
            return Err(Error::ShapeMismatch(format!(
                "layer {} is {:?}, replacement is {:?}",
                self.layers[i].name,
                self.layers[i].weight.shape(),
                weight.shape()
            )));
        }
        self.layers[i].weight = weight;
        Ok(())
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.layers[i].weight
    }

    pub fn same_layout(&self, other: &LayeredBackbone) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.weight.shape() == b.weight.shape())
    }

    pub fn max_abs_diff(&self, other: &LayeredBackbone) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.weight.max_abs_diff(&b.weight))
            .fold(0.0, f64::max)
    }
}
