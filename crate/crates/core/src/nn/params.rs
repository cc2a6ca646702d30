use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of a network, keyed by layer index.
///
/// Gradients use the same type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    #[serde(with = "layer_pairs")]
    layers: BTreeMap<usize, LayerParams>,
}

/// Layers as `[index, params]` pairs; integer map keys do not survive
/// internally tagged enums.
mod layer_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::LayerParams;

    pub fn serialize<S: Serializer>(
        layers: &BTreeMap<usize, LayerParams>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(usize, &LayerParams)> = layers.iter().map(|(&k, v)| (k, v)).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<usize, LayerParams>, D::Error> {
        Ok(Vec::<(usize, LayerParams)>::deserialize(d)?
            .into_iter()
            .collect())
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: usize, params: LayerParams) {
        self.layers.insert(index, params);
    }

    pub fn get(&self, index: usize) -> Option<&LayerParams> {
        self.layers.get(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.layers.iter().map(|(&k, v)| (k, v))
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Total scalar count (|U| for a client part).
    pub fn scalar_count(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|(&k, p)| {
                    (
                        k,
                        LayerParams {
                            weight: Tensor::zeros(p.weight.shape()),
                            bias: Tensor::zeros(p.bias.shape()),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same keys and tensor shapes.
    pub fn ensure_same_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(format!(
                "parameter sets have {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for ((ka, a), (kb, b)) in self.layers.iter().zip(&other.layers) {
            if ka != kb {
                return Err(Error::shape(format!("layer keys differ: {ka} vs {kb}")));
            }
            a.weight
                .ensure_same_shape(&b.weight, "weight shapes differ")?;
            a.bias.ensure_same_shape(&b.bias, "bias shapes differ")?;
        }
        Ok(())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.values().flat_map(|p| [&p.weight, &p.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .values_mut()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    /// All scalars in key order, weight before bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((ka, a), (kb, b))| {
                    ka == kb && a.weight.bitwise_eq(&b.weight) && a.bias.bitwise_eq(&b.bias)
                })
    }

    /// Checks keys and shapes against what `spec` requires.
    pub fn validate_for(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.param_shapes()?;
        if expected.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "network needs {} parameterized layers, parameter set has {}",
                expected.len(),
                self.layers.len()
            )));
        }
        for (idx, (ws, bs)) in expected {
            let p = self
                .layers
                .get(&idx)
                .ok_or_else(|| Error::shape(format!("missing parameters for layer {idx}")))?;
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                return Err(Error::shape(format!(
                    "layer {idx} expects weight {ws:?}/bias {bs:?}, got {:?}/{:?}",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(())
    }

    /// Re-keys every layer by `offset` (used when joining split parts).
    pub(crate) fn shifted(&self, offset: isize) -> ParameterSet {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|(&k, v)| ((k as isize + offset) as usize, v.clone()))
                .collect(),
        }
    }

    pub(crate) fn filter_range(&self, range: std::ops::Range<usize>) -> ParameterSet {
        ParameterSet {
            layers: self
                .layers
                .range(range)
                .map(|(&k, v)| (k, v.clone()))
                .collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases; each layer draws from its own stream.
pub fn init_parameters(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    let shapes = spec.shapes()?;
    let mut set = ParameterSet::new();
    for (idx, layer) in spec.layers.iter().enumerate() {
        let input = &shapes[idx];
        let Some((ws, bs)) = layer.param_shapes(input)? else {
            continue;
        };
        let (fan_in, fan_out) = layer.fans(input).expect("parameterized layer has fans");
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = rng_for(seed, &[tag::INIT, idx as u64]);
        let n: usize = ws.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = rng.random_range(-bound..bound);
                if v != -bound {
                    break v;
                }
            })
            .collect();
        set.insert(
            idx,
            LayerParams {
                weight: Tensor::new(ws, data)?,
                bias: Tensor::zeros(&bs),
            },
        );
    }
    Ok(set)
}

/// `params - learning_rate * grads`, elementwise.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    learning_rate: f64,
) -> Result<ParameterSet> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::domain(format!(
            "invalid learning rate {learning_rate}"
        )));
    }
    params.ensure_same_structure(grads)?;
    let mut out = params.clone();
    for (p, g) in out.tensors_mut().zip(grads.tensors()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= learning_rate * gv;
        }
    }
    Ok(out)
}

/// Elementwise arithmetic mean of structurally identical sets.
pub fn average_parameters(sets: &[ParameterSet]) -> Result<ParameterSet> {
    let (first, rest) = sets
        .split_first()
        .ok_or_else(|| Error::domain("cannot average an empty list of parameter sets"))?;
    for s in rest {
        first
            .ensure_same_structure(s)
            .map_err(|e| Error::domain(format!("heterogeneous parameter sets: {e}")))?;
    }
    let mut out = first.clone();
    if rest.is_empty() {
        return Ok(out);
    }
    for s in rest {
        for (acc, t) in out.tensors_mut().zip(s.tensors()) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
    }
    let n = sets.len() as f64;
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok(out)
}
