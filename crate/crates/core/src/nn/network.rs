use serde::{Deserialize, Serialize};

use super::layer::{Aux, LayerSpec};
use super::params::{LayerParams, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// An ordered stack of layers applied to inputs of `input_shape` (batch axis excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

struct TapeEntry {
    input: Tensor,
    aux: Aux,
}

/// Intermediates of one forward pass. Backward may consume it once.
pub struct Tape {
    entries: Vec<TapeEntry>,
    output_shape: Vec<usize>,
    consumed: bool,
}

impl Tape {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input_shape,
            layers,
        }
    }

    /// Activation shape before every layer plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::shape(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    /// `(layer index, (weight shape, bias shape))` for each parameterized layer.
    pub fn param_shapes(&self) -> Result<Vec<(usize, (Vec<usize>, Vec<usize>))>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(s) = layer.param_shapes(&shapes[i])? {
                out.push((i, s));
            }
        }
        Ok(out)
    }

    fn layer_params<'a>(
        &self,
        params: &'a ParameterSet,
        i: usize,
    ) -> Result<Option<(&'a Tensor, &'a Tensor)>> {
        if !self.layers[i].has_params() {
            return Ok(None);
        }
        params
            .get(i)
            .map(|p| Some((&p.weight, &p.bias)))
            .ok_or_else(|| Error::shape(format!("missing parameters for layer {i}")))
    }

    /// Applies every layer to a batch shaped `[B, input_shape..]`.
    pub fn forward(&self, params: &ParameterSet, input: &Tensor) -> Result<(Tensor, Tape)> {
        let shapes = self.shapes()?;
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::shape(format!(
                "network expects [B, {:?}], got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        params.validate_for(self)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, aux) = layer.forward(&shapes[i], self.layer_params(params, i)?, &x)?;
            entries.push(TapeEntry { input: x, aux });
            x = y;
        }
        let output_shape = x.shape().to_vec();
        Ok((
            x,
            Tape {
                entries,
                output_shape,
                consumed: false,
            },
        ))
    }

    /// Forward without keeping a tape.
    pub fn predict(&self, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(params, input)?.0)
    }

    /// Reverse-mode pass seeded with `upstream` (d loss / d output).
    ///
    /// Returns gradients for every parameterized layer and d loss / d input.
    pub fn backward(
        &self,
        params: &ParameterSet,
        tape: &mut Tape,
        upstream: &Tensor,
    ) -> Result<(ParameterSet, Tensor)> {
        if tape.consumed {
            return Err(Error::State(
                "tape already consumed by a backward pass".into(),
            ));
        }
        if tape.entries.len() != self.layers.len() {
            return Err(Error::State(format!(
                "tape records {} layers, network has {}",
                tape.entries.len(),
                self.layers.len()
            )));
        }
        if upstream.shape() != tape.output_shape.as_slice() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match forward output {:?}",
                upstream.shape(),
                tape.output_shape
            )));
        }
        tape.consumed = true;
        let shapes = self.shapes()?;
        let entries = std::mem::take(&mut tape.entries);
        let mut grads = ParameterSet::new();
        let mut g = upstream.clone();
        for (i, entry) in entries.into_iter().enumerate().rev() {
            let layer = &self.layers[i];
            let (pg, gx) = layer.backward(
                &shapes[i],
                self.layer_params(params, i)?,
                &entry.input,
                &entry.aux,
                &g,
            )?;
            if let Some((weight, bias)) = pg {
                grads.insert(i, LayerParams { weight, bias });
            }
            g = gx;
        }
        Ok((grads, g))
    }
}

/// A network cut into a client part (`layers[..split_index]`) and a server
/// part (`layers[split_index..]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitModelSpec {
    pub network: NetworkSpec,
    pub split_index: usize,
}

impl SplitModelSpec {
    pub fn new(network: NetworkSpec, split_index: usize) -> Result<Self> {
        let spec = SplitModelSpec {
            network,
            split_index,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.network.layers.len();
        if self.split_index < 1 || self.split_index >= n {
            return Err(Error::shape(format!(
                "split index {} outside 1..{n}",
                self.split_index
            )));
        }
        self.network.shapes().map(|_| ())
    }

    pub fn client_spec(&self) -> NetworkSpec {
        NetworkSpec::new(
            self.network.input_shape.clone(),
            self.network.layers[..self.split_index].to_vec(),
        )
    }

    pub fn server_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec::new(
            self.split_shape()?,
            self.network.layers[self.split_index..].to_vec(),
        ))
    }

    /// Per-sample smashed-data shape at the cut.
    pub fn split_shape(&self) -> Result<Vec<usize>> {
        Ok(self.network.shapes()?.swap_remove(self.split_index))
    }

    /// Scalars per sample crossing the cut.
    pub fn split_size(&self) -> Result<usize> {
        Ok(self.split_shape()?.iter().product())
    }

    /// Combines client and server parameters into whole-network parameters.
    pub fn join_params(&self, client: &ParameterSet, server: &ParameterSet) -> ParameterSet {
        let mut joined = client.clone();
        for (k, v) in server.shifted(self.split_index as isize).iter() {
            joined.insert(k, v.clone());
        }
        joined
    }

    /// Inverse of [`join_params`](Self::join_params).
    pub fn split_params(&self, whole: &ParameterSet) -> (ParameterSet, ParameterSet) {
        let client = whole.filter_range(0..self.split_index);
        let server = whole
            .filter_range(self.split_index..usize::MAX)
            .shifted(-(self.split_index as isize));
        (client, server)
    }
}
