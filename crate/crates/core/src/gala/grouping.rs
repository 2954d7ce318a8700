use serde::{Deserialize, Serialize};

use super::Granularity;
use crate::nn::Network;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub layers: Vec<usize>,
}

/// Ordered partition of a network's parameterized layers into selection units.
///
/// Parameter-free layers (activations) never belong to a group: they have nothing to
/// update and their cosine would always be undefined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterGrouping {
    groups: Vec<ParamGroup>,
    layer_lens: Vec<usize>,
}

impl ParameterGrouping {
    pub fn new(net: &Network, groups: Vec<ParamGroup>) -> Result<Self> {
        let expected = net.parameterized_layers();
        let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.layers.iter().copied()).collect();
        seen.sort_unstable();
        if seen != expected {
            return Err(Error::config(
                "groups must cover every parameterized layer exactly once",
            ));
        }
        if groups.iter().any(|g| g.layers.is_empty()) {
            return Err(Error::config("empty parameter group"));
        }
        let layer_lens = net.layers().iter().map(|l| l.param_count()).collect();
        Ok(Self { groups, layer_lens })
    }

    /// One group per parameterized layer.
    pub fn single_layer(net: &Network) -> Self {
        let groups = net
            .parameterized_layers()
            .into_iter()
            .map(|l| ParamGroup {
                name: format!("layer{l}"),
                layers: vec![l],
            })
            .collect();
        Self::new(net, groups).expect("per-layer partition is valid")
    }

    /// Contiguous blocks of near-equal layer count; earlier blocks take the remainder.
    pub fn blocks(net: &Network, blocks: usize) -> Result<Self> {
        let layers = net.parameterized_layers();
        if blocks == 0 {
            return Err(Error::config("block count must be positive"));
        }
        if blocks > layers.len() {
            return Err(Error::config(format!(
                "{blocks} blocks requested but the network has {} parameterized layers",
                layers.len()
            )));
        }
        let base = layers.len() / blocks;
        let extra = layers.len() % blocks;
        let mut groups = Vec::with_capacity(blocks);
        let mut start = 0;
        for b in 0..blocks {
            let len = base + usize::from(b < extra);
            groups.push(ParamGroup {
                name: format!("block{b}"),
                layers: layers[start..start + len].to_vec(),
            });
            start += len;
        }
        Self::new(net, groups)
    }

    pub fn for_granularity(net: &Network, granularity: Granularity, blocks: usize) -> Result<Self> {
        match granularity {
            Granularity::SingleLayer | Granularity::MultiLayer => Ok(Self::single_layer(net)),
            Granularity::Block => Self::blocks(net, blocks),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    /// Concatenates each group's layer vectors.
    pub fn gather(&self, layers: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_layers(layers)?;
        Ok(self
            .groups
            .iter()
            .map(|g| g.layers.iter().flat_map(|&l| layers[l].iter().copied()).collect())
            .collect())
    }

    /// Writes grouped vectors back into per-layer storage.
    pub fn scatter(&self, grouped: &[Vec<f64>], layers: &mut [Vec<f64>]) -> Result<()> {
        self.check_layers(layers)?;
        if grouped.len() != self.groups.len() {
            return Err(Error::shape("group count differs from grouping"));
        }
        for (g, values) in self.groups.iter().zip(grouped) {
            let total: usize = g.layers.iter().map(|&l| self.layer_lens[l]).sum();
            if values.len() != total {
                return Err(Error::shape(format!("group {} has wrong length", g.name)));
            }
            let mut offset = 0;
            for &l in &g.layers {
                let n = self.layer_lens[l];
                layers[l].copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    fn check_layers(&self, layers: &[Vec<f64>]) -> Result<()> {
        if layers.len() != self.layer_lens.len() || layers.iter().zip(&self.layer_lens).any(|(v, &n)| v.len() != n) {
            return Err(Error::shape("layer vectors do not match the grouped network"));
        }
        Ok(())
    }
}
