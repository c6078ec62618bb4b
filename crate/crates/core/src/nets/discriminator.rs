use decouple_tensor::{Bound, Conv2dSpec, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{leaky_gain, Conv};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

const SLOPE: f64 = 0.2;

/// Anything that scores image patches as real or fake.
pub trait Critic {
    fn params(&self) -> &ParamStore;

    /// Patch logits `[N, 1, h, w]` and the intermediate feature maps.
    fn critic<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> (Var<'g>, Vec<Var<'g>>);

    fn logits<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.critic(p, x).0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Number of feature layers; the first three halve the resolution.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            n_layers: 4,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            return Err(Error::Config(format!("discriminator n_layers {} < 3", self.n_layers)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("discriminator base_width is 0".into()));
        }
        Ok(())
    }

    /// Total downsampling factor of the logits map.
    pub fn stride(&self) -> usize {
        1 << self.n_layers.min(3)
    }
}

/// Patch discriminator: a stack of 3×3 convolutions with leaky ReLUs whose
/// outputs double as feature-matching targets, then a 3×3 logit head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub seed: u64,
    pub params: ParamStore,
    layers: Vec<Conv>,
    head: Conv,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::INIT_DISCRIMINATOR);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let cout = config.base_width << i.min(2);
            let spec = if i < 3 {
                Conv2dSpec::strided(3, 2)
            } else {
                Conv2dSpec::same(3, 1)
            };
            layers.push(Conv::new(
                &mut store,
                &format!("layer{i}"),
                cin,
                cout,
                3,
                spec,
                leaky_gain(SLOPE),
                true,
                &mut rng,
            ));
            cin = cout;
        }
        let head = Conv::new(&mut store, "head", cin, 1, 3, Conv2dSpec::same(3, 1), 1.0, true, &mut rng);
        Ok(Self {
            config,
            seed,
            params: store,
            layers,
            head,
        })
    }

    /// Frozen forward pass returning logits and feature maps.
    pub fn evaluate(&self, images: &Tensor) -> (Tensor, Vec<Tensor>) {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let (logits, feats) = self.critic(&p, g.constant(images.clone()));
        let out = logits.value().as_ref().clone();
        (out, feats.iter().map(|f| f.value().as_ref().clone()).collect())
    }
}

impl Critic for Discriminator {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn critic<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> (Var<'g>, Vec<Var<'g>>) {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for conv in &self.layers {
            h = conv.apply(p, h).leaky_relu(SLOPE);
            feats.push(h);
        }
        (self.head.apply(p, h), feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_counts() {
        let d = Discriminator::new(
            DiscriminatorConfig {
                base_width: 8,
                n_layers: 4,
            },
            0,
        )
        .unwrap();
        let x = Tensor::full([2, 3, 64, 64], 0.3);
        let (logits, feats) = d.evaluate(&x);
        assert_eq!(logits.shape(), [2, 1, 8, 8]);
        assert_eq!(feats.len(), 4);
        assert_eq!(feats[0].shape(), [2, 8, 32, 32]);
        assert_eq!(feats[3].shape(), [2, 32, 8, 8]);
        assert_eq!(feats[3].len(), 2 * 32 * 8 * 8);
        assert_eq!(d.evaluate(&x).0, logits);
        assert!(logits.all_finite());
    }

    #[test]
    fn rejects_shallow_config() {
        assert!(Discriminator::new(
            DiscriminatorConfig {
                base_width: 8,
                n_layers: 2
            },
            0
        )
        .is_err());
    }
}
