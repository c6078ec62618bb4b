use decouple_tensor::{Conv2dSpec, Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{leaky_gain, Conv};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Channels of each stride-2 stage; the last one is the embedding size.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            seed: 0xE4B3_DD00,
        }
    }
}

/// Frozen random convolutional embedder: stride-2 3×3 stages with leaky ReLUs
/// followed by global average pooling. Stands in for a pretrained image
/// classifier when computing distribution distances.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbedderConfig,
    pub params: ParamStore,
    stages: Vec<Conv>,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config("embedder needs at least one stage of nonzero width".into()));
        }
        let mut rng = rng_for(config.seed, stream::INIT_EMBEDDER);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut stages = Vec::with_capacity(config.widths.len());
        for (k, &w) in config.widths.iter().enumerate() {
            stages.push(Conv::new(
                &mut store,
                &format!("stage{k}"),
                cin,
                w,
                3,
                Conv2dSpec::strided(3, 2),
                leaky_gain(SLOPE),
                true,
                &mut rng,
            ));
            cin = w;
        }
        Ok(Self {
            config,
            params: store,
            stages,
        })
    }

    pub fn dim(&self) -> usize {
        *self.config.widths.last().expect("validated nonempty")
    }

    /// `[N, 3, H, W]` batch → `N` embeddings of length [`Embedder::dim`].
    pub fn embed(&self, images: &Tensor) -> Vec<Vec<f64>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let mut h = g.constant(images.clone()).add_scalar(-0.5).scale(2.0);
        for conv in &self.stages {
            h = conv.apply(&p, h).leaky_relu(SLOPE);
        }
        let v = h.value();
        let [n, c, hh, ww] = v.shape();
        let plane = hh * ww;
        (0..n)
            .map(|b| {
                v.item(b)
                    .chunks(plane)
                    .take(c)
                    .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                    .collect()
            })
            .collect()
    }
}
