use decouple_tensor::{Bound, Conv2dSpec, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{leaky_gain, Conv};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureNetConfig {
    /// Output channels per stage; at least three stages.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32],
            seed: 0x5EED,
        }
    }
}

/// Frozen, randomly initialised dilated-convolution pyramid used as the
/// perceptual feature space. Stage `k` halves the resolution and then applies
/// a 3×3 convolution with dilation `2^k`, so receptive fields grow quickly.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    pub params: ParamStore,
    stages: Vec<(Conv, Conv)>,
}

impl FeatureNet {
    pub fn new(config: FeatureNetConfig) -> Result<Self> {
        if config.widths.len() < 3 || config.widths.contains(&0) {
            return Err(Error::Config(
                "feature net needs at least three stages of nonzero width".into(),
            ));
        }
        let mut rng = rng_for(config.seed, stream::INIT_FEATURES);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut stages = Vec::new();
        for (k, &w) in config.widths.iter().enumerate() {
            let gain = leaky_gain(SLOPE);
            let down = Conv::new(&mut store, &format!("stage{k}.down"), cin, w, 3, Conv2dSpec::strided(3, 2), gain, true, &mut rng);
            let dil = Conv::new(
                &mut store,
                &format!("stage{k}.dilated"),
                w,
                w,
                3,
                Conv2dSpec::same(3, 1 << k),
                gain,
                true,
                &mut rng,
            );
            stages.push((down, dil));
            cin = w;
        }
        Ok(Self {
            config,
            params: store,
            stages,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Binds the (always frozen) weights onto `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.params.bind(g, false)
    }

    /// Stage outputs for a `[N, 3, H, W]` batch in `[0, 1]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Vec<Var<'g>> {
        let mut h = x.add_scalar(-0.5).scale(2.0);
        let mut out = Vec::with_capacity(self.stages.len());
        for (down, dil) in &self.stages {
            h = down.apply(p, h).leaky_relu(SLOPE);
            h = dil.apply(p, h).leaky_relu(SLOPE);
            out.push(h);
        }
        out
    }

    pub fn features(&self, images: &Tensor) -> Vec<Tensor> {
        let g = Graph::new();
        let p = self.bind(&g);
        self.forward(&p, g.constant(images.clone()))
            .iter()
            .map(|v| v.value().as_ref().clone())
            .collect()
    }

    pub fn image_features(&self, image: &Image) -> Vec<Tensor> {
        self.features(&image.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> FeatureNet {
        FeatureNet::new(FeatureNetConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_and_discriminative() {
        let f = net();
        let a = Tensor::from_vec([1, 3, 32, 32], (0..3072).map(|i| (i % 17) as f64 / 17.0).collect());
        let b = Tensor::full([1, 3, 32, 32], 0.5);
        let fa = f.features(&a);
        assert_eq!(fa, f.features(&a));
        assert_eq!(fa.len(), 3);
        assert_eq!(fa[0].shape(), [1, 16, 16, 16]);
        assert_eq!(fa[2].shape(), [1, 32, 4, 4]);
        let fb = f.features(&b);
        let diff: f64 = fa[2].data().iter().zip(fb[2].data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(diff > 0.0);
        assert_eq!(f.params.checksum(), net().params.checksum());
    }

    #[test]
    fn footprint_grows_with_stage() {
        let f = net();
        let size = 64;
        let base = Tensor::from_vec(
            [1, 3, size, size],
            (0..3 * size * size).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect(),
        );
        let mut poked = base.clone();
        poked.data_mut()[32 * size + 32] += 0.5;
        let fa = f.features(&base);
        let fb = f.features(&poked);
        let fractions: Vec<f64> = fa
            .iter()
            .zip(&fb)
            .map(|(a, b)| {
                let [_, c, h, w] = a.shape();
                let plane = h * w;
                let touched = (0..plane)
                    .filter(|&p| (0..c).any(|ch| a.data()[ch * plane + p] != b.data()[ch * plane + p]))
                    .count();
                touched as f64 / plane as f64
            })
            .collect();
        for k in 1..fractions.len() {
            assert!(fractions[k] > fractions[k - 1], "{fractions:?}");
        }
    }
}
