//! Generator, patch discriminator, frozen feature pyramid and the parameter
//! container shared by checkpoints.
//!
//! Every network is rebuilt deterministically from its config and seed;
//! persisted state is just the parameter values.

mod container;
mod discriminator;
mod embedder;
mod features;
mod generator;

pub use container::{read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use discriminator::{Critic, Discriminator, DiscriminatorConfig};
pub use embedder::{Embedder, EmbedderConfig};
pub use features::{FeatureNet, FeatureNetConfig};
pub use generator::{Generator, GeneratorConfig};

use decouple_tensor::{kaiming_normal, Bound, Conv2dSpec, ParamStore, Tensor, Var};
use rand::Rng;

/// Convolution whose weights live in a [`ParamStore`] by index.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    weight: usize,
    bias: Option<usize>,
    spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_normal([cout, cin, k, k], gain, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])));
        Self { weight, bias, spec }
    }

    pub(crate) fn apply<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }
}

pub(crate) const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// He gain for a leaky ReLU with negative slope `a`.
pub(crate) fn leaky_gain(a: f64) -> f64 {
    (2.0 / (1.0 + a * a)).sqrt()
}
