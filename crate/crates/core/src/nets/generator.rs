use decouple_tensor::{Conv2dSpec, Graph, ParamStore, Tensor, Var};
use decouple_tensor::Bound;
use serde::{Deserialize, Serialize};

use super::{Conv, RELU_GAIN};
use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_width: usize,
    /// Number of stride-2 downsampling stages.
    pub n_down: usize,
    pub n_blocks: usize,
    /// Use Fourier-domain global branches in the residual blocks.
    pub spectral_blocks: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            n_down: 2,
            n_blocks: 4,
            spectral_blocks: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 8 {
            return Err(Error::Config(format!("generator base_width {} < 8", self.base_width)));
        }
        if self.n_blocks < 1 {
            return Err(Error::Config("generator needs at least one residual block".into()));
        }
        if self.n_down > 6 {
            return Err(Error::Config(format!("generator n_down {} is too deep", self.n_down)));
        }
        Ok(())
    }

    fn bottleneck_width(&self) -> usize {
        self.base_width << self.n_down
    }
}

/// Path from the global half of the channels back to itself.
#[derive(Clone, Debug)]
enum GlobalPath {
    /// Reduce, FFT, pointwise transform of (re, im), inverse FFT, expand.
    Spectral { reduce: Conv, freq: Conv, expand: Conv },
    Spatial(Conv),
}

/// Convolution mixing a local and a global channel group.
#[derive(Clone, Debug)]
struct SplitConv {
    local_to_local: Conv,
    global_to_local: Conv,
    local_to_global: Conv,
    global_path: GlobalPath,
    local: usize,
    global: usize,
}

impl SplitConv {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, gain: f64, rng: &mut impl rand::Rng) -> Self {
        let c = cfg.bottleneck_width();
        let global = c / 2;
        let local = c - global;
        let same = Conv2dSpec::same(3, 1);
        let point = Conv2dSpec::same(1, 1);
        let local_to_local = Conv::new(store, &format!("{name}.l2l"), local, local, 3, same, gain, true, rng);
        let global_to_local = Conv::new(store, &format!("{name}.g2l"), global, local, 3, same, gain, false, rng);
        let local_to_global = Conv::new(store, &format!("{name}.l2g"), local, global, 3, same, gain, true, rng);
        let global_path = if cfg.spectral_blocks {
            let half = global / 2;
            GlobalPath::Spectral {
                reduce: Conv::new(store, &format!("{name}.g2g.reduce"), global, half, 1, point, RELU_GAIN, true, rng),
                freq: Conv::new(store, &format!("{name}.g2g.freq"), 2 * half, 2 * half, 1, point, RELU_GAIN, true, rng),
                expand: Conv::new(store, &format!("{name}.g2g.expand"), half, global, 1, point, gain, false, rng),
            }
        } else {
            GlobalPath::Spatial(Conv::new(store, &format!("{name}.g2g"), global, global, 3, same, gain, false, rng))
        };
        Self {
            local_to_local,
            global_to_local,
            local_to_global,
            global_path,
            local,
            global,
        }
    }

    fn apply<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let xl = x.slice_channels(0, self.local);
        let xg = x.slice_channels(self.local, self.global);
        let yl = self.local_to_local.apply(p, xl).add(self.global_to_local.apply(p, xg));
        let gg = match &self.global_path {
            GlobalPath::Spectral { reduce, freq, expand } => {
                let x1 = reduce.apply(p, xg).relu();
                let spec = freq.apply(p, x1.fft2()).relu();
                expand.apply(p, x1.add(spec.ifft2_real()))
            }
            GlobalPath::Spatial(conv) => conv.apply(p, xg),
        };
        let yg = self.local_to_global.apply(p, xl).add(gg);
        x.graph().concat_channels(&[yl, yg])
    }
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Conv,
    down: Vec<Conv>,
    blocks: Vec<(SplitConv, SplitConv)>,
    up: Vec<Conv>,
    head: Conv,
}

/// Encoder, residual split-channel blocks, nearest-upsampling decoder.
/// Input is the masked image stacked with the hole indicator; output is an
/// RGB image in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub params: ParamStore,
    layers: Layers,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::INIT_GENERATOR);
        let mut store = ParamStore::new();
        let b = config.base_width;
        let stem = Conv::new(&mut store, "stem", 4, b, 5, Conv2dSpec::same(5, 1), RELU_GAIN, true, &mut rng);
        let down = (0..config.n_down)
            .map(|i| {
                let cin = b << i;
                Conv::new(
                    &mut store,
                    &format!("down{i}"),
                    cin,
                    cin * 2,
                    3,
                    Conv2dSpec::strided(3, 2),
                    RELU_GAIN,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let a = SplitConv::new(&mut store, &format!("block{i}.a"), &config, RELU_GAIN, &mut rng);
                // Second half starts small so each block begins close to identity.
                let c = SplitConv::new(&mut store, &format!("block{i}.b"), &config, 0.5, &mut rng);
                (a, c)
            })
            .collect();
        let up = (0..config.n_down)
            .rev()
            .map(|i| {
                let cin = b << (i + 1);
                Conv::new(
                    &mut store,
                    &format!("up{i}"),
                    cin,
                    cin / 2,
                    3,
                    Conv2dSpec::same(3, 1),
                    RELU_GAIN,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let head = Conv::new(&mut store, "head", b, 3, 5, Conv2dSpec::same(5, 1), 1.0, true, &mut rng);
        Ok(Self {
            config,
            seed,
            params: store,
            layers: Layers {
                stem,
                down,
                blocks,
                up,
                head,
            },
        })
    }

    /// Checks that `h × w` survives the downsampling stages exactly.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.config.n_down;
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "generator input {h}x{w} is not a multiple of {f}"
            )));
        }
        Ok(())
    }

    /// Raw output for a batch. `image` is `[N, 3, H, W]`; `known` is
    /// `[N, 1, H, W]` with 1 on known pixels.
    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>, known: &Tensor) -> Result<Var<'g>> {
        let [n, c, h, w] = image.shape();
        if c != 3 || known.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "generator expects [N,3,H,W] image and [N,1,H,W] mask, got {:?} and {:?}",
                image.shape(),
                known.shape()
            )));
        }
        self.check_size(h, w)?;
        let g = image.graph();
        let hole = known.map(|v| 1.0 - v);
        let x = g.concat_channels(&[image.mul_const(known.clone()), g.constant(hole)]);
        let l = &self.layers;
        let mut x = l.stem.apply(p, x).relu();
        for conv in &l.down {
            x = conv.apply(p, x).relu();
        }
        for (a, b) in &l.blocks {
            x = x.add(b.apply(p, a.apply(p, x).relu()));
        }
        for conv in &l.up {
            x = conv.apply(p, x.upsample_nearest(2)).relu();
        }
        Ok(l.head.apply(p, x).sigmoid())
    }

    /// Inference on one image with frozen weights.
    pub fn infer(&self, image: &Image, mask: &Mask) -> Result<Image> {
        crate::data::check_dims(image.dims(), mask.dims(), "generator mask")?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(image.to_tensor()), &mask.to_tensor())?;
        Image::from_tensor(&out.value(), 0)
    }

    /// Inference on a batch tensor with frozen weights.
    pub fn infer_batch(&self, images: &Tensor, known: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(images.clone()), known)?;
        Ok(out.value().as_ref().clone())
    }
}
