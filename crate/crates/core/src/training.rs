//! Restorer, remover and baseline training loops, checkpoints and inference.
//!
//! Every step runs one discriminator update followed by one generator update
//! on the same batch. The generator graph is built once per step: its output
//! value feeds the discriminator update and the graph itself is
//! backpropagated for the generator update against the freshly updated,
//! frozen discriminator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use decouple_tensor::{log_sigmoid, Adam, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::curation::{
    batch_masks, draw_mask_kind, gen_restorer_mask, permutation, CurationRule, MaskBank, MaskKind,
    MIN_INSTANCE_PIXELS,
};
use crate::data::{class_pixel_count, class_pixel_fraction, composite, Image, Mask, SceneSample};
use crate::error::{Error, Result};
use crate::losses::{
    afterimage_loss, discriminator_loss, feature_matching_loss, generator_adv_loss,
    gradient_penalty_with_grads, hrf_perceptual_loss, patch_mask, total_loss, LossTerms,
    LossWeights, PatchMaskMode, Phase,
};
use crate::nets::{
    read_container, write_container, Critic, Discriminator, DiscriminatorConfig, FeatureNet,
    FeatureNetConfig, Generator, GeneratorConfig,
};
use crate::rng::{derive_seed, rng_for, stream};

/// Which parts of restorer guidance the remover uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Guidance {
    /// Push remover outputs away from restorer outputs in feature space.
    pub afterimage: bool,
    /// Show restorer outputs to the discriminator as fakes in hole regions.
    pub restorer_adversarial: bool,
    /// Also apply the afterimage term on irregular-mask batches.
    pub afterimage_on_irregular: bool,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            afterimage: true,
            restorer_adversarial: true,
            afterimage_on_irregular: false,
        }
    }
}

impl Guidance {
    pub const NONE: Guidance = Guidance {
        afterimage: false,
        restorer_adversarial: false,
        afterimage_on_irregular: false,
    };

    pub fn any(&self) -> bool {
        self.afterimage || self.restorer_adversarial
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Optional cap on the total number of steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr_discriminator: f64,
    pub lr_generator: f64,
    pub seed: u64,
    pub target_class: u16,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureNetConfig,
    pub curation: CurationRule,
    pub weights: LossWeights,
    pub guidance: Guidance,
    pub patch_mask: PatchMaskMode,
    /// Largest random shift of baseline class-shaped masks, as a fraction of the side.
    pub baseline_mask_shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Remover,
            epochs: 50,
            max_steps: None,
            batch_size: 4,
            lr_discriminator: 1e-3,
            lr_generator: 1e-5,
            seed: 0,
            target_class: 1,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            features: FeatureNetConfig::default(),
            curation: CurationRule::default(),
            weights: LossWeights::default(),
            guidance: Guidance::default(),
            patch_mask: PatchMaskMode::Nearest,
            baseline_mask_shift: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0)
            || !self.lr_generator.is_finite()
            || !self.lr_discriminator.is_finite()
        {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Config("batch_size, epochs and max_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_mask_shift) {
            return Err(Error::Config("baseline_mask_shift must lie in [0, 1]".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.curation.validate()?;
        self.weights.validate()
    }

    fn weights_for_phase(&self) -> LossWeights {
        LossWeights {
            phase: self.phase,
            ..self.weights
        }
    }
}

/// One training-log row. The restorer-fake column is the discriminator's
/// hole-region loss on restorer outputs, zero when that term is inactive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub mask_kind: MaskKind,
    pub afterimage: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub adv_d_restorer: f64,
    pub hrfpl: f64,
    pub fm: f64,
    pub gp: f64,
    pub total: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

pub const LOG_HEADER: &str =
    "step\tepoch\tphase\tmask_kind\tafterimage\tadv_g\tadv_d\tadv_d_restorer\thrfpl\tfm\tgp\ttotal\tlr_g\tlr_d";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.epoch,
            self.phase,
            self.mask_kind,
            self.afterimage,
            self.adv_g,
            self.adv_d,
            self.adv_d_restorer,
            self.hrfpl,
            self.fm,
            self.gp,
            self.total,
            self.lr_g,
            self.lr_d
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::InvalidValue(format!("malformed log row `{line}`"));
        if f.len() != 14 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            phase: f[2].parse()?,
            mask_kind: f[3].parse()?,
            afterimage: num(4)?,
            adv_g: num(5)?,
            adv_d: num(6)?,
            adv_d_restorer: num(7)?,
            hrfpl: num(8)?,
            fm: num(9)?,
            gp: num(10)?,
            total: num(11)?,
            lr_g: num(12)?,
            lr_d: num(13)?,
        })
    }
}

pub fn write_log(rows: &[LogRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_tsv())?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::InvalidValue(format!("{} lacks the log header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(LogRow::from_tsv).collect()
}

/// Trained weights plus everything needed to rebuild the networks.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub metrics: BTreeMap<String, f64>,
    /// Parameter checksums of frozen guidance networks, before and after training.
    pub frozen_checksums: BTreeMap<String, [String; 2]>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    phase: Phase,
    step: u64,
    seed: u64,
    config: TrainConfig,
    metrics: BTreeMap<String, f64>,
    frozen_checksums: BTreeMap<String, [String; 2]>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            phase: self.phase,
            step: self.step,
            seed: self.seed,
            config: self.config.clone(),
            metrics: self.metrics.clone(),
            frozen_checksums: self.frozen_checksums.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_container(
            path,
            &meta,
            &[
                ("generator", &self.generator.params),
                ("discriminator", &self.discriminator.params),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
        }
        let (meta, stores) = read_container(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut generator = Generator::new(meta.config.generator.clone(), meta.seed)?;
        let mut discriminator = Discriminator::new(meta.config.discriminator.clone(), meta.seed)?;
        let take = |name: &str| {
            stores
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{} has no {name} weights", path.display())))
        };
        generator.params.load_from(take("generator")?).map_err(Error::Checkpoint)?;
        discriminator
            .params
            .load_from(take("discriminator")?)
            .map_err(Error::Checkpoint)?;
        Ok(Self {
            phase: meta.phase,
            step: meta.step,
            seed: meta.seed,
            config: meta.config,
            generator,
            discriminator,
            metrics: meta.metrics,
            frozen_checksums: meta.frozen_checksums,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Stacks images into a `[N, 3, H, W]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let images: Vec<&Image> = images.into_iter().collect();
    let (h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in &images {
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}

/// Stacks masks into a `[N, 1, H, W]` known-pixel batch.
pub fn stack_masks<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Tensor {
    let masks: Vec<&Mask> = masks.into_iter().collect();
    let (h, w) = masks[0].dims();
    let data = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| f64::from(v)))
        .collect();
    Tensor::from_vec([masks.len(), 1, h, w], data)
}

/// `raw` in holes, `images` elsewhere.
fn composite_batch(raw: &Tensor, images: &Tensor, known: &Tensor) -> Tensor {
    let hole = known.map(|v| 1.0 - v);
    let mut out = raw.zip_map(&hole.broadcast_to(raw.shape()), |r, h| r * h);
    out.add_assign(&images.zip_map(&known.broadcast_to(images.shape()), |i, k| i * k));
    out
}

/// Where masks for a batch come from.
enum MaskSource<'a> {
    /// Partial masks over target instances, regenerated every step.
    Restorer,
    /// Bank masks mixed with irregular masks.
    Mixed { bank: &'a MaskBank, shift: f64 },
}

struct Session<'a> {
    cfg: &'a TrainConfig,
    samples: Vec<&'a SceneSample>,
    masks: MaskSource<'a>,
    restorer: Option<&'a Generator>,
}

fn run(session: Session<'_>) -> Result<TrainRun> {
    let cfg = session.cfg;
    let weights = cfg.weights_for_phase();
    let n = session.samples.len();
    if n == 0 {
        return Err(Error::EmptySelection(format!("no training images for the {} phase", cfg.phase)));
    }
    let (h, w) = session.samples[0].image.dims();
    for s in &session.samples {
        crate::data::check_dims(s.image.dims(), (h, w), "training image")?;
    }

    let mut generator = Generator::new(cfg.generator.clone(), cfg.seed)?;
    generator.check_size(h, w)?;
    let mut discriminator = Discriminator::new(cfg.discriminator.clone(), cfg.seed)?;
    let phi = FeatureNet::new(cfg.features.clone())?;
    let mut frozen = BTreeMap::new();
    let phi_before = phi.params.checksum();
    let restorer_before = session.restorer.map(|r| r.params.checksum());

    let mut adam_g = Adam::new(cfg.lr_generator);
    let mut adam_d = Adam::new(cfg.lr_discriminator);
    let mut rng = rng_for(cfg.seed, stream::BATCHES);
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut budget = cfg.epochs * steps_per_epoch;
    if let Some(m) = cfg.max_steps {
        budget = budget.min(m);
    }

    let mut log = Vec::with_capacity(budget);
    let mut step = 0u64;
    'outer: for epoch in 0..cfg.epochs {
        let order = permutation(n, &mut rng);
        for chunk in order.chunks(bs) {
            if log.len() >= budget {
                break 'outer;
            }
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| session.samples[i]).collect();
            let step_seed = derive_seed(cfg.seed, step ^ stream::TRAIN_MASK);
            let (kind, masks) = match &session.masks {
                MaskSource::Restorer => {
                    let masks = batch
                        .iter()
                        .enumerate()
                        .map(|(k, s)| {
                            let ids = s.inst.instances_of_class(cfg.target_class);
                            let r = gen_restorer_mask(&s.inst, &ids, &cfg.curation, derive_seed(step_seed, k as u64))?;
                            Ok(r.mask)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (MaskKind::ClassShaped, masks)
                }
                MaskSource::Mixed { bank, shift } => {
                    let kind = draw_mask_kind(&cfg.curation, &mut rng);
                    let mut mrng = rng_for(step_seed, 1);
                    (kind, batch_masks(bank, h, kind, batch.len(), *shift, &mut mrng)?)
                }
            };
            let images = stack_images(batch.iter().map(|s| &s.image));
            let known = stack_masks(&masks);
            let guided = cfg.phase == Phase::Remover && session.restorer.is_some();
            let use_rest_adv =
                guided && cfg.guidance.restorer_adversarial && kind == MaskKind::ClassShaped;
            let use_afterimage = guided
                && cfg.guidance.afterimage
                && (kind == MaskKind::ClassShaped || cfg.guidance.afterimage_on_irregular);
            let restorer_out = match session.restorer {
                Some(r) if use_rest_adv || use_afterimage => {
                    Some(composite_batch(&r.infer_batch(&images, &known)?, &images, &known))
                }
                _ => None,
            };
            let row = train_step(
                &mut generator,
                &mut discriminator,
                &phi,
                &mut adam_g,
                &mut adam_d,
                &images,
                &known,
                restorer_out.as_ref().filter(|_| use_rest_adv),
                restorer_out.as_ref().filter(|_| use_afterimage),
                &weights,
                cfg,
            )?;
            log.push(LogRow {
                step,
                epoch,
                mask_kind: kind,
                ..row
            });
            step += 1;
        }
    }

    frozen.insert("features".to_string(), [phi_before, phi.params.checksum()]);
    if let (Some(before), Some(r)) = (restorer_before, session.restorer) {
        frozen.insert("restorer".to_string(), [before, r.params.checksum()]);
    }
    let metrics = summarise(&log);
    Ok(TrainRun {
        checkpoint: Checkpoint {
            phase: cfg.phase,
            step,
            seed: cfg.seed,
            config: cfg.clone(),
            generator,
            discriminator,
            metrics,
            frozen_checksums: frozen,
        },
        log,
    })
}

/// Means of each logged term over the last tenth of training.
fn summarise(log: &[LogRow]) -> BTreeMap<String, f64> {
    let tail = &log[log.len() - (log.len() / 10).max(1).min(log.len())..];
    let mean = |f: fn(&LogRow) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
    BTreeMap::from([
        ("afterimage".to_string(), mean(|r| r.afterimage)),
        ("adv_g".to_string(), mean(|r| r.adv_g)),
        ("adv_d".to_string(), mean(|r| r.adv_d)),
        ("hrfpl".to_string(), mean(|r| r.hrfpl)),
        ("fm".to_string(), mean(|r| r.fm)),
        ("gp".to_string(), mean(|r| r.gp)),
        ("total".to_string(), mean(|r| r.total)),
    ])
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    generator: &mut Generator,
    discriminator: &mut Discriminator,
    phi: &FeatureNet,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    images: &Tensor,
    known: &Tensor,
    restorer_fake: Option<&Tensor>,
    afterimage_target: Option<&Tensor>,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LogRow> {
    let hole = known.map(|v| 1.0 - v);
    let kept = images.zip_map(&known.broadcast_to(images.shape()), |i, k| i * k);

    let g = Graph::new();
    let pg = generator.params.bind(&g, true);
    let x = g.constant(images.clone());
    let raw = generator.forward(&pg, x, known)?;
    let out = raw.mul_const(hole).add_const(kept);
    let out_value = out.value();

    // Discriminator update on the detached output.
    let (adv_d, adv_d_restorer, gp) = {
        let gd = Graph::new();
        let pd = discriminator.params.bind(&gd, true);
        let real = discriminator.logits(&pd, gd.constant(images.clone()));
        let fake = discriminator.logits(&pd, gd.constant(out_value.clone()));
        let rest = restorer_fake.map(|r| discriminator.logits(&pd, gd.constant(r.clone())));
        let [_, _, lh, lw] = real.shape();
        let pk = patch_mask(known, lh, lw, cfg.patch_mask)?;
        let loss = discriminator_loss(real, fake, rest, &pk)?;
        let rest_term = rest.map_or(0.0, |r| {
            let v = r.value();
            -v.data()
                .iter()
                .zip(pk.data())
                .map(|(&l, &k)| log_sigmoid(-l) * (1.0 - k))
                .sum::<f64>()
                / v.len() as f64
        });
        let mut grads = pd.grads(&gd.backward(loss.scale(weights.adversarial)));
        let value = loss.item();
        let (gp, gp_grads) = gradient_penalty_with_grads(&*discriminator, images);
        for (g, p) in grads.iter_mut().zip(&gp_grads) {
            g.add_assign(&p.map(|v| v * weights.gradient_penalty));
        }
        drop(gd);
        adam_d.step(&mut discriminator.params, &grads);
        (value, rest_term, gp)
    };

    // Generator update against the updated, frozen discriminator.
    let pdf = discriminator.params.bind(&g, false);
    let (fake_logits, fake_feats) = discriminator.critic(&pdf, out);
    let (_, real_feats) = discriminator.critic(&pdf, g.constant(images.clone()));
    let adv_g = generator_adv_loss(fake_logits);
    let fm = feature_matching_loss(&real_feats, &fake_feats)?;
    let pl = hrf_perceptual_loss(phi, g.constant(images.clone()), out)?;
    let mut objective = adv_g
        .scale(weights.adversarial)
        .add(fm.scale(weights.feature_matching))
        .add(pl.scale(weights.perceptual));
    let afterimage = match afterimage_target {
        Some(t) if weights.effective_afterimage() > 0.0 => {
            let ai = afterimage_loss(phi, out, t)?;
            objective = objective.add(ai.scale(weights.effective_afterimage()));
            Some(ai.item())
        }
        Some(t) => Some(afterimage_loss(phi, out, t)?.item()),
        None => None,
    };
    let grads = pg.grads(&g.backward(objective));
    if !grads.iter().all(Tensor::all_finite) || !objective.item().is_finite() {
        return Err(Error::Numerical("non-finite generator loss or gradient".into()));
    }
    adam_g.step(&mut generator.params, &grads);

    let terms = LossTerms {
        afterimage: if weights.phase == Phase::Remover {
            Some(afterimage.unwrap_or(0.0))
        } else {
            None
        },
        adv_g: adv_g.item(),
        adv_d,
        hrfpl: pl.item(),
        fm: fm.item(),
        gp,
    };
    let b = total_loss(weights, &terms)?;
    Ok(LogRow {
        step: 0,
        epoch: 0,
        phase: weights.phase,
        mask_kind: MaskKind::ClassShaped,
        afterimage: b.afterimage,
        adv_g: b.adv_g,
        adv_d: b.adv_d,
        adv_d_restorer,
        hrfpl: b.hrfpl,
        fm: b.fm,
        gp: b.gp,
        total: b.total,
        lr_g: cfg.lr_generator,
        lr_d: cfg.lr_discriminator,
    })
}

fn has_maskable_target(s: &SceneSample, target: u16) -> bool {
    s.inst
        .instances_of_class(target)
        .iter()
        .any(|&id| s.inst.pixels_of(id).len() >= MIN_INSTANCE_PIXELS)
}

/// Trains the restorer on images whose target coverage lies in the selection
/// band, with partial masks over each target instance.
pub fn train_restorer(cfg: &TrainConfig, train: &[SceneSample]) -> Result<TrainRun> {
    let cfg = &TrainConfig {
        phase: Phase::Restorer,
        ..cfg.clone()
    };
    cfg.validate()?;
    let rule = &cfg.curation;
    for s in train {
        let f = class_pixel_fraction(&s.seg, cfg.target_class);
        if f < rule.select_lo || f > rule.select_hi {
            return Err(Error::InvalidValue(format!(
                "restorer image {} has target coverage {f:.3} outside the selection band",
                s.id
            )));
        }
    }
    let samples = train
        .iter()
        .filter(|s| has_maskable_target(s, cfg.target_class))
        .collect();
    run(Session {
        cfg,
        samples,
        masks: MaskSource::Restorer,
        restorer: None,
    })
}

/// Trains the remover on target-free images with bank and irregular masks.
/// With `restorer` given, its outputs guide the remover; it is never updated.
pub fn train_remover(
    cfg: &TrainConfig,
    train: &[SceneSample],
    bank: &MaskBank,
    restorer: Option<&Checkpoint>,
) -> Result<TrainRun> {
    let cfg = &TrainConfig {
        phase: Phase::Remover,
        ..cfg.clone()
    };
    cfg.validate()?;
    for s in train {
        if class_pixel_count(&s.seg, cfg.target_class) > 0 {
            return Err(Error::PurityViolation(format!(
                "remover training image {} contains target-class pixels",
                s.id
            )));
        }
    }
    let restorer = match restorer {
        Some(ck) if ck.phase != Phase::Restorer => {
            return Err(Error::Checkpoint(format!(
                "guidance checkpoint has phase {}, expected restorer",
                ck.phase
            )))
        }
        Some(ck) => Some(&ck.generator),
        None if cfg.guidance.any() => {
            return Err(Error::MissingArtifact("restorer checkpoint for guided remover training".into()))
        }
        None => None,
    };
    run(Session {
        cfg,
        samples: train.iter().collect(),
        masks: MaskSource::Mixed { bank, shift: 0.0 },
        restorer,
    })
}

/// Conventional training: every image, irregular or shifted class-shaped
/// masks, reconstruction of the original as the only target.
pub fn train_baseline(cfg: &TrainConfig, train: &[SceneSample], bank: &MaskBank) -> Result<TrainRun> {
    let cfg = &TrainConfig {
        phase: Phase::Baseline,
        ..cfg.clone()
    };
    cfg.validate()?;
    run(Session {
        cfg,
        samples: train.iter().collect(),
        masks: MaskSource::Mixed {
            bank,
            shift: cfg.baseline_mask_shift,
        },
        restorer: None,
    })
}

/// Inpaints the holes of `mask` and composites with the known pixels.
pub fn remove_objects(ckpt: &Checkpoint, sample: &SceneSample, mask: &Mask) -> Result<Image> {
    let raw = ckpt.generator.infer(&sample.image, mask)?;
    composite(&sample.image, &raw, mask)
}

/// Batched [`remove_objects`] over `(image, mask)` pairs.
pub fn remove_objects_batch(generator: &Generator, images: &[&Image], masks: &[&Mask], batch: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for (ic, mc) in images.chunks(batch.max(1)).zip(masks.chunks(batch.max(1))) {
        let imgs = stack_images(ic.iter().copied());
        let known = stack_masks(mc.iter().copied());
        let raw = generator.infer_batch(&imgs, &known)?;
        let comp = composite_batch(&raw, &imgs, &known);
        for b in 0..ic.len() {
            out.push(Image::from_tensor(&comp, b)?);
        }
    }
    Ok(out)
}

/// Writes the checkpoint and a TSV log under `dir`.
pub fn save_run(run: &TrainRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    run.checkpoint.save(&dir.join("checkpoint.dckp"))?;
    let path = dir.join("train_log.tsv");
    let mut buf = Vec::new();
    write_log(&run.log, &mut buf).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_rows_round_trip() {
        let row = LogRow {
            step: 3,
            epoch: 1,
            phase: Phase::Remover,
            mask_kind: MaskKind::Irregular,
            afterimage: -0.25,
            adv_g: 0.7,
            adv_d: 1.3,
            adv_d_restorer: 0.0,
            hrfpl: 0.01,
            fm: 0.002,
            gp: 1e-5,
            total: 1.234567890123,
            lr_g: 1e-5,
            lr_d: 1e-3,
        };
        assert_eq!(LogRow::from_tsv(&row.to_tsv()).unwrap(), row);
        assert_eq!(LOG_HEADER.split('\t').count(), 14);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_generator: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
