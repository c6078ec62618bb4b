//! Training-set selection and mask generation.
//!
//! The restorer trains on images where the target class occupies a moderate
//! share of the frame, with masks that hide part of each target instance. The
//! remover trains only on target-free images, masked with class-shaped holes
//! borrowed from other images (the mask bank) or with irregular strokes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_mask, class_pixel_count, class_pixel_fraction, InstanceMap, Mask, SceneSample};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationRule {
    pub select_lo: f64,
    pub select_hi: f64,
    pub restore_cover_lo: f64,
    pub restore_cover_hi: f64,
    pub irregular_mask_prob: f64,
}

impl Default for CurationRule {
    fn default() -> Self {
        Self {
            select_lo: 0.05,
            select_hi: 0.40,
            restore_cover_lo: 0.40,
            restore_cover_hi: 0.60,
            irregular_mask_prob: 0.5,
        }
    }
}

impl CurationRule {
    pub fn validate(&self) -> Result<()> {
        let band = |lo: f64, hi: f64, what: &str| {
            if (0.0..hi).contains(&lo) && hi <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} band [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")))
            }
        };
        band(self.select_lo, self.select_hi, "selection")?;
        band(self.restore_cover_lo, self.restore_cover_hi, "restorer cover")?;
        if !(0.0..=1.0).contains(&self.irregular_mask_prob) {
            return Err(Error::Config(format!(
                "irregular_mask_prob {} outside [0, 1]",
                self.irregular_mask_prob
            )));
        }
        Ok(())
    }
}

/// Entries whose target-class pixel fraction lies in `[select_lo, select_hi]`.
/// An empty result is returned as such; callers decide whether to warn.
pub fn select_restorer_images(
    manifest: &DatasetManifest,
    target_class: u16,
    rule: &CurationRule,
) -> Result<DatasetManifest> {
    rule.validate()?;
    let mut keep = BTreeSet::new();
    for e in &manifest.entries {
        let f = class_pixel_fraction(&manifest.load_seg(e)?, target_class);
        if f >= rule.select_lo && f <= rule.select_hi {
            keep.insert(e.id.clone());
        }
    }
    Ok(manifest.filtered(|e| keep.contains(&e.id)))
}

/// Entries with no target-class pixel at all.
pub fn select_remover_images(manifest: &DatasetManifest, target_class: u16) -> Result<DatasetManifest> {
    let mut keep = BTreeSet::new();
    for e in &manifest.entries {
        if class_pixel_count(&manifest.load_seg(e)?, target_class) == 0 {
            keep.insert(e.id.clone());
        }
    }
    Ok(manifest.filtered(|e| keep.contains(&e.id)))
}

/// Smallest instance for which a partial mask is attempted.
pub const MIN_INSTANCE_PIXELS: usize = 5;
const MAX_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RestorerMask {
    pub mask: Mask,
    /// Instances whose occlusion landed in the band.
    pub covered: Vec<u16>,
    /// Instances left unmasked (too small, or the band was never hit).
    pub skipped: Vec<u16>,
}

/// Hides part of every listed instance so that each one's occlusion falls in
/// `[restore_cover_lo, restore_cover_hi]`. Holes never leave the instances.
pub fn gen_restorer_mask(
    inst: &InstanceMap,
    target_instances: &[u16],
    rule: &CurationRule,
    seed: u64,
) -> Result<RestorerMask> {
    rule.validate()?;
    if target_instances.is_empty() {
        return Err(Error::InvalidValue("no target instances given".into()));
    }
    let (h, w) = inst.dims();
    let mut mask = Mask::ones(h, w);
    let mut covered = Vec::new();
    let mut skipped = Vec::new();
    for &id in target_instances {
        if inst.class_of(id).is_none() {
            return Err(Error::UnknownInstance(id));
        }
        let pixels = inst.pixels_of(id);
        let mut rng = rng_for(seed, stream::RESTORER_MASK ^ (u64::from(id) << 32));
        match partial_cover(&pixels, inst, id, rule, &mut rng) {
            Some(hidden) => {
                for p in hidden {
                    mask.set(p / w, p % w, false);
                }
                covered.push(id);
            }
            None => skipped.push(id),
        }
    }
    Ok(RestorerMask {
        mask,
        covered,
        skipped,
    })
}

/// Pixels to hide for one instance, or `None` if the band was not reached.
fn partial_cover<R: Rng>(
    pixels: &[usize],
    inst: &InstanceMap,
    id: u16,
    rule: &CurationRule,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let n = pixels.len();
    if n < MIN_INSTANCE_PIXELS {
        return None;
    }
    let (_, w) = inst.dims();
    let in_band = |k: usize| {
        let f = k as f64 / n as f64;
        f >= rule.restore_cover_lo && f <= rule.restore_cover_hi
    };
    for _ in 0..MAX_TRIES {
        let t = rng.random_range(rule.restore_cover_lo..=rule.restore_cover_hi);
        let anchor = pixels[rng.random_range(0..n)];
        let (ay, ax) = ((anchor / w) as f64, (anchor % w) as f64);
        let mut keyed: Vec<(f64, usize)> = pixels
            .iter()
            .map(|&p| {
                let d = ((p / w) as f64 - ay).hypot((p % w) as f64 - ax);
                (d + rng.random_range(0.0..1.5), p)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = ((t * n as f64).ceil() as usize).min(n);
        let mut region: BTreeSet<usize> = keyed[..take].iter().map(|&(_, p)| p).collect();
        match rng.random_range(0..3) {
            0 => region = erode(&region, inst.dims()),
            1 => region = dilate(&region, inst, id),
            _ => {}
        }
        if in_band(region.len()) {
            return Some(region.into_iter().collect());
        }
    }
    None
}

fn neighbours(p: usize, w: usize, len: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    let h = len / w;
    [
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

fn erode(region: &BTreeSet<usize>, (h, w): (usize, usize)) -> BTreeSet<usize> {
    // Border of the region = pixels with a 4-neighbour outside it. Image edges
    // count as inside so regions touching the frame are not eaten from there.
    region
        .iter()
        .copied()
        .filter(|&p| {
            let (y, x) = (p / w, p % w);
            let inside = |q: Option<usize>| q.is_none_or(|q| region.contains(&q));
            inside(y.checked_sub(1).map(|yy| yy * w + x))
                && inside((y + 1 < h).then_some(p + w))
                && inside(x.checked_sub(1).map(|xx| y * w + xx))
                && inside((x + 1 < w).then_some(p + 1))
        })
        .collect()
}

fn dilate(region: &BTreeSet<usize>, inst: &InstanceMap, id: u16) -> BTreeSet<usize> {
    let (h, w) = inst.dims();
    let data = inst.data();
    let mut out = region.clone();
    for &p in region {
        for q in neighbours(p, w, h * w) {
            if data[q] == id {
                out.insert(q);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    ClassShaped,
    Irregular,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::ClassShaped => "class_shaped",
            MaskKind::Irregular => "irregular",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_shaped" => Ok(MaskKind::ClassShaped),
            "irregular" => Ok(MaskKind::Irregular),
            other => Err(Error::InvalidValue(format!("unknown mask kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BankMask {
    pub source_id: String,
    pub mask: Mask,
}

/// Class-shaped masks, one per source image that contains the target class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBank {
    pub target_class: u16,
    pub masks: Vec<BankMask>,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    target_class: u16,
    masks: Vec<BankIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankIndexEntry {
    file: String,
    source_id: String,
}

pub const BANK_INDEX_NAME: &str = "bank.json";

impl MaskBank {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SceneSample>, target_class: u16) -> Self {
        let masks = samples
            .into_iter()
            .filter(|s| class_pixel_count(&s.seg, target_class) > 0)
            .map(|s| BankMask {
                source_id: s.id.clone(),
                mask: class_mask(&s.seg, target_class),
            })
            .collect();
        Self { target_class, masks }
    }

    /// Writes `mask_NNNNN.png` files and a `bank.json` index into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BankIndex {
            target_class: self.target_class,
            masks: Vec::with_capacity(self.masks.len()),
        };
        for (i, m) in self.masks.iter().enumerate() {
            let file = format!("mask_{i:05}.png");
            m.mask.write_png(&dir.join(&file))?;
            index.masks.push(BankIndexEntry {
                file,
                source_id: m.source_id.clone(),
            });
        }
        let path = dir.join(BANK_INDEX_NAME);
        let json = serde_json::to_string_pretty(&index).expect("serialisable");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BANK_INDEX_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BankIndex = serde_json::from_str(&text).map_err(|e| Error::Codec {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let masks = index
            .masks
            .into_iter()
            .map(|e| {
                Ok(BankMask {
                    mask: Mask::read_png(&dir.join(&e.file))?,
                    source_id: e.source_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            target_class: index.target_class,
            masks,
        })
    }
}

/// One mask per entry containing the target class; holes cover all of that
/// entry's target pixels.
pub fn build_mask_bank(manifest: &DatasetManifest, target_class: u16) -> Result<MaskBank> {
    let mut masks = Vec::new();
    for e in &manifest.entries {
        let seg = manifest.load_seg(e)?;
        if class_pixel_count(&seg, target_class) > 0 {
            masks.push(BankMask {
                source_id: e.id.clone(),
                mask: class_mask(&seg, target_class),
            });
        }
    }
    Ok(MaskBank { target_class, masks })
}

/// A bank mask chosen uniformly, resized to `size × size` by nearest neighbour.
pub fn class_shaped_mask<R: Rng>(bank: &MaskBank, size: usize, rng: &mut R) -> Result<Mask> {
    if bank.is_empty() {
        return Err(Error::EmptySelection("mask bank is empty".into()));
    }
    let m = &bank.masks[rng.random_range(0..bank.len())].mask;
    Ok(m.resize_nearest(size, size))
}

/// Draws a mask kind with `P(irregular) = rule.irregular_mask_prob`.
pub fn draw_mask_kind<R: Rng>(rule: &CurationRule, rng: &mut R) -> MaskKind {
    if rng.random_bool(rule.irregular_mask_prob.clamp(0.0, 1.0)) {
        MaskKind::Irregular
    } else {
        MaskKind::ClassShaped
    }
}

pub fn sample_training_mask(
    bank: &MaskBank,
    size: usize,
    rule: &CurationRule,
    seed: u64,
) -> Result<(Mask, MaskKind)> {
    rule.validate()?;
    let mut rng = rng_for(seed, stream::TRAIN_MASK);
    match draw_mask_kind(rule, &mut rng) {
        MaskKind::Irregular => Ok((
            gen_irregular_mask(size, rng.random(), &StrokeConfig::default())?,
            MaskKind::Irregular,
        )),
        MaskKind::ClassShaped => Ok((class_shaped_mask(bank, size, &mut rng)?, MaskKind::ClassShaped)),
    }
}

/// Shape parameters of irregular masks. Lengths are fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrokeConfig {
    pub strokes: [usize; 2],
    pub vertices: [usize; 2],
    pub width: [f64; 2],
    pub segment_length: [f64; 2],
    pub rects: [usize; 2],
    pub rect_side: [f64; 2],
    pub coverage: [f64; 2],
}

impl Default for StrokeConfig {
    fn default() -> Self {
        Self {
            strokes: [1, 4],
            vertices: [2, 5],
            width: [0.05, 0.12],
            segment_length: [0.15, 0.4],
            rects: [0, 2],
            rect_side: [0.1, 0.3],
            coverage: [0.05, 0.45],
        }
    }
}

fn seg_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (px - qx).powi(2) + (py - qy).powi(2)
}

fn draw_stroke(mask: &mut Mask, pts: &[(f64, f64)], width: f64) {
    let (h, w) = mask.dims();
    let r2 = (width / 2.0).powi(2);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if pts.windows(2).any(|s| seg_dist2(px, py, s[0], s[1]) <= r2) {
                mask.set(y, x, false);
            }
        }
    }
}

fn random_irregular<R: Rng>(size: usize, cfg: &StrokeConfig, rng: &mut R) -> Mask {
    let n = size as f64;
    let mut mask = Mask::ones(size, size);
    for _ in 0..rng.random_range(cfg.strokes[0]..=cfg.strokes[1]) {
        let verts = rng.random_range(cfg.vertices[0]..=cfg.vertices[1]);
        let mut p = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let mut pts = vec![p];
        for _ in 1..verts {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let l = rng.random_range(cfg.segment_length[0]..=cfg.segment_length[1]) * n;
            p = ((p.0 + l * a.cos()).clamp(0.0, n), (p.1 + l * a.sin()).clamp(0.0, n));
            pts.push(p);
        }
        let width = rng.random_range(cfg.width[0]..=cfg.width[1]) * n;
        draw_stroke(&mut mask, &pts, width);
    }
    for _ in 0..rng.random_range(cfg.rects[0]..=cfg.rects[1]) {
        let rw = (rng.random_range(cfg.rect_side[0]..=cfg.rect_side[1]) * n).round() as usize;
        let rh = (rng.random_range(cfg.rect_side[0]..=cfg.rect_side[1]) * n).round() as usize;
        let (rw, rh) = (rw.clamp(1, size), rh.clamp(1, size));
        let x0 = rng.random_range(0..=size - rw);
        let y0 = rng.random_range(0..=size - rh);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask.set(y, x, false);
            }
        }
    }
    mask
}

/// Free-form mask of thick polylines and rectangles, redrawn until its hole
/// coverage lands in `cfg.coverage`.
pub fn gen_irregular_mask(size: usize, seed: u64, cfg: &StrokeConfig) -> Result<Mask> {
    if size < 32 {
        return Err(Error::InvalidValue(format!("irregular mask size {size} is below 32")));
    }
    let mut rng = rng_for(seed, stream::IRREGULAR);
    let [lo, hi] = cfg.coverage;
    for _ in 0..MAX_TRIES {
        let m = random_irregular(size, cfg, &mut rng);
        let cov = crate::data::mask_coverage(&m);
        if cov >= lo && cov <= hi {
            return Ok(m);
        }
    }
    // Deterministic fallback: one horizontal stroke sized to mid-band coverage.
    let n = size as f64;
    let mut m = Mask::ones(size, size);
    let width = n * (lo + hi) / 2.0;
    draw_stroke(&mut m, &[(0.0, n / 2.0), (n, n / 2.0)], width);
    Ok(m)
}

/// Draws `count` masks of a fixed kind for one batch. Bank masks may be
/// shifted by a random offset of up to `max_shift` of the image side.
pub fn batch_masks<R: Rng>(
    bank: &MaskBank,
    size: usize,
    kind: MaskKind,
    count: usize,
    max_shift: f64,
    rng: &mut R,
) -> Result<Vec<Mask>> {
    (0..count)
        .map(|_| match kind {
            MaskKind::Irregular => gen_irregular_mask(size, rng.random(), &StrokeConfig::default()),
            MaskKind::ClassShaped => {
                let m = class_shaped_mask(bank, size, rng)?;
                let lim = (max_shift * size as f64) as i64;
                if lim == 0 {
                    return Ok(m);
                }
                let dy = rng.random_range(-lim..=lim) as isize;
                let dx = rng.random_range(-lim..=lim) as isize;
                Ok(m.translate(dy, dx))
            }
        })
        .collect()
}

/// Restorer masks for a list of scenes; scenes where every target instance
/// was skipped are dropped. Returns `(scene index, mask)` pairs.
pub fn restorer_masks_for(
    samples: &[SceneSample],
    target_class: u16,
    rule: &CurationRule,
    seed: u64,
) -> Result<Vec<(usize, Mask)>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let ids = s.inst.instances_of_class(target_class);
        if ids.is_empty() {
            continue;
        }
        let r = gen_restorer_mask(&s.inst, &ids, rule, derive_seed(seed, i as u64))?;
        if !r.covered.is_empty() {
            out.push((i, r.mask));
        }
    }
    Ok(out)
}

/// Shuffled copy of `0..n` drawn from `rng`.
pub fn permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Histogram of mask kinds, handy for log summaries.
pub fn kind_counts(kinds: &[MaskKind]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for k in kinds {
        *out.entry(k.to_string()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{instance_occlusion, mask_coverage};

    fn disc_instance(size: usize, r: f64) -> InstanceMap {
        let c = size as f64 / 2.0;
        let data = (0..size * size)
            .map(|p| {
                let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
                u16::from((x - c).hypot(y - c) <= r)
            })
            .collect();
        InstanceMap::new(size, size, data, BTreeMap::from([(1, 1)])).unwrap()
    }

    #[test]
    fn restorer_mask_hits_band_and_stays_inside() {
        let inst = disc_instance(32, 5.7); // roughly 100 px
        let rule = CurationRule::default();
        for seed in 0..200 {
            let r = gen_restorer_mask(&inst, &[1], &rule, seed).unwrap();
            assert_eq!(r.covered, vec![1]);
            let occ = instance_occlusion(&inst, 1, &r.mask).unwrap();
            assert!((0.4..=0.6).contains(&occ), "seed {seed}: {occ}");
            for (p, &k) in r.mask.data().iter().enumerate() {
                if k == 0 {
                    assert_eq!(inst.data()[p], 1);
                }
            }
        }
        let a = gen_restorer_mask(&inst, &[1], &rule, 9).unwrap();
        assert_eq!(a, gen_restorer_mask(&inst, &[1], &rule, 9).unwrap());
    }

    #[test]
    fn tiny_instance_is_skipped() {
        let mut data = vec![0u16; 32 * 32];
        data[..4].fill(1);
        let inst = InstanceMap::new(32, 32, data, BTreeMap::from([(1, 1)])).unwrap();
        let r = gen_restorer_mask(&inst, &[1], &CurationRule::default(), 0).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.mask.hole_count(), 0);
        assert!(matches!(
            gen_restorer_mask(&inst, &[7], &CurationRule::default(), 0),
            Err(Error::UnknownInstance(7))
        ));
    }

    #[test]
    fn irregular_masks_in_band_and_deterministic() {
        let cfg = StrokeConfig::default();
        for seed in 0..300 {
            let m = gen_irregular_mask(64, seed, &cfg).unwrap();
            let c = mask_coverage(&m);
            assert!((0.05..=0.45).contains(&c), "seed {seed}: {c}");
            assert!(m.data().iter().all(|&v| v <= 1));
        }
        assert_eq!(
            gen_irregular_mask(64, 5, &cfg).unwrap(),
            gen_irregular_mask(64, 5, &cfg).unwrap()
        );
    }

    #[test]
    fn mask_kind_extremes_and_rate() {
        let bank = MaskBank {
            target_class: 1,
            masks: vec![BankMask {
                source_id: "a".into(),
                mask: Mask::from_fn(16, 16, |y, _| y < 8),
            }],
        };
        let never = CurationRule {
            irregular_mask_prob: 0.0,
            ..CurationRule::default()
        };
        let always = CurationRule {
            irregular_mask_prob: 1.0,
            ..CurationRule::default()
        };
        for seed in 0..20 {
            let (m, k) = sample_training_mask(&bank, 32, &never, seed).unwrap();
            assert_eq!(k, MaskKind::ClassShaped);
            assert_eq!(m.dims(), (32, 32));
            assert_eq!(m.hole_count(), 32 * 16);
            assert_eq!(sample_training_mask(&bank, 32, &always, seed).unwrap().1, MaskKind::Irregular);
        }
        let rule = CurationRule::default();
        let mut rng = rng_for(3, 0);
        let shaped = (0..10_000)
            .filter(|_| draw_mask_kind(&rule, &mut rng) == MaskKind::ClassShaped)
            .count();
        assert!((4700..=5300).contains(&shaped), "{shaped}");
    }

    #[test]
    fn rule_validation() {
        assert!(CurationRule::default().validate().is_ok());
        let bad = CurationRule {
            select_lo: 0.5,
            select_hi: 0.4,
            ..CurationRule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bank_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bank = MaskBank {
            target_class: 2,
            masks: vec![
                BankMask {
                    source_id: "x".into(),
                    mask: Mask::from_fn(8, 8, |y, x| y != x),
                },
                BankMask {
                    source_id: "y".into(),
                    mask: Mask::from_fn(8, 8, |y, _| y > 2),
                },
            ],
        };
        bank.save(dir.path()).unwrap();
        assert_eq!(MaskBank::load(dir.path()).unwrap(), bank);
    }
}
