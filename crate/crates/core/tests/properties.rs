use decouple_core::curation::{gen_restorer_mask, CurationRule, MaskBank};
use decouple_core::data::{class_mask, composite, instance_occlusion, Image, Mask};
use decouple_core::evaluation::{frechet_distance, psnr, ssim, u_ids, FeatureSet};
use decouple_core::losses::{
    afterimage_loss, discriminator_loss, feature_matching_loss, generator_adv_loss, hrf_perceptual_loss,
};
use decouple_core::nets::{
    Critic, Discriminator, DiscriminatorConfig, FeatureNet, FeatureNetConfig, Generator, GeneratorConfig,
};
use decouple_core::synth::{generate_scene, SynthConfig};
use decouple_tensor::gradcheck::{numeric_grad, rel_error, spread_indices};
use decouple_tensor::{Graph, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        image_size: 32,
        seed,
        ..SynthConfig::default()
    }
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, n)
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), n)
}

fn features(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::from_rows(rows, "test", "h").unwrap()
}

fn small_phi() -> FeatureNet {
    FeatureNet::new(FeatureNetConfig {
        widths: vec![8, 8, 8],
        seed: 3,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scene_ground_truth_differs_only_on_target_pixels(seed in 0u64..1000, index in 0u64..1000) {
        let cfg = synth(seed);
        let s = generate_scene(&cfg, index).unwrap();
        let gt = s.gt_removal.as_ref().unwrap();
        let (h, w) = s.image.dims();
        for y in 0..h {
            for x in 0..w {
                if s.seg.get(y, x) != cfg.target_class {
                    prop_assert_eq!(s.image.pixel(y, x), gt.pixel(y, x));
                }
            }
        }
        for (&class, &id) in s.seg.data().iter().zip(s.inst.data()) {
            if id == 0 {
                prop_assert_eq!(class, 0);
            } else {
                prop_assert_eq!(s.inst.class_of(id), Some(class));
            }
        }
        prop_assert_eq!(generate_scene(&cfg, index).unwrap(), s);
    }

    #[test]
    fn restorer_masks_stay_in_band_and_inside_targets(seed in 0u64..500, index in 0u64..500, mask_seed: u64) {
        let s = generate_scene(&synth(seed), index).unwrap();
        let ids = s.inst.instances_of_class(1);
        prop_assume!(!ids.is_empty());
        let rule = CurationRule::default();
        let rm = gen_restorer_mask(&s.inst, &ids, &rule, mask_seed).unwrap();
        for &id in &rm.covered {
            let occ = instance_occlusion(&s.inst, id, &rm.mask).unwrap();
            prop_assert!((rule.restore_cover_lo..=rule.restore_cover_hi).contains(&occ), "{}", occ);
        }
        for (p, &m) in rm.mask.data().iter().enumerate() {
            if m == 0 {
                prop_assert!(rm.covered.contains(&s.inst.data()[p]));
            }
        }
        prop_assert_eq!(gen_restorer_mask(&s.inst, &ids, &rule, mask_seed).unwrap(), rm);
    }

    #[test]
    fn bank_holes_are_exactly_the_class_region(seed in 0u64..500) {
        let samples: Vec<_> = (0..6).map(|i| generate_scene(&synth(seed), i).unwrap()).collect();
        let bank = MaskBank::from_samples(&samples, 1);
        let mut it = bank.masks.iter();
        for s in &samples {
            let m = class_mask(&s.seg, 1);
            if m.hole_count() == 0 {
                continue;
            }
            let b = it.next().unwrap();
            prop_assert_eq!(&b.source_id, &s.id);
            for (&c, &k) in s.seg.data().iter().zip(b.mask.data()) {
                prop_assert_eq!(k == 0, c == 1);
            }
        }
        prop_assert!(it.next().is_none());
    }

    #[test]
    fn frechet_is_a_symmetric_nonnegative_rotation_invariant_distance(
        a in rows(12, 3),
        b in rows(9, 3),
        basis in proptest::collection::vec(-1.0f64..1.0, 9),
    ) {
        let (fa, fb) = (features(&a), features(&b));
        let ab = frechet_distance(&fa, &fb).unwrap();
        prop_assert_eq!(ab, frechet_distance(&fb, &fa).unwrap());
        prop_assert!(ab >= -1e-9);
        prop_assert!(frechet_distance(&fa, &fa).unwrap().abs() < 1e-8);

        let q = DMatrix::from_row_slice(3, 3, &basis) + DMatrix::identity(3, 3) * 3.0;
        let q = q.qr().q();
        let rotate = |m: &FeatureSet| FeatureSet {
            matrix: &m.matrix * &q,
            ..m.clone()
        };
        let rotated = frechet_distance(&rotate(&fa), &rotate(&fb)).unwrap();
        prop_assert!((rotated - ab).abs() <= 1e-7 * ab.max(1.0), "{} vs {}", rotated, ab);
    }

    #[test]
    fn inseparability_is_symmetric_and_bounded(a in rows(10, 2), b in rows(14, 2)) {
        let (fa, fb) = (features(&a), features(&b));
        let ab = u_ids(&fa, &fb).unwrap();
        prop_assert_eq!(ab, u_ids(&fb, &fa).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_and_ssim_are_symmetric_and_bounded(a in unit_vec(3 * 16 * 16), b in unit_vec(3 * 16 * 16)) {
        let a = Image::new(16, 16, a).unwrap();
        let b = Image::new(16, 16, b).unwrap();
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!(p >= 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_have_their_signs(
        logits in proptest::collection::vec(-8.0f64..8.0, 3 * 16),
        known in proptest::collection::vec(0u8..2, 16),
        a in unit_vec(3 * 8 * 8),
        b in unit_vec(3 * 8 * 8),
    ) {
        let g = Graph::new();
        let shape = [1, 1, 4, 4];
        let l = |k: usize| g.input(Tensor::from_vec(shape, logits[k * 16..(k + 1) * 16].to_vec()));
        let pk = Tensor::from_vec(shape, known.iter().map(|&v| f64::from(v)).collect());
        prop_assert!(generator_adv_loss(l(0)).value().data()[0] >= 0.0);
        prop_assert!(discriminator_loss(l(0), l(1), Some(l(2)), &pk).unwrap().value().data()[0] >= 0.0);
        prop_assert!(feature_matching_loss(&[l(0)], &[l(1)]).unwrap().value().data()[0] >= 0.0);

        let phi = small_phi();
        let ta = Tensor::from_vec([1, 3, 8, 8], a);
        let tb = Tensor::from_vec([1, 3, 8, 8], b);
        let pl = hrf_perceptual_loss(&phi, g.input(ta.clone()), g.input(tb.clone())).unwrap();
        let ai = afterimage_loss(&phi, g.input(tb), &ta).unwrap();
        prop_assert!(pl.value().data()[0] >= 0.0);
        prop_assert!(ai.value().data()[0] <= 0.0);
        prop_assert!((pl.value().data()[0] + ai.value().data()[0]).abs() < 1e-12);
    }

    #[test]
    fn generator_outputs_are_valid_and_composites_keep_known_pixels(
        img in unit_vec(3 * 16 * 16),
        holes in proptest::collection::vec(0u8..2, 16 * 16),
    ) {
        let gen = Generator::new(GeneratorConfig { base_width: 8, n_down: 2, n_blocks: 1, spectral_blocks: true }, 4).unwrap();
        let image = Image::new(16, 16, img).unwrap();
        let mask = Mask::new(16, 16, holes).unwrap();
        let raw = gen.infer(&image, &mask).unwrap();
        prop_assert!(raw.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let out = composite(&image, &raw, &mask).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = if mask.is_known(y, x) { image.pixel(y, x) } else { raw.pixel(y, x) };
                prop_assert_eq!(out.pixel(y, x), want);
            }
        }
        prop_assert_eq!(composite(&image, &raw, &Mask::ones(16, 16)).unwrap(), image);
    }
}

/// Loss value and its gradient with respect to the generator output.
type LossFn<'a> = Box<dyn Fn(&Tensor) -> (f64, Tensor) + 'a>;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn loss_gradients_wrt_output_match_central_differences(
        out in proptest::collection::vec(0.05f64..0.95, 2 * 3 * 8 * 8),
        orig in unit_vec(2 * 3 * 8 * 8),
        rest in unit_vec(2 * 3 * 8 * 8),
    ) {
        let shape = [2, 3, 8, 8];
        let out = Tensor::from_vec(shape, out);
        let orig = Tensor::from_vec(shape, orig);
        let rest = Tensor::from_vec(shape, rest);
        let phi = small_phi();
        let disc = Discriminator::new(DiscriminatorConfig { base_width: 8, n_layers: 3 }, 9).unwrap();

        let losses: [(&str, LossFn); 4] = [
            ("adversarial", Box::new(|x: &Tensor| {
                let g = Graph::new();
                let p = disc.params().bind(&g, false);
                let xv = g.input(x.clone());
                let l = generator_adv_loss(disc.logits(&p, xv));
                (l.value().data()[0], g.backward(l).wrt_or_zeros(xv))
            })),
            ("feature matching", Box::new(|x: &Tensor| {
                let g = Graph::new();
                let p = disc.params().bind(&g, false);
                let xv = g.input(x.clone());
                let real = disc.critic(&p, g.constant(orig.clone())).1;
                let fake = disc.critic(&p, xv).1;
                let l = feature_matching_loss(&real, &fake).unwrap();
                (l.value().data()[0], g.backward(l).wrt_or_zeros(xv))
            })),
            ("perceptual", Box::new(|x: &Tensor| {
                let g = Graph::new();
                let xv = g.input(x.clone());
                let l = hrf_perceptual_loss(&phi, g.constant(orig.clone()), xv).unwrap();
                (l.value().data()[0], g.backward(l).wrt_or_zeros(xv))
            })),
            ("afterimage", Box::new(|x: &Tensor| {
                let g = Graph::new();
                let xv = g.input(x.clone());
                let l = afterimage_loss(&phi, xv, &rest).unwrap();
                (l.value().data()[0], g.backward(l).wrt_or_zeros(xv))
            })),
        ];
        for (name, f) in &losses {
            let (_, analytic) = f(&out);
            let idx = spread_indices(out.len(), 12);
            let numeric = numeric_grad(|x| f(x).0, &out, 1e-6, &idx);
            for (&i, n) in idx.iter().zip(numeric) {
                let a = analytic.data()[i];
                prop_assert!(rel_error(a, n) < 1e-4 || (a - n).abs() < 1e-9, "{} at {}: {} vs {}", name, i, a, n);
            }
        }
    }
}

#[test]
fn inseparability_falls_as_sets_move_apart() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..300).map(|_| (0..4).map(|_| StandardNormal.sample(rng)).collect()).collect()
    };
    let a = draw(&mut rng);
    let b = draw(&mut rng);
    let mut last = f64::INFINITY;
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let moved: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let u = u_ids(&features(&a), &features(&moved)).unwrap();
        assert!(u <= last + 0.01, "shift {shift}: {u} after {last}");
        last = u;
    }
    assert!(last < 0.01, "{last}");
}
