//! Loss terms for both training phases.
//!
//! Graph-building functions return [`Var`]s so the trainer can differentiate
//! them; the gradient penalty is special because its parameter gradient needs
//! a second-order term (see [`gradient_penalty_with_grads`]).

use std::fmt;
use std::str::FromStr;

use decouple_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Critic, FeatureNet};

/// Which model is being trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Restorer,
    Remover,
    Baseline,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Restorer => "restorer",
            Phase::Remover => "remover",
            Phase::Baseline => "baseline",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restorer" => Ok(Phase::Restorer),
            "remover" => Ok(Phase::Remover),
            "baseline" => Ok(Phase::Baseline),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub afterimage: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub feature_matching: f64,
    pub gradient_penalty: f64,
    pub phase: Phase,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            afterimage: 7.0,
            adversarial: 10.0,
            perceptual: 30.0,
            feature_matching: 100.0,
            gradient_penalty: 0.001,
            phase: Phase::Remover,
        }
    }
}

impl LossWeights {
    pub fn for_phase(phase: Phase) -> Self {
        Self {
            phase,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("afterimage", self.afterimage),
            ("adversarial", self.adversarial),
            ("perceptual", self.perceptual),
            ("feature_matching", self.feature_matching),
            ("gradient_penalty", self.gradient_penalty),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Afterimage weight actually applied; zero outside the remover phase.
    pub fn effective_afterimage(&self) -> f64 {
        if self.phase == Phase::Remover {
            self.afterimage
        } else {
            0.0
        }
    }
}

/// Unweighted term values for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Must be `None` outside the remover phase.
    pub afterimage: Option<f64>,
    pub adv_g: f64,
    pub adv_d: f64,
    pub hrfpl: f64,
    pub fm: f64,
    pub gp: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub afterimage: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub hrfpl: f64,
    pub fm: f64,
    pub gp: f64,
    pub total: f64,
}

/// Weighted sum `λ_AI·AI + λ_adv·(G + D) + λ_PL·PL + λ_FM·FM + λ_GP·GP`.
pub fn total_loss(weights: &LossWeights, terms: &LossTerms) -> Result<LossBreakdown> {
    weights.validate()?;
    if weights.phase != Phase::Remover && terms.afterimage.is_some() {
        return Err(Error::Config(format!(
            "afterimage term supplied in the {} phase",
            weights.phase
        )));
    }
    let afterimage = terms.afterimage.unwrap_or(0.0);
    let total = weights.effective_afterimage() * afterimage
        + weights.adversarial * (terms.adv_g + terms.adv_d)
        + weights.perceptual * terms.hrfpl
        + weights.feature_matching * terms.fm
        + weights.gradient_penalty * terms.gp;
    Ok(LossBreakdown {
        afterimage,
        adv_g: terms.adv_g,
        adv_d: terms.adv_d,
        hrfpl: terms.hrfpl,
        fm: terms.fm,
        gp: terms.gp,
        total,
    })
}

/// Per-map element mean, then mean across maps.
pub fn two_stage_mean<'g>(maps: &[Var<'g>]) -> Result<Var<'g>> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::InvalidValue("two-stage mean of an empty list".into()))?;
    let sum = rest.iter().fold(first.mean(), |acc, m| acc.add(m.mean()));
    Ok(sum.scale(1.0 / maps.len() as f64))
}

/// [`two_stage_mean`] on plain tensors.
pub fn two_stage_mean_values(maps: &[Tensor]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::InvalidValue("two-stage mean of an empty list".into()));
    }
    Ok(maps.iter().map(Tensor::mean).sum::<f64>() / maps.len() as f64)
}

fn feature_distance<'g>(phi: &FeatureNet, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let g = a.graph();
    let p = phi.bind(g);
    let fa = phi.forward(&p, a);
    let fb = phi.forward(&p, b);
    let diffs: Vec<Var<'g>> = fa.iter().zip(&fb).map(|(x, y)| x.sub(*y).square()).collect();
    two_stage_mean(&diffs)
}

/// Perceptual distance in the frozen feature space, `M((φ(I) − φ(Î))²)`.
pub fn hrf_perceptual_loss<'g>(phi: &FeatureNet, original: Var<'g>, output: Var<'g>) -> Result<Var<'g>> {
    feature_distance(phi, original, output)
}

/// Negated perceptual distance to the restorer output, which is treated as a
/// constant. Never positive.
pub fn afterimage_loss<'g>(phi: &FeatureNet, output: Var<'g>, restorer_output: &Tensor) -> Result<Var<'g>> {
    let rest = output.graph().constant(restorer_output.clone());
    Ok(feature_distance(phi, rest, output)?.neg())
}

/// Non-saturating generator loss, mean of `−log σ(logit)`.
pub fn generator_adv_loss<'g>(logits: Var<'g>) -> Var<'g> {
    logits.log_sigmoid().neg().mean()
}

/// How the pixel mask is brought to logit resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMaskMode {
    #[default]
    Nearest,
    AveragePool,
}

/// Resizes a `[N, 1, H, W]` known-pixel mask to `h × w`.
pub fn patch_mask(known: &Tensor, h: usize, w: usize, mode: PatchMaskMode) -> Result<Tensor> {
    let [n, c, sh, sw] = known.shape();
    if c != 1 || h == 0 || w == 0 || sh % h != 0 || sw % w != 0 {
        return Err(Error::Shape(format!(
            "mask {:?} cannot be aligned to a {h}x{w} logit map",
            known.shape()
        )));
    }
    let (fy, fx) = (sh / h, sw / w);
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        let src = known.item(b);
        let dst = out.item_mut(b);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = match mode {
                    PatchMaskMode::Nearest => src[(y * fy + fy / 2) * sw + x * fx + fx / 2],
                    PatchMaskMode::AveragePool => {
                        let mut s = 0.0;
                        for yy in y * fy..(y + 1) * fy {
                            for xx in x * fx..(x + 1) * fx {
                                s += src[yy * sw + xx];
                            }
                        }
                        s / (fy * fx) as f64
                    }
                };
            }
        }
    }
    Ok(out)
}

/// Discriminator objective. Known patches of the generated image count as
/// real; hole patches of the generated image, and of the restorer output when
/// given, count as fake. `patch_known` is at logit resolution.
pub fn discriminator_loss<'g>(
    real_logits: Var<'g>,
    fake_logits: Var<'g>,
    restorer_logits: Option<Var<'g>>,
    patch_known: &Tensor,
) -> Result<Var<'g>> {
    let shape = fake_logits.shape();
    if real_logits.shape() != shape
        || patch_known.shape() != shape
        || restorer_logits.is_some_and(|r| r.shape() != shape)
    {
        return Err(Error::Shape(format!(
            "logit maps {:?}/{:?} and patch mask {:?} disagree",
            real_logits.shape(),
            shape,
            patch_known.shape()
        )));
    }
    let hole = patch_known.map(|v| 1.0 - v);
    let real = real_logits.log_sigmoid().mean().neg();
    let as_real = fake_logits.log_sigmoid().mul_const(patch_known.clone());
    let mut as_fake = fake_logits.neg().log_sigmoid();
    if let Some(r) = restorer_logits {
        as_fake = as_fake.add(r.neg().log_sigmoid());
    }
    let masked = as_real.add(as_fake.mul_const(hole)).mean().neg();
    Ok(real.add(masked))
}

/// `(1/T) Σ_i ‖D_i(I) − D_i(Î)‖² / N_i`.
pub fn feature_matching_loss<'g>(real: &[Var<'g>], fake: &[Var<'g>]) -> Result<Var<'g>> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::InvalidValue(format!(
            "feature lists of length {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let mut acc: Option<Var<'g>> = None;
    for (a, b) in real.iter().zip(fake) {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let term = a.sub(*b).square().mean();
        acc = Some(acc.map_or(term, |s| s.add(term)));
    }
    Ok(acc.expect("nonempty").scale(1.0 / real.len() as f64))
}

/// `∇_x Σ logits(x)` with the critic frozen.
pub fn critic_input_grad<C: Critic>(critic: &C, x: &Tensor) -> Tensor {
    let g = Graph::new();
    let p = critic.params().bind(&g, false);
    let xv = g.input(x.clone());
    let s = critic.logits(&p, xv).sum();
    g.backward(s).wrt_or_zeros(xv)
}

/// `∇_θ Σ logits(x)` with the input fixed.
fn critic_param_grad<C: Critic>(critic: &C, x: &Tensor) -> Vec<Tensor> {
    let g = Graph::new();
    let p = critic.params().bind(&g, true);
    let s = critic.logits(&p, g.constant(x.clone())).sum();
    p.grads(&g.backward(s))
}

/// Squared norm of the input gradient of the summed logits, averaged over the batch.
pub fn gradient_penalty<C: Critic>(critic: &C, real: &Tensor) -> f64 {
    critic_input_grad(critic, real).sq_norm() / real.n() as f64
}

/// Penalty value and its gradient with respect to the critic parameters.
///
/// With `g = ∇_x S(x, θ)` the parameter gradient is `(2/B)·(∂g/∂θ)ᵀ g`, a
/// mixed second derivative. It is evaluated as a central difference of
/// `∇_θ S` along `g`: `(∇_θ S(x + εg) − ∇_θ S(x − εg)) / (B·ε)`, with `ε`
/// scaled so the largest input shift is `1e-3`.
pub fn gradient_penalty_with_grads<C: Critic>(critic: &C, real: &Tensor) -> (f64, Vec<Tensor>) {
    let b = real.n() as f64;
    let gx = critic_input_grad(critic, real);
    let value = gx.sq_norm() / b;
    let peak = gx.max_abs();
    if peak == 0.0 {
        let zeros = critic.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        return (value, zeros);
    }
    let eps = 1e-3 / peak;
    let shifted = |sign: f64| real.zip_map(&gx, |x, g| x + sign * eps * g);
    let plus = critic_param_grad(critic, &shifted(1.0));
    let minus = critic_param_grad(critic, &shifted(-1.0));
    let grads = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| p.zip_map(m, |a, c| (a - c) / (b * eps)))
        .collect();
    (value, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::FeatureNetConfig;
    use decouple_tensor::{log_sigmoid, Bound, Conv2dSpec, ParamStore};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn two_stage_mean_examples() {
        let ones = Tensor::full([1, 1, 2, 2], 1.0);
        assert_eq!(two_stage_mean_values(std::slice::from_ref(&ones)).unwrap(), 1.0);
        let threes = Tensor::full([1, 1, 3, 5], 3.0);
        assert_eq!(two_stage_mean_values(&[ones, threes]).unwrap(), 2.0);
        // Equal per-map means give that mean regardless of sizes.
        let a = Tensor::from_vec([1, 1, 1, 2], vec![0.5, 1.5]);
        let b = Tensor::from_vec([1, 2, 2, 2], vec![1.0; 8]);
        assert!(close(two_stage_mean_values(&[a, b]).unwrap(), 1.0, 1e-15));
        assert!(two_stage_mean_values(&[]).is_err());
        let g = Graph::new();
        assert!(two_stage_mean(&[]).is_err());
        let v = two_stage_mean(&[g.constant(Tensor::full([1, 1, 2, 2], 4.0))]).unwrap();
        assert_eq!(v.item(), 4.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let zero = total_loss(&w, &LossTerms::default()).unwrap();
        assert_eq!(zero.total, 0.0);
        let unit = LossTerms {
            afterimage: Some(-1.0),
            adv_g: 0.5,
            adv_d: 0.5,
            hrfpl: 1.0,
            fm: 1.0,
            gp: 1.0,
        };
        assert!(close(total_loss(&w, &unit).unwrap().total, 133.001, 1e-9));
        let rw = LossWeights::for_phase(Phase::Restorer);
        assert!(matches!(total_loss(&rw, &unit), Err(Error::Config(_))));
        let restorer_unit = LossTerms {
            afterimage: None,
            ..unit
        };
        assert!(close(total_loss(&rw, &restorer_unit).unwrap().total, 140.001, 1e-9));
    }

    #[test]
    fn generator_adv_loss_values() {
        let g = Graph::new();
        let z = generator_adv_loss(g.constant(Tensor::zeros([2, 1, 3, 3])));
        assert!(close(z.item(), std::f64::consts::LN_2, 1e-15));
        let big = generator_adv_loss(g.constant(Tensor::full([1, 1, 2, 2], 60.0)));
        assert!(big.item() < 1e-20);
        let mut prev = f64::INFINITY;
        for k in -5..=5 {
            let v = generator_adv_loss(g.constant(Tensor::full([1, 1, 1, 1], k as f64))).item();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn discriminator_loss_closed_forms() {
        let g = Graph::new();
        let zeros = || g.constant(Tensor::zeros([1, 1, 4, 4]));
        let mut known = Tensor::full([1, 1, 4, 4], 1.0);
        known.data_mut()[8..].fill(0.0);
        let v = discriminator_loss(zeros(), zeros(), Some(zeros()), &known).unwrap();
        assert!(close(v.item(), 2.5 * std::f64::consts::LN_2, 1e-12));
        let no_rest = discriminator_loss(zeros(), zeros(), None, &known).unwrap();
        assert!(close(no_rest.item(), 2.0 * std::f64::consts::LN_2, 1e-12));

        // All-known mask and identical logits collapse to −2·E[log D(I)].
        let logits = Tensor::from_vec([1, 1, 2, 2], vec![-1.5, 0.3, 2.0, 0.7]);
        let ones = Tensor::full([1, 1, 2, 2], 1.0);
        let l = g.constant(logits.clone());
        let v = discriminator_loss(l, l, Some(l), &ones).unwrap().item();
        let expect = -2.0 * logits.data().iter().map(|&x| log_sigmoid(x)).sum::<f64>() / 4.0;
        assert!(close(v, expect, 1e-12));
        assert!(discriminator_loss(l, zeros(), None, &ones).is_err());
    }

    #[test]
    fn patch_mask_modes() {
        let known = Tensor::from_vec(
            [1, 1, 4, 4],
            vec![1., 1., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1., 1., 1., 1., 1.],
        );
        let n = patch_mask(&known, 2, 2, PatchMaskMode::Nearest).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 1.0, 1.0]);
        let a = patch_mask(&known, 2, 2, PatchMaskMode::AveragePool).unwrap();
        assert_eq!(a.data(), &[0.75, 0.0, 1.0, 1.0]);
        assert!(patch_mask(&known, 3, 3, PatchMaskMode::Nearest).is_err());
    }

    #[test]
    fn feature_matching_unit_offset() {
        let g = Graph::new();
        let a = g.constant(Tensor::full([2, 3, 4, 4], 0.25));
        let b = g.constant(Tensor::full([2, 3, 4, 4], 1.25));
        assert!(close(feature_matching_loss(&[a], &[b]).unwrap().item(), 1.0, 1e-15));
        assert_eq!(feature_matching_loss(&[a], &[a]).unwrap().item(), 0.0);
    }

    #[test]
    fn afterimage_is_negated_perceptual() {
        let phi = FeatureNet::new(FeatureNetConfig::default()).unwrap();
        let a = Tensor::from_vec([1, 3, 16, 16], (0..768).map(|i| (i % 13) as f64 / 13.0).collect());
        let b = Tensor::from_vec([1, 3, 16, 16], (0..768).map(|i| (i % 7) as f64 / 7.0).collect());
        let g = Graph::new();
        let ai = afterimage_loss(&phi, g.constant(a.clone()), &b).unwrap().item();
        let pl = hrf_perceptual_loss(&phi, g.constant(b.clone()), g.constant(a.clone())).unwrap().item();
        let pl_swapped = hrf_perceptual_loss(&phi, g.constant(a.clone()), g.constant(b)).unwrap().item();
        assert!(ai < 0.0);
        assert_eq!(ai, -pl);
        assert!(close(pl, pl_swapped, 1e-15));
        assert_eq!(afterimage_loss(&phi, g.constant(a.clone()), &a).unwrap().item(), 0.0);
    }

    struct Linear {
        params: ParamStore,
    }

    impl Critic for Linear {
        fn params(&self) -> &ParamStore {
            &self.params
        }

        fn critic<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> (Var<'g>, Vec<Var<'g>>) {
            let spec = Conv2dSpec {
                stride: 1,
                padding: 0,
                dilation: 1,
            };
            (x.conv2d(p.get(0), None, spec), Vec::new())
        }
    }

    #[test]
    fn penalty_of_linear_critic_is_weight_norm() {
        let w = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|i| ((i * 5) % 11) as f64 / 7.0 - 0.6).collect());
        let mut params = ParamStore::new();
        params.add("w", w.clone());
        let critic = Linear { params };
        let x = Tensor::full([3, 3, 4, 4], 0.2);
        let (v, grads) = gradient_penalty_with_grads(&critic, &x);
        assert!(close(v, w.sq_norm(), 1e-12));
        // d‖w‖²/dw = 2w.
        for (g, wv) in grads[0].data().iter().zip(w.data()) {
            assert!(close(*g, 2.0 * wv, 1e-6), "{g} vs {}", 2.0 * wv);
        }
    }

    #[test]
    fn penalty_of_constant_critic_is_zero() {
        let mut params = ParamStore::new();
        params.add("w", Tensor::zeros([1, 3, 4, 4]));
        let critic = Linear { params };
        let (v, grads) = gradient_penalty_with_grads(&critic, &Tensor::full([2, 3, 4, 4], 0.7));
        assert_eq!(v, 0.0);
        assert!(grads[0].data().iter().all(|&g| g == 0.0));
    }
}
