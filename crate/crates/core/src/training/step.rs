//! One optimization step's loss and parameter gradients for every method.

use serde::{Deserialize, Serialize};

use crate::encoders::GradientBag;
use crate::error::{Error, Result};
use crate::geometry::{difference_vectors_from_embeddings, AverageVectorState, ReferenceCache};
use crate::numeric::Matrix;
use crate::objectives::{
    avl, combine_final, contrastive_loss, cosine_diff_batch, cosine_scalar_grad_to_embeddings,
    cross_entropy_head_loss, pvl, snd_loss, LossTerms, LossValue, Method, MethodSpec,
};

use super::eval::ClassPromptSet;
use super::optim::{FineTuneGrads, FineTuneState};

/// Whether AVL sees the average vector after or before this step's update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaOrder {
    #[default]
    Post,
    Pre,
}

/// Target images with prompt-local labels.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

/// Reference pairs addressed by their position in the reference cache.
#[derive(Debug, Clone)]
pub struct ReferenceBatch {
    pub ids: Vec<usize>,
    pub images: Matrix,
    pub texts: Matrix,
}

/// Unweighted loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub cl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub avl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pvl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aux_cl: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: StepLoss,
    pub grads: FineTuneGrads,
    /// Average-vector state after this step (DiVE family only).
    pub ema: Option<AverageVectorState>,
}

pub struct StepContext<'a> {
    pub spec: &'a MethodSpec,
    pub prompts: &'a ClassPromptSet,
    pub cache: Option<&'a ReferenceCache>,
    pub ema_order: EmaOrder,
}

/// Loss and gradients at `state` for one target batch and, for methods that
/// use it, one reference batch. `ema` is read, never mutated; the advanced
/// state is returned.
pub fn step_objective(
    state: &FineTuneState,
    ctx: &StepContext<'_>,
    target: &TargetBatch,
    reference: Option<&ReferenceBatch>,
    ema: Option<&AverageVectorState>,
) -> Result<StepOutcome> {
    let spec = ctx.spec;
    let model = &state.model;
    let mut grads = FineTuneGrads::zeros_like(state);

    // target side
    let img_cache = model.image.forward_batch(&target.images)?;
    let (cl, txt_cache) = if spec.method.uses_head() {
        let head = state.head.as_ref().ok_or(Error::MissingComponent {
            method: spec.method.name(),
            component: "head",
        })?;
        let (cl, head_grad) =
            cross_entropy_head_loss(img_cache.embeddings(), &target.labels, head)?;
        grads.head = Some(head_grad);
        (cl, None)
    } else {
        if let Some(&label) = target.labels.iter().find(|&&l| l >= ctx.prompts.len()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: ctx.prompts.len(),
            });
        }
        let cache = model
            .text
            .forward_batch(&ctx.prompts.inputs().select_rows(&target.labels))?;
        let cl = contrastive_loss(
            img_cache.embeddings(),
            cache.embeddings(),
            model.temperature(),
        )?;
        (cl, Some(cache))
    };

    // reference side
    let mut ref_caches = None;
    let mut terms = LossTerms::default();
    let mut next_ema = None;
    if spec.method.uses_reference() {
        let batch = reference.ok_or(Error::MissingReferenceDataset(spec.method.name()))?;
        let ri = model.image.forward_batch(&batch.images)?;
        let rt = if spec.method == Method::Snd {
            None
        } else {
            Some(model.text.forward_batch(&batch.texts)?)
        };
        let txt = rt.as_ref().map(|c| c.embeddings());
        (terms, next_ema) =
            reference_terms(ctx, model.temperature(), batch, ri.embeddings(), txt, ema)?;
        ref_caches = Some((ri, rt));
    }

    let value_of = |t: &Option<LossValue>| t.as_ref().map(|l| l.value);
    let mut loss = StepLoss {
        total: 0.0,
        cl: cl.value,
        avl: value_of(&terms.avl),
        pvl: value_of(&terms.pvl),
        snd: value_of(&terms.snd),
        aux_cl: value_of(&terms.aux_cl),
    };
    let combined = combine_final(spec, cl, terms)?;
    loss.total = combined.value;

    // backprop into parameters: target first, then reference
    let bag: &mut GradientBag = &mut grads.bag;
    model
        .image
        .backward(&img_cache, &combined.target.grad_image, &mut bag.image)?;
    if let Some(tc) = &txt_cache {
        model
            .text
            .backward(tc, &combined.target.grad_text, &mut bag.text)?;
    }
    bag.log_temperature = combined.target.grad_log_temperature;
    if let (Some(r), Some((ri, rt))) = (&combined.reference, &ref_caches) {
        model.image.backward(ri, &r.grad_image, &mut bag.image)?;
        if let Some(rt) = rt {
            if r.grad_text.rows() != 0 {
                model.text.backward(rt, &r.grad_text, &mut bag.text)?;
            }
        }
        bag.log_temperature += r.grad_log_temperature;
    }
    Ok(StepOutcome {
        loss,
        grads,
        ema: next_ema,
    })
}

/// Unweighted reference-side terms with gradients w.r.t. the fine-tuning
/// reference embeddings, plus the advanced average-vector state.
fn reference_terms(
    ctx: &StepContext<'_>,
    temperature: f64,
    batch: &ReferenceBatch,
    ft_img: &Matrix,
    ft_txt: Option<&Matrix>,
    ema: Option<&AverageVectorState>,
) -> Result<(LossTerms, Option<AverageVectorState>)> {
    let spec = ctx.spec;
    let mut terms = LossTerms::default();
    let cache = || {
        ctx.cache
            .ok_or(Error::MissingReferenceDataset(spec.method.name()))
    };
    match spec.method {
        Method::FlypReplay => {
            let txt = ft_txt.expect("replay embeds reference texts");
            terms.aux_cl = Some(contrastive_loss(ft_img, txt, temperature)?);
        }
        Method::Snd => {
            let (pre_img, _) = cache()?.lookup(&batch.ids)?;
            terms.snd = Some(snd_loss(ft_img, &pre_img)?);
        }
        Method::Dive | Method::DiveCosine => {
            let cache = cache()?;
            let txt = ft_txt.expect("DiVE embeds reference texts");
            let ema = ema.ok_or(Error::MissingComponent {
                method: spec.method.name(),
                component: "average vector state",
            })?;
            let cosine = spec.method == Method::DiveCosine;
            let (u, v, pre) = if cosine {
                let (pi, pt) = cache.lookup(&batch.ids)?;
                (
                    cosine_diff_batch(ft_img, &pi)?,
                    cosine_diff_batch(txt, &pt)?,
                    Some((pi, pt)),
                )
            } else {
                let d = difference_vectors_from_embeddings(ft_img, txt, cache, &batch.ids)?;
                (d.u, d.v, None)
            };
            let updated = ema.update(&u, &v)?;
            let m = match ctx.ema_order {
                EmaOrder::Post => &updated.m,
                EmaOrder::Pre => &ema.m,
            };
            // scalar gradients chain to the embeddings through ∂(f·p)/∂f = p
            let to_embeddings = |mut l: LossValue| -> Result<LossValue> {
                if let Some((pi, pt)) = &pre {
                    l.grad_image = cosine_scalar_grad_to_embeddings(&l.grad_image, pi)?;
                    l.grad_text = cosine_scalar_grad_to_embeddings(&l.grad_text, pt)?;
                }
                Ok(l)
            };
            if spec.use_avl {
                terms.avl = Some(to_embeddings(avl(&u, &v, m)?)?);
            }
            if spec.use_pvl {
                terms.pvl = Some(to_embeddings(pvl(&u, &v)?)?);
            }
            return Ok((terms, Some(updated)));
        }
        _ => {}
    }
    Ok((terms, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{Dense, FrozenSnapshot, ModelSpec, TwoTowerModel};
    use crate::numeric::{finite_difference_gradient, relative_error, SeededRng};

    const SPEC: ModelSpec = ModelSpec {
        image_input_dim: 5,
        text_input_dim: 4,
        hidden_width: 6,
        hidden_layers: 1,
        embed_dim: 4,
        init_temperature: 0.5,
    };

    struct Fixture {
        state: FineTuneState,
        prompts: ClassPromptSet,
        cache: ReferenceCache,
        target: TargetBatch,
        reference: ReferenceBatch,
        ema: AverageVectorState,
    }

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    fn fixture(method: Method, seed: u64) -> Fixture {
        let mut rng = SeededRng::new(seed);
        let pre = TwoTowerModel::init(&SPEC, &mut rng);
        // the fine-tuning model starts away from the frozen one so u, v ≠ 0
        let mut model = pre.clone();
        for p in model
            .image
            .param_slices_mut()
            .into_iter()
            .chain(model.text.param_slices_mut())
        {
            p.iter_mut().for_each(|x| *x += 0.1 * rng.normal());
        }
        let frozen = FrozenSnapshot::new(&pre);
        let (ref_img, ref_txt) = (random(6, 5, &mut rng), random(6, 4, &mut rng));
        let cache = ReferenceCache::build(&frozen, &ref_img, &ref_txt).unwrap();
        let ids = vec![4, 1, 3];
        let reference = ReferenceBatch {
            images: ref_img.select_rows(&ids),
            texts: ref_txt.select_rows(&ids),
            ids,
        };
        let head = method
            .uses_head()
            .then(|| Dense::glorot(SPEC.embed_dim, 3, &mut rng));
        let width = if method == Method::DiveCosine {
            1
        } else {
            SPEC.embed_dim
        };
        // α = 1 keeps m fixed, so the objective is a function of parameters alone
        let ema = AverageVectorState::with_initial(rng.normal_vec(width, 0.1), 1.0).unwrap();
        Fixture {
            state: FineTuneState { model, head },
            prompts: ClassPromptSet::new(vec![7, 2, 9], random(3, 4, &mut rng)).unwrap(),
            cache,
            target: TargetBatch {
                images: random(4, 5, &mut rng),
                labels: vec![0, 2, 1, 2],
            },
            reference,
            ema,
        }
    }

    fn flatten(state: &FineTuneState) -> Vec<f64> {
        let mut p = state.model.image.flatten();
        p.extend(state.model.text.flatten());
        p.push(state.model.log_temperature);
        if let Some(h) = &state.head {
            p.extend(h.weights.data());
            p.extend(&h.bias);
        }
        p
    }

    fn unflatten(state: &mut FineTuneState, p: &[f64]) {
        let ni = state.model.image.num_params();
        let nt = state.model.text.num_params();
        state.model.image.set_flat(&p[..ni]).unwrap();
        state.model.text.set_flat(&p[ni..ni + nt]).unwrap();
        state.model.log_temperature = p[ni + nt];
        if let Some(h) = &mut state.head {
            let nw = h.weights.data().len();
            h.weights
                .data_mut()
                .copy_from_slice(&p[ni + nt + 1..ni + nt + 1 + nw]);
            h.bias.copy_from_slice(&p[ni + nt + 1 + nw..]);
        }
    }

    fn flatten_grads(g: &FineTuneGrads) -> Vec<f64> {
        let mut out = g.bag.image.flatten();
        out.extend(g.bag.text.flatten());
        out.push(g.bag.log_temperature);
        if let Some(h) = &g.head {
            out.extend(h.weights.data());
            out.extend(&h.bias);
        }
        out
    }

    fn spec_for(method: Method) -> MethodSpec {
        // weights of order one keep every term visible in the total
        MethodSpec {
            lambda: 0.7,
            lambda_snd: 0.7,
            lambda_aux: 0.7,
            ..MethodSpec::new(method)
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for method in Method::ALL {
            for seed in 0..3 {
                let fx = fixture(method, seed);
                let spec = spec_for(method);
                let ctx = StepContext {
                    spec: &spec,
                    prompts: &fx.prompts,
                    cache: Some(&fx.cache),
                    ema_order: EmaOrder::Post,
                };
                let run = |state: &FineTuneState| {
                    step_objective(state, &ctx, &fx.target, Some(&fx.reference), Some(&fx.ema))
                };
                let out = run(&fx.state).unwrap();
                let mut probe = fx.state.clone();
                let fd = finite_difference_gradient(
                    |p| {
                        unflatten(&mut probe, p);
                        run(&probe).unwrap().loss.total
                    },
                    &flatten(&fx.state),
                    1e-5,
                )
                .unwrap();
                let err = relative_error(&flatten_grads(&out.grads), &fd);
                assert!(err < 1e-4, "{method:?} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn loss_components_add_up() {
        for method in Method::ALL {
            let fx = fixture(method, 11);
            let spec = spec_for(method);
            let ctx = StepContext {
                spec: &spec,
                prompts: &fx.prompts,
                cache: Some(&fx.cache),
                ema_order: EmaOrder::Post,
            };
            let l = step_objective(
                &fx.state,
                &ctx,
                &fx.target,
                Some(&fx.reference),
                Some(&fx.ema),
            )
            .unwrap()
            .loss;
            let extra: f64 = [l.avl, l.pvl, l.snd, l.aux_cl].iter().flatten().sum();
            assert!((l.total - (l.cl + 0.7 * extra)).abs() < 1e-12, "{method:?}");
            assert_eq!(l.avl.is_some(), method.is_dive(), "{method:?}");
        }
    }

    #[test]
    fn ema_order_selects_the_average_seen_by_avl() {
        let mut fx = fixture(Method::Dive, 5);
        fx.ema.alpha = 0.5;
        let spec = spec_for(Method::Dive).with_terms(true, false);
        let run = |order| {
            let ctx = StepContext {
                spec: &spec,
                prompts: &fx.prompts,
                cache: Some(&fx.cache),
                ema_order: order,
            };
            step_objective(
                &fx.state,
                &ctx,
                &fx.target,
                Some(&fx.reference),
                Some(&fx.ema),
            )
            .unwrap()
        };
        let (post, pre) = (run(EmaOrder::Post), run(EmaOrder::Pre));
        // both orders advance the state identically
        assert_eq!(post.ema, pre.ema);
        let ft = fx.state.model.image.embed(&fx.reference.images).unwrap();
        let ft_t = fx.state.model.text.embed(&fx.reference.texts).unwrap();
        let d =
            difference_vectors_from_embeddings(&ft, &ft_t, &fx.cache, &fx.reference.ids).unwrap();
        let want = fx.ema.update(&d.u, &d.v).unwrap();
        assert_eq!(post.ema.as_ref(), Some(&want));
        assert!((post.loss.avl.unwrap() - avl(&d.u, &d.v, &want.m).unwrap().value).abs() < 1e-12);
        assert!((pre.loss.avl.unwrap() - avl(&d.u, &d.v, &fx.ema.m).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn missing_pieces_are_reported() {
        let fx = fixture(Method::Dive, 1);
        let spec = spec_for(Method::Dive);
        let ctx = StepContext {
            spec: &spec,
            prompts: &fx.prompts,
            cache: Some(&fx.cache),
            ema_order: EmaOrder::Post,
        };
        let err = step_objective(&fx.state, &ctx, &fx.target, None, Some(&fx.ema)).unwrap_err();
        assert!(matches!(err, Error::MissingReferenceDataset(_)));
        let err =
            step_objective(&fx.state, &ctx, &fx.target, Some(&fx.reference), None).unwrap_err();
        assert!(matches!(err, Error::MissingComponent { .. }));
        let bad = TargetBatch {
            images: fx.target.images.clone(),
            labels: vec![0, 3, 1, 2],
        };
        let err =
            step_objective(&fx.state, &ctx, &bad, Some(&fx.reference), Some(&fx.ema)).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, .. }));
    }
}
