//! Finite-difference verification of analytic gradients.
//!
//! `grad_check` compares the gradient produced by [`Graph::backward`] against
//! central differences, coordinate by coordinate, and reports the worst
//! relative error `|analytic - numeric| / max(1, |numeric|)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorRef};
use crate::tensor::Tensor;

/// A scalar-valued function of one tensor, expressed over a fresh graph.
pub trait ScalarFn: Fn(&mut Graph, TensorRef) -> Result<TensorRef> {}
impl<F: Fn(&mut Graph, TensorRef) -> Result<TensorRef>> ScalarFn for F {}

fn eval_scalar(f: &impl ScalarFn, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xr = g.leaf(x.clone().requires_grad(false));
    let out = f(&mut g, xr)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::numeric(format!("non-finite function value {v}")));
    }
    Ok(v)
}

/// Gradient of `f` at `x` via backward.
pub fn analytic_gradient(f: &impl ScalarFn, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xr = g.leaf(x.clone().requires_grad(true));
    let out = f(&mut g, xr)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let grad = g
        .grad(xr)
        .expect("requires_grad leaf has gradient after backward");
    Ok(grad.data().to_vec())
}

/// Central-difference gradient of `f` at `x` with half-step `step`.
pub fn central_difference(f: &impl ScalarFn, x: &Tensor, step: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fp = eval_scalar(f, &plus)
            .map_err(|e| Error::numeric(format!("coordinate {i}: {e}")))?;
        let fm = eval_scalar(f, &minus)
            .map_err(|e| Error::numeric(format!("coordinate {i}: {e}")))?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Worst-case relative error between two gradient vectors:
/// `max_i |a_i - n_i| / max(1, |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Runs the full check and returns the max relative error over coordinates.
pub fn grad_check(f: impl ScalarFn, x: &Tensor, step: f64) -> Result<f64> {
    let analytic = analytic_gradient(&f, x)?;
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite analytic gradient at coordinate {i}"
        )));
    }
    let numeric = central_difference(&f, x, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// One named check from the standard table.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Contracts a tensor to a scalar through a fixed random linear functional,
/// so transposition mistakes in a backward rule cannot cancel out.
fn weighted_sum(g: &mut Graph, y: TensorRef, seed: u64) -> Result<TensorRef> {
    let r = rand_tensor(g.value(y).shape(), seed);
    let rc = g.constant(r);
    let prod = g.mul(y, rc)?;
    g.sum(prod)
}

/// Gradient checks for every differentiable operation plus the composite
/// distillation loss and full model forwards. Returns the worst relative
/// error per case; every entry is expected to stay at or below 1e-6.
pub fn run_standard_checks() -> Result<Vec<CheckResult>> {
    use crate::models::{
        decode, encode, init_decoder, init_encoder, EncoderBinding, EncoderConfig, ParamModule,
    };
    use crate::qsd::{
        attention_map, loss_qsd, reconstruct, QsdConfig, QsdHead, QsdWeights, StudentViews,
        TeacherViews,
    };

    let mut results = Vec::new();
    let mut push = |name: &str, err: Result<f64>| -> Result<()> {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err?,
        });
        Ok(())
    };
    let step = 1e-6;

    push(
        "add",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[3], 100));
                let y = g.add(x, b)?;
                weighted_sum(g, y, 1)
            },
            &rand_tensor(&[2, 3], 0),
            step,
        ),
    )?;
    push(
        "sub",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[2, 3], 101));
                let y = g.sub(x, b)?;
                weighted_sum(g, y, 2)
            },
            &rand_tensor(&[2, 3], 1),
            step,
        ),
    )?;
    push(
        "mul",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[2, 3], 102));
                let y = g.mul(x, b)?;
                weighted_sum(g, y, 3)
            },
            &rand_tensor(&[3], 2),
            step,
        ),
    )?;
    push(
        "scale",
        grad_check(
            |g, x| {
                let y = g.scale(x, -1.7)?;
                weighted_sum(g, y, 4)
            },
            &rand_tensor(&[4], 3),
            step,
        ),
    )?;
    push(
        "matmul_lhs",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[4, 2], 103));
                let y = g.matmul(x, b)?;
                weighted_sum(g, y, 5)
            },
            &rand_tensor(&[3, 4], 4),
            step,
        ),
    )?;
    push(
        "matmul_rhs",
        grad_check(
            |g, x| {
                let a = g.constant(rand_tensor(&[2, 3, 4], 104));
                let y = g.matmul(a, x)?;
                weighted_sum(g, y, 6)
            },
            &rand_tensor(&[4, 2], 5),
            step,
        ),
    )?;
    push(
        "matmul_batched",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[2, 4, 3], 105));
                let y = g.matmul(x, b)?;
                weighted_sum(g, y, 7)
            },
            &rand_tensor(&[2, 3, 4], 6),
            step,
        ),
    )?;
    push(
        "affine_vs_input",
        grad_check(
            |g, x| {
                let w = g.constant(rand_tensor(&[4, 3], 130));
                let b = g.constant(rand_tensor(&[3], 131));
                let y = g.affine(x, w, b)?;
                weighted_sum(g, y, 26)
            },
            &rand_tensor(&[2, 3, 4], 50),
            step,
        ),
    )?;
    push(
        "affine_vs_weight",
        grad_check(
            |g, x| {
                let a = g.constant(rand_tensor(&[2, 3, 4], 132));
                let b = g.constant(rand_tensor(&[3], 133));
                let y = g.affine(a, x, b)?;
                weighted_sum(g, y, 27)
            },
            &rand_tensor(&[4, 3], 51),
            step,
        ),
    )?;
    push(
        "affine_vs_bias",
        grad_check(
            |g, x| {
                let a = g.constant(rand_tensor(&[2, 3, 4], 134));
                let w = g.constant(rand_tensor(&[4, 3], 135));
                let y = g.affine(a, w, x)?;
                weighted_sum(g, y, 28)
            },
            &rand_tensor(&[3], 52),
            step,
        ),
    )?;
    push(
        "permute",
        grad_check(
            |g, x| {
                let y = g.permute(x, &[2, 0, 1])?;
                weighted_sum(g, y, 8)
            },
            &rand_tensor(&[2, 3, 4], 7),
            step,
        ),
    )?;
    push(
        "reshape",
        grad_check(
            |g, x| {
                let y = g.reshape(x, vec![6, 2])?;
                weighted_sum(g, y, 9)
            },
            &rand_tensor(&[3, 4], 8),
            step,
        ),
    )?;
    push(
        "concat",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[2, 2, 3], 106));
                let y = g.concat(x, b, 1)?;
                weighted_sum(g, y, 10)
            },
            &rand_tensor(&[2, 1, 3], 9),
            step,
        ),
    )?;
    push(
        "narrow",
        grad_check(
            |g, x| {
                let y = g.narrow(x, 1, 1, 2)?;
                weighted_sum(g, y, 11)
            },
            &rand_tensor(&[2, 4, 3], 10),
            step,
        ),
    )?;
    push(
        "expand_lead",
        grad_check(
            |g, x| {
                let y = g.expand_lead(x, 3)?;
                weighted_sum(g, y, 12)
            },
            &rand_tensor(&[1, 2, 3], 11),
            step,
        ),
    )?;
    push(
        "replace_rows",
        grad_check(
            |g, x| {
                let fill = g.constant(rand_tensor(&[3], 107));
                let y = g.replace_rows(x, fill, &[1, 3])?;
                weighted_sum(g, y, 13)
            },
            &rand_tensor(&[2, 4, 3], 12),
            step,
        ),
    )?;
    push(
        "replace_rows_fill",
        grad_check(
            |g, x| {
                let tokens = g.constant(rand_tensor(&[2, 4, 3], 108));
                let y = g.replace_rows(tokens, x, &[0, 2])?;
                weighted_sum(g, y, 14)
            },
            &rand_tensor(&[3], 13),
            step,
        ),
    )?;
    push(
        "extract_patches",
        grad_check(
            |g, x| {
                let y = g.extract_patches(x, 2)?;
                weighted_sum(g, y, 15)
            },
            &rand_tensor(&[1, 3, 4, 4], 14),
            step,
        ),
    )?;
    push(
        "bilinear_upsample",
        grad_check(
            |g, x| {
                let y = g.bilinear_upsample(x, 7, 5)?;
                weighted_sum(g, y, 16)
            },
            &rand_tensor(&[1, 2, 3, 3], 15),
            step,
        ),
    )?;
    push(
        "softmax",
        grad_check(
            |g, x| {
                let y = g.softmax(x, 1)?;
                weighted_sum(g, y, 17)
            },
            &rand_tensor(&[3, 5], 16),
            step,
        ),
    )?;
    push(
        "layer_norm_x",
        grad_check(
            |g, x| {
                let gain = g.constant(rand_tensor(&[4], 109));
                let bias = g.constant(rand_tensor(&[4], 110));
                let y = g.layer_norm(x, gain, bias, 1e-6)?;
                weighted_sum(g, y, 18)
            },
            &rand_tensor(&[3, 4], 17),
            step,
        ),
    )?;
    push(
        "layer_norm_gain",
        grad_check(
            |g, x| {
                let xs = g.constant(rand_tensor(&[3, 4], 111));
                let bias = g.constant(rand_tensor(&[4], 112));
                let y = g.layer_norm(xs, x, bias, 1e-6)?;
                weighted_sum(g, y, 19)
            },
            &rand_tensor(&[4], 18),
            step,
        ),
    )?;
    push(
        "layer_norm_bias",
        grad_check(
            |g, x| {
                let xs = g.constant(rand_tensor(&[3, 4], 113));
                let gain = g.constant(rand_tensor(&[4], 114));
                let y = g.layer_norm(xs, gain, x, 1e-6)?;
                weighted_sum(g, y, 20)
            },
            &rand_tensor(&[4], 19),
            step,
        ),
    )?;
    push(
        "gelu",
        grad_check(
            |g, x| {
                let y = g.gelu(x)?;
                weighted_sum(g, y, 21)
            },
            &rand_tensor(&[6], 20),
            step,
        ),
    )?;
    push("sum", grad_check(|g, x| g.sum(x), &rand_tensor(&[5], 21), step))?;
    push("mean", grad_check(|g, x| g.mean(x), &rand_tensor(&[5], 22), step))?;
    push(
        "mse_lhs",
        grad_check(
            |g, x| {
                let b = g.constant(rand_tensor(&[2, 3], 115));
                g.mse(x, b)
            },
            &rand_tensor(&[2, 3], 23),
            step,
        ),
    )?;
    push(
        "mse_rhs",
        grad_check(
            |g, x| {
                let a = g.constant(rand_tensor(&[2, 3], 116));
                g.mse(a, x)
            },
            &rand_tensor(&[2, 3], 24),
            step,
        ),
    )?;
    push(
        "cross_entropy",
        grad_check(
            |g, x| g.cross_entropy(x, &[2, 0, 255, 1], 255),
            &rand_tensor(&[4, 3], 25),
            step,
        ),
    )?;

    // Distillation operators on a 2-token instance with student width 3 and
    // teacher width 4.
    let head = QsdHead::init(3, 4, 31);
    let qcfg = QsdConfig::default();
    let v_t = rand_tensor(&[1, 2, 4], 32);
    let v_t_cls = rand_tensor(&[1, 1, 4], 33);
    {
        let head = head.clone();
        let v_t = v_t.clone();
        push(
            "qsd_attention_map",
            grad_check(
                move |g, x| {
                    let hb = head.bind(g, false);
                    let t = g.constant(v_t.clone());
                    let w = attention_map(g, &hb, &QsdConfig::default(), x, t)?;
                    weighted_sum(g, w, 22)
                },
                &rand_tensor(&[1, 2, 3], 34),
                step,
            ),
        )?;
    }
    {
        let head = head.clone();
        let v_t = v_t.clone();
        push(
            "qsd_reconstruct",
            grad_check(
                move |g, x| {
                    let hb = head.bind(g, false);
                    let t = g.constant(v_t.clone());
                    let r = reconstruct(g, &hb, &QsdConfig::default(), x, t)?;
                    weighted_sum(g, r, 23)
                },
                &rand_tensor(&[1, 2, 3], 35),
                step,
            ),
        )?;
    }

    // Full combined loss as a function of student tokens, masked tokens held
    // fixed, and of each projection weight.
    let build_qsd_loss = |g: &mut Graph,
                          hb: &crate::qsd::QsdHeadBinding,
                          v_s: TensorRef,
                          v_s_mask: TensorRef,
                          v_s_cls: TensorRef,
                          v_t: TensorRef,
                          v_t_cls: TensorRef|
     -> Result<TensorRef> {
        let terms = loss_qsd(
            g,
            hb,
            &qcfg,
            &StudentViews {
                cls: v_s_cls,
                tokens: v_s,
                masked_tokens: Some(v_s_mask),
            },
            &TeacherViews {
                cls: v_t_cls,
                tokens: v_t,
            },
            &QsdWeights::default(),
        )?;
        Ok(terms.total)
    };
    {
        let head = head.clone();
        let (v_t, v_t_cls) = (v_t.clone(), v_t_cls.clone());
        let v_s_mask = rand_tensor(&[1, 2, 3], 36);
        let v_s_cls = rand_tensor(&[1, 1, 3], 37);
        push(
            "qsd_loss_vs_student_tokens",
            grad_check(
                move |g, x| {
                    let hb = head.bind(g, true);
                    let sm = g.constant(v_s_mask.clone());
                    let sc = g.constant(v_s_cls.clone());
                    let t = g.constant(v_t.clone());
                    let tc = g.constant(v_t_cls.clone());
                    build_qsd_loss(g, &hb, x, sm, sc, t, tc)
                },
                &rand_tensor(&[1, 2, 3], 38),
                step,
            ),
        )?;
    }
    for (case, param) in [
        ("qsd_loss_vs_query_proj", "query_proj.weight"),
        ("qsd_loss_vs_value_proj", "value_proj.weight"),
        ("qsd_loss_vs_cls_value_proj", "cls_value_proj.weight"),
    ] {
        let head = head.clone();
        let (v_t, v_t_cls) = (v_t.clone(), v_t_cls.clone());
        let v_s = rand_tensor(&[1, 2, 3], 39);
        let v_s_mask = rand_tensor(&[1, 2, 3], 40);
        let v_s_cls = rand_tensor(&[1, 1, 3], 41);
        push(
            case,
            grad_check(
                move |g, x| {
                    // Bind every projection as a constant except the one
                    // under test, which is the differentiated input.
                    let refs = head
                        .named_params()
                        .into_iter()
                        .map(|(name, t)| {
                            let r = if name == param { x } else { g.constant(t.clone()) };
                            (name, r)
                        })
                        .collect();
                    let hb = crate::qsd::QsdHeadBinding { refs };
                    let s = g.constant(v_s.clone());
                    let sm = g.constant(v_s_mask.clone());
                    let sc = g.constant(v_s_cls.clone());
                    let t = g.constant(v_t.clone());
                    let tc = g.constant(v_t_cls.clone());
                    build_qsd_loss(g, &hb, s, sm, sc, t, tc)
                },
                &rand_tensor(&[3, 4], 42),
                step,
            ),
        )?;
    }

    // Whole-model composites: gradient w.r.t. the input image through the
    // full encoder (with a mask) and decoder, and w.r.t. the patch
    // projection weight through the encoder.
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        depth: 1,
        dim: 6,
        heads: 2,
        mlp_ratio: 2.0,
    };
    let encoder = init_encoder(&cfg, 43)?;
    let decoder = init_decoder(cfg.dim, 3, cfg.grid(), cfg.image_size, 44);
    {
        let (encoder, decoder, cfg) = (encoder.clone(), decoder.clone(), cfg.clone());
        push(
            "encoder_decoder_vs_image",
            grad_check(
                move |g, x| {
                    let eb = encoder.bind(g, false);
                    let mask = crate::models::MaskSpec {
                        ratio: 0.5,
                        indices: vec![1, 2],
                        seed: 0,
                    };
                    let (_, tokens) = encode(g, &cfg, &eb, x, Some(&mask))?;
                    let db = decoder.bind(g, false);
                    let logits = decode(g, &decoder, &db, tokens)?;
                    weighted_sum(g, logits, 24)
                },
                &rand_tensor(&[1, 3, 8, 8], 45),
                step,
            ),
        )?;
    }
    {
        let patch_weight = encoder.patch.weight.clone();
        let (encoder, cfg) = (encoder.clone(), cfg.clone());
        push(
            "encoder_vs_patch_weight",
            grad_check(
                move |g, x| {
                    let refs = encoder
                        .named_params()
                        .into_iter()
                        .map(|(name, t)| {
                            let r = if name == "patch.weight" {
                                x
                            } else {
                                g.constant(t.clone())
                            };
                            (name, r)
                        })
                        .collect();
                    let eb = EncoderBinding { refs };
                    let img = g.constant(rand_tensor(&[1, 3, 8, 8], 117));
                    let (cls, tokens) = encode(g, &cfg, &eb, img, None)?;
                    let both = g.concat(cls, tokens, 1)?;
                    weighted_sum(g, both, 25)
                },
                &patch_weight,
                step,
            ),
        )?;
    }

    Ok(results)
}
