//! Query-based soft distillation.
//!
//! Projected student tokens act as queries against teacher tokens; the
//! resulting attention (softmax over the teacher-token axis) mixes
//! value-projected student tokens into a reconstruction that is regressed
//! onto the teacher features. Three loss terms: patch features, masked-pass
//! features, and the CLS token; teacher tensors are constants throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorRef};
use crate::models::{Linear, ParamModule};
use crate::tensor::Tensor;

/// The trainable projections owned by the student side. `query_proj` adapts
/// student tokens to the teacher width for the attention; `value_proj`
/// produces the rows that the attention mixes. The CLS path has its own
/// pair.
#[derive(Clone, Debug, PartialEq)]
pub struct QsdHead {
    pub query_proj: Linear,
    pub value_proj: Linear,
    pub cls_query_proj: Linear,
    pub cls_value_proj: Linear,
    pub student_dim: usize,
    pub teacher_dim: usize,
}

impl QsdHead {
    pub fn init(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QsdHead {
            query_proj: Linear::init(&mut rng, student_dim, teacher_dim),
            value_proj: Linear::init(&mut rng, student_dim, teacher_dim),
            cls_query_proj: Linear::init(&mut rng, student_dim, teacher_dim),
            cls_value_proj: Linear::init(&mut rng, student_dim, teacher_dim),
            student_dim,
            teacher_dim,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> QsdHeadBinding {
        let refs = self
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, g.leaf(t.clone().requires_grad(trainable))))
            .collect();
        QsdHeadBinding { refs }
    }
}

impl ParamModule for QsdHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("query_proj.weight".to_string(), &self.query_proj.weight),
            ("query_proj.bias".to_string(), &self.query_proj.bias),
            ("value_proj.weight".to_string(), &self.value_proj.weight),
            ("value_proj.bias".to_string(), &self.value_proj.bias),
            ("cls_query_proj.weight".to_string(), &self.cls_query_proj.weight),
            ("cls_query_proj.bias".to_string(), &self.cls_query_proj.bias),
            ("cls_value_proj.weight".to_string(), &self.cls_value_proj.weight),
            ("cls_value_proj.bias".to_string(), &self.cls_value_proj.bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("query_proj.weight".to_string(), &mut self.query_proj.weight),
            ("query_proj.bias".to_string(), &mut self.query_proj.bias),
            ("value_proj.weight".to_string(), &mut self.value_proj.weight),
            ("value_proj.bias".to_string(), &mut self.value_proj.bias),
            ("cls_query_proj.weight".to_string(), &mut self.cls_query_proj.weight),
            ("cls_query_proj.bias".to_string(), &mut self.cls_query_proj.bias),
            ("cls_value_proj.weight".to_string(), &mut self.cls_value_proj.weight),
            ("cls_value_proj.bias".to_string(), &mut self.cls_value_proj.bias),
        ]
    }
}

pub struct QsdHeadBinding {
    pub refs: Vec<(String, TensorRef)>,
}

impl QsdHeadBinding {
    pub fn get(&self, name: &str) -> TensorRef {
        self.refs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct QsdConfig {
    /// Divides the attention logits before softmax. The default 1.0 matches
    /// the plain inner-product attention and inserts no scaling node.
    pub temperature: f64,
    /// When set, the CLS query attends over all teacher tokens (CLS plus
    /// patches) instead of the literal single-token path.
    pub cls_attends_to_patches: bool,
}

impl Default for QsdConfig {
    fn default() -> Self {
        QsdConfig {
            temperature: 1.0,
            cls_attends_to_patches: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct QsdWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for QsdWeights {
    fn default() -> Self {
        QsdWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl QsdWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::validation(format!(
                "loss weights must be nonnegative, got alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

fn check_token_shapes(g: &Graph, v_s: TensorRef, v_t: TensorRef) -> Result<()> {
    let (ss, ts) = (g.value(v_s).shape(), g.value(v_t).shape());
    if ss.len() != 3 || ts.len() != 3 || ss[0] != ts[0] || ss[1] != ts[1] {
        return Err(Error::dim(format!(
            "student tokens {:?} and teacher tokens {:?} must share batch and token extents",
            ss, ts
        )));
    }
    Ok(())
}

fn project(g: &mut Graph, head: &QsdHeadBinding, proj: &str, x: TensorRef) -> Result<TensorRef> {
    g.affine(
        x,
        head.get(&format!("{proj}.weight")),
        head.get(&format!("{proj}.bias")),
    )
}

/// Attention logits `W[b,i,j] = <query_proj(v_s^i), v_t^j>`, shape
/// `[B, N, N]`. The teacher tensor enters as a constant: no gradient flows
/// into `v_t`.
pub fn attention_map(
    g: &mut Graph,
    head: &QsdHeadBinding,
    cfg: &QsdConfig,
    v_s: TensorRef,
    v_t: TensorRef,
) -> Result<TensorRef> {
    check_token_shapes(g, v_s, v_t)?;
    let q = project(g, head, "query_proj", v_s)?;
    let t_const = g.detach(v_t);
    let t_t = g.transpose(t_const)?;
    let mut w = g.matmul(q, t_t)?;
    if cfg.temperature != 1.0 {
        if cfg.temperature <= 0.0 {
            return Err(Error::validation(format!(
                "temperature must be positive, got {}",
                cfg.temperature
            )));
        }
        w = g.scale(w, 1.0 / cfg.temperature)?;
    }
    Ok(w)
}

/// Attention-weighted reconstruction
/// `v'_s = softmax(W over the teacher axis) . value_proj(v_s)`, shape
/// `[B, N, C_t]`. Each output row is a convex combination of value-projected
/// student rows weighted by affinity to teacher positions.
pub fn reconstruct(
    g: &mut Graph,
    head: &QsdHeadBinding,
    cfg: &QsdConfig,
    v_s: TensorRef,
    v_t: TensorRef,
) -> Result<TensorRef> {
    let w = attention_map(g, head, cfg, v_s, v_t)?;
    let attn = g.softmax(w, 2)?;
    let vals = project(g, head, "value_proj", v_s)?;
    g.matmul(attn, vals)
}

/// MSE between the reconstruction and the (constant) teacher features.
pub fn loss_feat(
    g: &mut Graph,
    head: &QsdHeadBinding,
    cfg: &QsdConfig,
    v_s: TensorRef,
    v_t: TensorRef,
) -> Result<TensorRef> {
    let recon = reconstruct(g, head, cfg, v_s, v_t)?;
    let t_const = g.detach(v_t);
    g.mse(recon, t_const)
}

/// The same computation applied to features from a masked student pass,
/// still against the full-image teacher features.
pub fn loss_mask(
    g: &mut Graph,
    head: &QsdHeadBinding,
    cfg: &QsdConfig,
    v_s_mask: TensorRef,
    v_t: TensorRef,
) -> Result<TensorRef> {
    loss_feat(g, head, cfg, v_s_mask, v_t)
}

/// CLS-path reconstruction and MSE. With the literal single-token reading
/// the softmax weight is identically 1 and the reconstruction equals
/// `cls_value_proj(v_s_cls)` bit for bit.
pub fn loss_cls(
    g: &mut Graph,
    head: &QsdHeadBinding,
    cfg: &QsdConfig,
    v_s_cls: TensorRef,
    v_t_cls: TensorRef,
    v_s_tokens: TensorRef,
    v_t_tokens: TensorRef,
) -> Result<TensorRef> {
    let (ss, ts) = (g.value(v_s_cls).shape(), g.value(v_t_cls).shape());
    if ss.len() != 3 || ss[1] != 1 || ts.len() != 3 || ts[1] != 1 {
        return Err(Error::dim(format!(
            "CLS inputs must be [B, 1, C], got {:?} and {:?}",
            ss, ts
        )));
    }
    let recon = if cfg.cls_attends_to_patches {
        // CLS query against all teacher tokens, mixing over all student rows.
        let q = project(g, head, "cls_query_proj", v_s_cls)?;
        let t_all0 = g.concat(v_t_cls, v_t_tokens, 1)?;
        let t_all = g.detach(t_all0);
        let t_t = g.transpose(t_all)?;
        let mut w = g.matmul(q, t_t)?;
        if cfg.temperature != 1.0 {
            w = g.scale(w, 1.0 / cfg.temperature)?;
        }
        let attn = g.softmax(w, 2)?;
        let s_all = g.concat(v_s_cls, v_s_tokens, 1)?;
        let vals = project(g, head, "cls_value_proj", s_all)?;
        g.matmul(attn, vals)?
    } else {
        let q = project(g, head, "cls_query_proj", v_s_cls)?;
        let t_const = g.detach(v_t_cls);
        let t_t = g.transpose(t_const)?;
        let mut w = g.matmul(q, t_t)?;
        if cfg.temperature != 1.0 {
            w = g.scale(w, 1.0 / cfg.temperature)?;
        }
        let attn = g.softmax(w, 2)?;
        let vals = project(g, head, "cls_value_proj", v_s_cls)?;
        g.matmul(attn, vals)?
    };
    let t_const = g.detach(v_t_cls);
    g.mse(recon, t_const)
}

/// Student-side forward outputs feeding the combined loss.
pub struct StudentViews {
    pub cls: TensorRef,
    pub tokens: TensorRef,
    /// Tokens from the masked forward pass; when absent the mask term falls
    /// back to the unmasked tokens (empty-mask degenerate case).
    pub masked_tokens: Option<TensorRef>,
}

pub struct TeacherViews {
    pub cls: TensorRef,
    pub tokens: TensorRef,
}

pub struct QsdLossTerms {
    pub feat: TensorRef,
    pub mask: TensorRef,
    pub cls: TensorRef,
    pub total: TensorRef,
}

/// Weighted sum of the three loss terms.
pub fn loss_qsd(
    g: &mut Graph,
    head: &QsdHeadBinding,
    cfg: &QsdConfig,
    student: &StudentViews,
    teacher: &TeacherViews,
    weights: &QsdWeights,
) -> Result<QsdLossTerms> {
    weights.validate()?;
    let feat = loss_feat(g, head, cfg, student.tokens, teacher.tokens)?;
    let masked = student.masked_tokens.unwrap_or(student.tokens);
    let mask = loss_mask(g, head, cfg, masked, teacher.tokens)?;
    let cls = loss_cls(
        g,
        head,
        cfg,
        student.cls,
        teacher.cls,
        student.tokens,
        teacher.tokens,
    )?;
    let wf = g.scale(feat, weights.alpha)?;
    let wm = g.scale(mask, weights.beta)?;
    let wc = g.scale(cls, weights.gamma)?;
    let fm = g.add(wf, wm)?;
    let total = g.add(fm, wc)?;
    Ok(QsdLossTerms {
        feat,
        mask,
        cls,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Head whose projections are fixed by hand for oracle tests.
    fn head_with(query_w: Tensor, value_w: Tensor, cs: usize, ct: usize) -> QsdHead {
        let mut head = QsdHead::init(cs, ct, 0);
        head.query_proj.weight = query_w;
        head.value_proj.weight = value_w;
        head
    }

    #[test]
    fn attention_map_single_token_inner_product() {
        let cs = 3;
        let ct = 2;
        let head = QsdHead::init(cs, ct, 7);
        let v_s = rand_tensor(&[2, 1, cs], 1);
        let v_t = rand_tensor(&[2, 1, ct], 2);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(v_s.clone());
        let t = g.constant(v_t.clone());
        let w = attention_map(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
        assert_eq!(g.value(w).shape(), &[2, 1, 1]);
        for b in 0..2 {
            let mut q = vec![0.0; ct];
            for j in 0..ct {
                q[j] = head.query_proj.bias.data()[j];
                for i in 0..cs {
                    q[j] += v_s.data()[b * cs + i] * head.query_proj.weight.data()[i * ct + j];
                }
            }
            let expect: f64 = (0..ct).map(|j| q[j] * v_t.data()[b * ct + j]).sum();
            assert!((g.value(w).data()[b] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_projection_on_orthonormal_rows_gives_identity() {
        let head = head_with(
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            2,
            2,
        );
        let rows = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(rows.clone());
        let t = g.constant(rows);
        let w = attention_map(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_map_matches_double_loop_oracle() {
        let (cs, ct, n) = (3, 4, 2);
        let head = QsdHead::init(cs, ct, 3);
        let v_s = rand_tensor(&[1, n, cs], 5);
        let v_t = rand_tensor(&[1, n, ct], 6);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(v_s.clone());
        let t = g.constant(v_t.clone());
        let w = attention_map(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut expect = 0.0;
                for c in 0..ct {
                    let mut q = head.query_proj.bias.data()[c];
                    for k in 0..cs {
                        q += v_s.data()[i * cs + k] * head.query_proj.weight.data()[k * ct + c];
                    }
                    expect += q * v_t.data()[j * ct + c];
                }
                assert!((g.value(w).data()[i * n + j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reconstruct_single_token_reduces_to_value_projection_bitwise() {
        let (cs, ct) = (3, 4);
        let head = QsdHead::init(cs, ct, 11);
        let v_s = rand_tensor(&[2, 1, cs], 12);
        let v_t = rand_tensor(&[2, 1, ct], 13);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(v_s.clone());
        let t = g.constant(v_t);
        let recon = reconstruct(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();

        let mut g2 = Graph::new();
        let hb2 = head.bind(&mut g2, false);
        let s2 = g2.constant(v_s);
        let vals = project(&mut g2, &hb2, "value_proj", s2).unwrap();
        assert_eq!(g.value(recon).data(), g2.value(vals).data());
    }

    #[test]
    fn equal_student_tokens_give_equal_output_rows() {
        let (cs, ct, n) = (3, 4, 5);
        let head = QsdHead::init(cs, ct, 2);
        let row = rand_tensor(&[cs], 8);
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(row.data());
        }
        let v_s = Tensor::from_vec(vec![1, n, cs], data).unwrap();
        let v_t = rand_tensor(&[1, n, ct], 9);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(v_s);
        let t = g.constant(v_t);
        let recon = reconstruct(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
        let out = g.value(recon).data();
        for i in 1..n {
            assert_eq!(&out[..ct], &out[i * ct..(i + 1) * ct]);
        }
    }

    #[test]
    fn reconstruct_matches_softmax_then_mix_oracle() {
        let (cs, ct, n) = (3, 4, 3);
        let head = QsdHead::init(cs, ct, 21);
        let v_s = rand_tensor(&[1, n, cs], 22);
        let v_t = rand_tensor(&[1, n, ct], 23);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(v_s.clone());
        let t = g.constant(v_t.clone());
        let recon = reconstruct(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();

        // Two-step oracle: explicit projections, explicit row softmax,
        // explicit mixing, all naive loops.
        let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
            let mut out = vec![0.0; ct];
            for j in 0..ct {
                out[j] = l.bias.data()[j];
                for i in 0..cs {
                    out[j] += x[i] * l.weight.data()[i * ct + j];
                }
            }
            out
        };
        let q: Vec<Vec<f64>> = (0..n)
            .map(|i| lin(&v_s.data()[i * cs..(i + 1) * cs], &head.query_proj))
            .collect();
        let vals: Vec<Vec<f64>> = (0..n)
            .map(|i| lin(&v_s.data()[i * cs..(i + 1) * cs], &head.value_proj))
            .collect();
        for i in 0..n {
            let w: Vec<f64> = (0..n)
                .map(|j| {
                    (0..ct)
                        .map(|c| q[i][c] * v_t.data()[j * ct + c])
                        .sum::<f64>()
                })
                .collect();
            let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = w.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..ct {
                let expect: f64 = (0..n).map(|j| exps[j] / denom * vals[j][c]).sum();
                let got = g.value(recon).data()[i * ct + c];
                assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn loss_feat_zero_when_reconstruction_matches_teacher() {
        // N=1 and a value projection tuned so value_proj(v_s) = v_t.
        let (cs, ct) = (2, 3);
        let v_t = Tensor::from_vec(vec![1, 1, ct], vec![0.5, -1.25, 2.0]).unwrap();
        let mut value_w = Tensor::zeros(vec![cs, ct]);
        for j in 0..ct {
            value_w.data_mut()[j] = v_t.data()[j];
        }
        let head = head_with(rand_tensor(&[cs, ct], 1), value_w, cs, ct);
        let v_s = Tensor::from_vec(vec![1, 1, cs], vec![1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(v_s);
        let t = g.constant(v_t);
        let l = loss_feat(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn losses_are_nonnegative() {
        let (cs, ct, n) = (3, 4, 4);
        let head = QsdHead::init(cs, ct, 31);
        for seed in 0..20 {
            let v_s = rand_tensor(&[2, n, cs], seed);
            let v_t = rand_tensor(&[2, n, ct], seed + 100);
            let mut g = Graph::new();
            let hb = head.bind(&mut g, false);
            let s = g.constant(v_s);
            let t = g.constant(v_t);
            let l = loss_feat(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
            assert!(g.value(l).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn teacher_receives_exactly_zero_gradient() {
        let (cs, ct, n) = (3, 4, 3);
        let head = QsdHead::init(cs, ct, 41);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, true);
        let s = g.leaf(rand_tensor(&[1, n, cs], 42).requires_grad(true));
        let t = g.leaf(rand_tensor(&[1, n, ct], 43).requires_grad(true));
        let t_cls = g.leaf(rand_tensor(&[1, 1, ct], 44).requires_grad(true));
        let s_cls = g.leaf(rand_tensor(&[1, 1, cs], 45).requires_grad(true));
        let terms = loss_qsd(
            &mut g,
            &hb,
            &QsdConfig::default(),
            &StudentViews {
                cls: s_cls,
                tokens: s,
                masked_tokens: None,
            },
            &TeacherViews { cls: t_cls, tokens: t },
            &QsdWeights::default(),
        )
        .unwrap();
        g.backward(terms.total).unwrap();
        assert!(g.grad(t).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(t_cls).unwrap().data().iter().all(|&v| v == 0.0));
        // Student side does receive gradient.
        assert!(g.grad(s).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_cls_examples() {
        let (cs, ct) = (2, 3);
        let teacher_cls = Tensor::from_vec(vec![1, 1, ct], vec![0.4, -0.8, 1.2]).unwrap();
        let mut value_w = Tensor::zeros(vec![cs, ct]);
        for j in 0..ct {
            value_w.data_mut()[j] = teacher_cls.data()[j];
        }
        let mut head = QsdHead::init(cs, ct, 0);
        head.cls_value_proj.weight = value_w;
        let student_cls = Tensor::from_vec(vec![1, 1, cs], vec![1.0, 0.0]).unwrap();

        // Matching projection: zero loss.
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s_cls = g.constant(student_cls.clone());
        let t_cls = g.constant(teacher_cls.clone());
        let s_tok = g.constant(Tensor::zeros(vec![1, 1, cs]));
        let t_tok = g.constant(Tensor::zeros(vec![1, 1, ct]));
        let l = loss_cls(&mut g, &hb, &QsdConfig::default(), s_cls, t_cls, s_tok, t_tok).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        // Doubled teacher CLS: loss equals mean of (proj - 2 t)^2 by closed form.
        let doubled =
            Tensor::from_vec(vec![1, 1, ct], teacher_cls.data().iter().map(|v| 2.0 * v).collect())
                .unwrap();
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s_cls = g.constant(student_cls);
        let t_cls = g.constant(doubled.clone());
        let s_tok = g.constant(Tensor::zeros(vec![1, 1, cs]));
        let t_tok = g.constant(Tensor::zeros(vec![1, 1, ct]));
        let l = loss_cls(&mut g, &hb, &QsdConfig::default(), s_cls, t_cls, s_tok, t_tok).unwrap();
        let expect: f64 = (0..ct)
            .map(|j| {
                let d = teacher_cls.data()[j] - doubled.data()[j];
                d * d
            })
            .sum::<f64>()
            / ct as f64;
        assert!((g.value(l).item().unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn combined_loss_weight_selection() {
        let (cs, ct, n) = (3, 4, 3);
        let head = QsdHead::init(cs, ct, 51);
        let v_s = rand_tensor(&[1, n, cs], 52);
        let v_s_mask = rand_tensor(&[1, n, cs], 53);
        let v_t = rand_tensor(&[1, n, ct], 54);
        let s_cls = rand_tensor(&[1, 1, cs], 55);
        let t_cls = rand_tensor(&[1, 1, ct], 56);

        let eval = |weights: QsdWeights| -> (f64, f64, f64, f64) {
            let mut g = Graph::new();
            let hb = head.bind(&mut g, false);
            let s = g.constant(v_s.clone());
            let sm = g.constant(v_s_mask.clone());
            let t = g.constant(v_t.clone());
            let sc = g.constant(s_cls.clone());
            let tc = g.constant(t_cls.clone());
            let terms = loss_qsd(
                &mut g,
                &hb,
                &QsdConfig::default(),
                &StudentViews {
                    cls: sc,
                    tokens: s,
                    masked_tokens: Some(sm),
                },
                &TeacherViews { cls: tc, tokens: t },
                &weights,
            )
            .unwrap();
            (
                g.value(terms.feat).item().unwrap(),
                g.value(terms.mask).item().unwrap(),
                g.value(terms.cls).item().unwrap(),
                g.value(terms.total).item().unwrap(),
            )
        };

        let (_, _, _, zero) = eval(QsdWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        });
        assert_eq!(zero, 0.0);

        let (feat, _, _, only_feat) = eval(QsdWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        });
        assert_eq!(only_feat, feat);

        // Term-wise oracle: the default total equals the sum of the parts.
        let (f, m, c, total) = eval(QsdWeights::default());
        assert!((total - (f + m + c)).abs() <= 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let head = QsdHead::init(2, 3, 1);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(Tensor::zeros(vec![1, 2, 2]));
        let t = g.constant(Tensor::zeros(vec![1, 2, 3]));
        let sc = g.constant(Tensor::zeros(vec![1, 1, 2]));
        let tc = g.constant(Tensor::zeros(vec![1, 1, 3]));
        let res = loss_qsd(
            &mut g,
            &hb,
            &QsdConfig::default(),
            &StudentViews {
                cls: sc,
                tokens: s,
                masked_tokens: None,
            },
            &TeacherViews { cls: tc, tokens: t },
            &QsdWeights {
                alpha: -1.0,
                beta: 1.0,
                gamma: 1.0,
            },
        );
        assert!(matches!(res, Err(Error::Validation(_))));
    }

    #[test]
    fn empty_mask_makes_mask_loss_equal_feat_loss() {
        let (cs, ct, n) = (3, 4, 3);
        let head = QsdHead::init(cs, ct, 61);
        let mut g = Graph::new();
        let hb = head.bind(&mut g, false);
        let s = g.constant(rand_tensor(&[1, n, cs], 62));
        let t = g.constant(rand_tensor(&[1, n, ct], 63));
        let sc = g.constant(rand_tensor(&[1, 1, cs], 64));
        let tc = g.constant(rand_tensor(&[1, 1, ct], 65));
        let terms = loss_qsd(
            &mut g,
            &hb,
            &QsdConfig::default(),
            &StudentViews {
                cls: sc,
                tokens: s,
                masked_tokens: None,
            },
            &TeacherViews { cls: tc, tokens: t },
            &QsdWeights::default(),
        )
        .unwrap();
        assert_eq!(
            g.value(terms.feat).item().unwrap(),
            g.value(terms.mask).item().unwrap()
        );
    }

    #[test]
    fn permutation_equivariance() {
        let (cs, ct, n) = (3, 4, 5);
        let head = QsdHead::init(cs, ct, 71);
        let v_s = rand_tensor(&[1, n, cs], 72);
        let v_t = rand_tensor(&[1, n, ct], 73);
        let perm = [3usize, 0, 4, 1, 2];

        let permute_rows = |t: &Tensor, width: usize| {
            let mut data = vec![0.0; t.numel()];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * width..(dst + 1) * width]
                    .copy_from_slice(&t.data()[src * width..(src + 1) * width]);
            }
            Tensor::from_vec(t.shape().to_vec(), data).unwrap()
        };

        let run = |s_t: &Tensor, t_t: &Tensor| -> (Vec<f64>, f64) {
            let mut g = Graph::new();
            let hb = head.bind(&mut g, false);
            let s = g.constant(s_t.clone());
            let t = g.constant(t_t.clone());
            let recon = reconstruct(&mut g, &hb, &QsdConfig::default(), s, t).unwrap();
            let t_const = g.detach(t);
            let l = g.mse(recon, t_const).unwrap();
            (
                g.value(recon).data().to_vec(),
                g.value(l).item().unwrap(),
            )
        };

        let (base, base_loss) = run(&v_s, &v_t);
        let (permuted, permuted_loss) = run(&permute_rows(&v_s, cs), &permute_rows(&v_t, ct));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..ct {
                let a = permuted[dst * ct + c];
                let b = base[src * ct + c];
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
        assert!((base_loss - permuted_loss).abs() <= 1e-12);
    }
}
