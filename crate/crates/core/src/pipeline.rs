//! Training protocols: teacher pretraining, the multi-stage
//! distill-then-freeze schedule, the single-stage joint baseline, point-wise
//! feature distillation, and a supervised-only baseline. Every run produces
//! a full provenance record.
//!
//! Determinism: each stochastic stream (parameter init, data order per
//! stage, per-step masks) draws from its own derived seed, so enabling or
//! disabling one component never perturbs the others. A rerun with
//! identical inputs reproduces per-step losses bit-exactly.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::module_hash;
use crate::datagen::{generate_teacher_pool, Corpus, Sample, SplitManifest, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::eval::{miou, predict, ConfusionMatrix};
use crate::graph::{Graph, TensorRef};
use crate::models::{
    decode, encode, init_decoder, init_encoder, sample_mask, Decoder, Encoder, EncoderConfig,
    Linear, ParamModule,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::qsd::{loss_qsd, QsdConfig, QsdHead, QsdWeights, StudentViews, TeacherViews};
use crate::record::{Objective, RunFooter, RunHeader, RunRecord, StageSpec, StepLog};
use crate::seeding::derive_seed;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Task-agnostic distillation steps on the proxy split.
    pub stage1_steps: usize,
    /// Domain-agnostic distillation steps on the source split.
    pub stage2_steps: usize,
    /// Frozen-encoder task-learning steps.
    pub stage3_steps: usize,
    /// Steps for the single-stage joint baselines.
    pub joint_steps: usize,
    pub batch_size: usize,
    pub distill_lr: f64,
    pub distill_weight_decay: f64,
    pub encoder_task_lr: f64,
    pub decoder_task_lr: f64,
    /// Weight of the distillation term in the joint baselines. The task and
    /// distillation terms enter as an unweighted sum by default; 0 reduces a
    /// joint run to plain supervised training bit for bit.
    pub distill_weight: f64,
    pub mask_ratio: f64,
    pub qsd: QsdConfig,
    pub qsd_weights: QsdWeights,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            stage1_steps: 1000,
            stage2_steps: 1000,
            stage3_steps: 500,
            joint_steps: 2000,
            batch_size: 16,
            distill_lr: 5e-4,
            distill_weight_decay: 0.05,
            encoder_task_lr: 5e-4,
            decoder_task_lr: 1e-3,
            distill_weight: 1.0,
            mask_ratio: 0.4,
            qsd: QsdConfig::default(),
            qsd_weights: QsdWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Multi-stage QSD distillation followed by frozen-encoder task learning.
    Gkd,
    /// Multi-stage point-wise feature distillation, same schedule.
    PointwiseKd,
    /// Joint task + point-wise distillation, one stage.
    SingleStage,
    /// Joint task + QSD distillation, one stage.
    SingleStageQsd,
    /// Supervised task training only.
    NoDistill,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "gkd" => Ok(Method::Gkd),
            "pointwise_kd" => Ok(Method::PointwiseKd),
            "single_stage" => Ok(Method::SingleStage),
            "single_stage_qsd" => Ok(Method::SingleStageQsd),
            "no_distill" => Ok(Method::NoDistill),
            other => Err(Error::validation(format!(
                "unknown method {other}; expected gkd|single_stage|single_stage_qsd|pointwise_kd|no_distill"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Gkd => "gkd",
            Method::PointwiseKd => "pointwise_kd",
            Method::SingleStage => "single_stage",
            Method::SingleStageQsd => "single_stage_qsd",
            Method::NoDistill => "no_distill",
        }
    }
}

// ---------------------------------------------------------------------------
// Teacher features

/// Last-layer teacher features cached per sample id. The teacher is frozen
/// throughout distillation and always sees the full (unmasked) image, so its
/// features are a pure function of (teacher, sample).
pub struct TeacherFeatures {
    pub token_count: usize,
    pub dim: usize,
    map: BTreeMap<u64, (Vec<f64>, Vec<f64>)>,
}

impl TeacherFeatures {
    pub fn compute(teacher: &Encoder, samples: &[&Sample], batch_size: usize) -> Result<Self> {
        let n = teacher.config.num_patches();
        let dim = teacher.config.dim;
        let size = teacher.config.image_size;
        let mut map = BTreeMap::new();
        for chunk in samples.chunks(batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
            for s in chunk {
                data.extend_from_slice(s.image.data());
            }
            let images = Tensor::from_vec(vec![chunk.len(), 3, size, size], data)?;
            let mut g = Graph::new();
            let img = g.constant(images);
            let binding = teacher.bind(&mut g, false);
            let (cls, tokens) = encode(&mut g, &teacher.config, &binding, img, None)?;
            let cls_v = g.value(cls);
            let tok_v = g.value(tokens);
            for (i, s) in chunk.iter().enumerate() {
                map.insert(
                    s.id,
                    (
                        cls_v.data()[i * dim..(i + 1) * dim].to_vec(),
                        tok_v.data()[i * n * dim..(i + 1) * n * dim].to_vec(),
                    ),
                );
            }
        }
        Ok(TeacherFeatures {
            token_count: n,
            dim,
            map,
        })
    }

    /// Stacks cached features for a batch of sample ids into
    /// `([B,1,C], [B,N,C])` tensors.
    pub fn batch(&self, ids: &[u64]) -> Result<(Tensor, Tensor)> {
        let mut cls = Vec::with_capacity(ids.len() * self.dim);
        let mut tokens = Vec::with_capacity(ids.len() * self.token_count * self.dim);
        for id in ids {
            let (c, t) = self
                .map
                .get(id)
                .ok_or_else(|| Error::contract(format!("no teacher features for sample {id}")))?;
            cls.extend_from_slice(c);
            tokens.extend_from_slice(t);
        }
        Ok((
            Tensor::from_vec(vec![ids.len(), 1, self.dim], cls)?,
            Tensor::from_vec(vec![ids.len(), self.token_count, self.dim], tokens)?,
        ))
    }

    pub fn tokens_of(&self, id: u64) -> Option<Tensor> {
        self.map.get(&id).map(|(_, t)| {
            Tensor::from_vec(vec![1, self.token_count, self.dim], t.clone())
                .expect("cached features are well-formed")
        })
    }
}

// ---------------------------------------------------------------------------
// Batching helpers

struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(count: usize, seed: u64) -> Self {
        let mut sampler = BatchSampler {
            order: (0..count).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.shuffle();
        sampler
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos >= self.order.len() {
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let shape = samples[0].image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(vec![samples.len(), c, h, w], data)
}

fn flat_labels(samples: &[&Sample]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for s in samples {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract(format!("sample {} has no labels", s.id)))?;
        out.extend(labels.iter().map(|&l| l as u32));
    }
    Ok(out)
}

fn collect_grads(g: &Graph, refs: &[(String, TensorRef)]) -> Vec<Tensor> {
    refs.iter()
        .map(|(_, r)| g.grad(*r).expect("trainable leaf has gradient after backward"))
        .collect()
}

/// Pixel cross-entropy between `[B,K,H,W]` logits and flattened labels.
fn pixel_cross_entropy(
    g: &mut Graph,
    logits: TensorRef,
    labels: &[u32],
) -> Result<TensorRef> {
    let shape = g.value(logits).shape().to_vec();
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let moved = g.permute(logits, &[0, 2, 3, 1])?;
    let flat = g.reshape(moved, vec![b * h * w, k])?;
    g.cross_entropy(flat, labels, IGNORE_INDEX as u32)
}

fn finite_or_diverged(value: f64, stage: &str, step: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::numeric(format!(
            "loss diverged to {value} at {stage} step {step}"
        )));
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Teacher pretraining

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Labeled pool samples per style (proxy styles plus the source style).
    pub pool_per_style: usize,
    /// Held-out pool samples for the recorded validation mIoU.
    pub val_count: usize,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            steps: 700,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            pool_per_style: 96,
            val_count: 64,
            seed: 1234,
        }
    }
}

pub struct TeacherBundle {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub val_miou: f64,
}

/// Trains the teacher encoder plus an auxiliary decoder with task
/// supervision on a labeled pool spanning every proxy style and the source
/// style. The encoder is frozen forever after; the auxiliary decoder is kept
/// only for evaluation.
pub fn pretrain_teacher(
    manifest: &SplitManifest,
    teacher_cfg: &EncoderConfig,
    train: &TeacherTrainConfig,
) -> Result<(TeacherBundle, RunRecord)> {
    let pool = generate_teacher_pool(manifest, train.pool_per_style)?;
    if pool.len() <= train.val_count {
        return Err(Error::validation(format!(
            "teacher pool of {} cannot hold out {} validation samples",
            pool.len(),
            train.val_count
        )));
    }
    let (train_pool, val_pool) = pool.split_at(pool.len() - train.val_count);
    let train_refs: Vec<&Sample> = train_pool.iter().collect();

    let mut encoder = init_encoder(teacher_cfg, derive_seed(train.seed, "teacher-encoder", 0))?;
    let mut decoder = init_decoder(
        teacher_cfg.dim,
        manifest.classes,
        teacher_cfg.grid(),
        teacher_cfg.image_size,
        derive_seed(train.seed, "teacher-decoder", 0),
    );

    let mut enc_opt = AdamW::for_params(
        AdamWConfig::new(train.lr, train.weight_decay),
        &encoder.named_params(),
    );
    let mut dec_opt = AdamW::for_params(
        AdamWConfig::new(train.lr, train.weight_decay),
        &decoder.named_params(),
    );

    let stage = StageSpec {
        name: "teacher-pretrain".into(),
        objective: Objective::SupervisedTask,
        split: "teacher-pool".into(),
        steps: train.steps,
        batch_size: train.batch_size,
        lrs: BTreeMap::from([
            ("teacher_encoder".into(), train.lr),
            ("teacher_decoder".into(), train.lr),
        ]),
        trainable: vec!["teacher_encoder".into(), "teacher_decoder".into()],
    };
    let mut record = RunRecord::new(RunHeader {
        method: "teacher".into(),
        seed: train.seed,
        label_fraction: 1.0,
        stages: vec![stage],
        config: serde_json::to_value(train).unwrap_or(serde_json::Value::Null),
    });

    let started = Instant::now();
    let mut sampler = BatchSampler::new(train_refs.len(), derive_seed(train.seed, "data", 0));
    for step in 0..train.steps {
        let idx = sampler.next_batch(train.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| train_refs[i]).collect();
        let images = stack_images(&batch)?;
        let labels = flat_labels(&batch)?;

        let mut g = Graph::new();
        let img = g.constant(images);
        let enc_b = encoder.bind(&mut g, true);
        let (_, tokens) = encode(&mut g, &encoder.config, &enc_b, img, None)?;
        let dec_b = decoder.bind(&mut g, true);
        let logits = decode(&mut g, &decoder, &dec_b, tokens)?;
        let loss = pixel_cross_entropy(&mut g, logits, &labels)?;
        let loss_v = finite_or_diverged(g.value(loss).item()?, "teacher-pretrain", step)?;
        g.backward(loss)?;

        let enc_grads = collect_grads(&g, &enc_b.refs);
        let dec_grads = collect_grads(&g, &dec_b.refs);
        enc_opt.step(&mut encoder.named_params_mut(), &enc_grads)?;
        dec_opt.step(&mut decoder.named_params_mut(), &dec_grads)?;

        record.log_step(StepLog {
            stage: "teacher-pretrain".into(),
            step,
            losses: BTreeMap::from([("task".into(), loss_v)]),
            samples: batch.iter().map(|s| s.id).collect(),
        });
    }

    let val_refs: Vec<&Sample> = val_pool.iter().collect();
    let preds = predict(&encoder, &decoder, &val_refs, train.batch_size)?;
    let mut cm = ConfusionMatrix::new(manifest.classes);
    for (pred, sample) in preds.iter().zip(val_refs.iter()) {
        cm.update(pred, sample.labels.as_ref().unwrap(), IGNORE_INDEX)?;
    }
    let val_miou = miou(&cm)?;

    record.footer = RunFooter {
        checkpoint_hashes: BTreeMap::from([
            ("final/teacher_encoder".into(), module_hash(&encoder)),
            ("final/teacher_decoder".into(), module_hash(&decoder)),
        ]),
        stage_wall_secs: BTreeMap::from([(
            "teacher-pretrain".into(),
            started.elapsed().as_secs_f64(),
        )]),
    };

    Ok((
        TeacherBundle {
            encoder,
            decoder,
            val_miou,
        },
        record,
    ))
}

// ---------------------------------------------------------------------------
// Shared run plumbing

pub struct RunInputs<'a> {
    pub corpus: &'a Corpus,
    pub teacher: &'a Encoder,
    pub teacher_feats: &'a TeacherFeatures,
    pub student_cfg: &'a EncoderConfig,
    pub protocol: &'a ProtocolConfig,
    pub label_fraction: f64,
    pub seed: u64,
    /// Echoed verbatim into the run header.
    pub config_echo: serde_json::Value,
}

pub struct RunArtifacts {
    pub method: Method,
    pub student: Encoder,
    pub decoder: Decoder,
    pub qsd_head: Option<QsdHead>,
    pub adapter: Option<Linear>,
    pub record: RunRecord,
    /// Student snapshots at stage boundaries, in stage order.
    pub stage_students: Vec<(String, Encoder)>,
}

enum Distiller<'a> {
    Qsd(&'a mut QsdHead),
    Pointwise(&'a mut Linear),
}

/// One distillation stage over unlabeled-or-label-ignored data. Only the
/// student encoder and the distillation module receive updates.
#[allow(clippy::too_many_arguments)]
fn distill_stage(
    stage_name: &str,
    stage_index: u64,
    require_unlabeled: bool,
    student: &mut Encoder,
    distiller: &mut Distiller,
    samples: &[&Sample],
    teacher_feats: &TeacherFeatures,
    protocol: &ProtocolConfig,
    steps: usize,
    seed: u64,
    enc_opt: &mut AdamW,
    dist_opt: &mut AdamW,
    record: &mut RunRecord,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::validation(format!("{stage_name}: empty split")));
    }
    if require_unlabeled {
        if let Some(s) = samples.iter().find(|s| s.labels.is_some()) {
            return Err(Error::contract(format!(
                "{stage_name} is task-agnostic but sample {} carries labels",
                s.id
            )));
        }
    }
    let n_tokens = student.config.num_patches();
    let mut sampler = BatchSampler::new(samples.len(), derive_seed(seed, "data", stage_index));
    for step in 0..steps {
        let idx = sampler.next_batch(protocol.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| samples[i]).collect();
        let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
        let images = stack_images(&batch)?;
        let (t_cls, t_tokens) = teacher_feats.batch(&ids)?;

        let mut g = Graph::new();
        let img = g.constant(images);
        let enc_b = student.bind(&mut g, true);
        let (s_cls, s_tokens) = encode(&mut g, &student.config, &enc_b, img, None)?;
        let tc = g.constant(t_cls);
        let tt = g.constant(t_tokens);

        let mut losses = BTreeMap::new();
        let (total, dist_refs) = match distiller {
            Distiller::Qsd(head) => {
                let mask = sample_mask(
                    n_tokens,
                    protocol.mask_ratio,
                    derive_seed(seed, "mask", stage_index * 1_000_000 + step as u64),
                )?;
                let (_, s_masked) = encode(&mut g, &student.config, &enc_b, img, Some(&mask))?;
                let head_b = head.bind(&mut g, true);
                let terms = loss_qsd(
                    &mut g,
                    &head_b,
                    &protocol.qsd,
                    &StudentViews {
                        cls: s_cls,
                        tokens: s_tokens,
                        masked_tokens: Some(s_masked),
                    },
                    &TeacherViews { cls: tc, tokens: tt },
                    &protocol.qsd_weights,
                )?;
                losses.insert("feat".into(), g.value(terms.feat).item()?);
                losses.insert("mask".into(), g.value(terms.mask).item()?);
                losses.insert("cls".into(), g.value(terms.cls).item()?);
                (terms.total, head_b.refs)
            }
            Distiller::Pointwise(adapter) => {
                let w = g.leaf(adapter.weight.clone().requires_grad(true));
                let b = g.leaf(adapter.bias.clone().requires_grad(true));
                let proj = g.affine(s_tokens, w, b)?;
                let tt_const = g.detach(tt);
                let loss = g.mse(proj, tt_const)?;
                (
                    loss,
                    vec![("weight".to_string(), w), ("bias".to_string(), b)],
                )
            }
        };
        let total_v = finite_or_diverged(g.value(total).item()?, stage_name, step)?;
        losses.insert("distill".into(), total_v);
        g.backward(total)?;

        let enc_grads = collect_grads(&g, &enc_b.refs);
        let dist_grads = collect_grads(&g, &dist_refs);
        enc_opt.step(&mut student.named_params_mut(), &enc_grads)?;
        match distiller {
            Distiller::Qsd(head) => dist_opt.step(&mut head.named_params_mut(), &dist_grads)?,
            Distiller::Pointwise(adapter) => {
                dist_opt.step(&mut adapter.named_params_mut(), &dist_grads)?
            }
        }

        record.log_step(StepLog {
            stage: stage_name.into(),
            step,
            losses,
            samples: ids,
        });
    }
    Ok(())
}

/// Frozen-encoder task learning: the student is never bound into a graph,
/// its features are computed once, and only the decoder trains.
fn probe_stage(
    stage_name: &str,
    student: &Encoder,
    decoder: &mut Decoder,
    samples: &[&Sample],
    protocol: &ProtocolConfig,
    steps: usize,
    seed: u64,
    record: &mut RunRecord,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::validation(format!("{stage_name}: no labeled samples")));
    }
    let n = student.config.num_patches();
    let dim = student.config.dim;

    // Frozen features, computed once per labeled sample.
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(protocol.batch_size.max(1)) {
        let images = stack_images(chunk)?;
        let mut g = Graph::new();
        let img = g.constant(images);
        let enc_b = student.bind(&mut g, false);
        let (_, tokens) = encode(&mut g, &student.config, &enc_b, img, None)?;
        let v = g.value(tokens);
        for i in 0..chunk.len() {
            features.push(v.data()[i * n * dim..(i + 1) * n * dim].to_vec());
        }
    }

    let mut dec_opt = AdamW::for_params(
        AdamWConfig::new(protocol.decoder_task_lr, 0.0),
        &decoder.named_params(),
    );
    let mut sampler = BatchSampler::new(samples.len(), derive_seed(seed, "data", 2));
    for step in 0..steps {
        let idx = sampler.next_batch(protocol.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| samples[i]).collect();
        let labels = flat_labels(&batch)?;
        let mut data = Vec::with_capacity(idx.len() * n * dim);
        for &i in &idx {
            data.extend_from_slice(&features[i]);
        }
        let tokens = Tensor::from_vec(vec![idx.len(), n, dim], data)?;

        let mut g = Graph::new();
        let tok = g.constant(tokens);
        let dec_b = decoder.bind(&mut g, true);
        let logits = decode(&mut g, decoder, &dec_b, tok)?;
        let loss = pixel_cross_entropy(&mut g, logits, &labels)?;
        let loss_v = finite_or_diverged(g.value(loss).item()?, stage_name, step)?;
        g.backward(loss)?;
        let dec_grads = collect_grads(&g, &dec_b.refs);
        dec_opt.step(&mut decoder.named_params_mut(), &dec_grads)?;

        record.log_step(StepLog {
            stage: stage_name.into(),
            step,
            losses: BTreeMap::from([("task".into(), loss_v)]),
            samples: batch.iter().map(|s| s.id).collect(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum JointDistill {
    None,
    Pointwise,
    Qsd,
}

/// Single-stage joint optimization of task loss plus an optional
/// distillation term on labeled source data.
#[allow(clippy::too_many_arguments)]
fn joint_stage(
    stage_name: &str,
    student: &mut Encoder,
    decoder: &mut Decoder,
    adapter: &mut Option<Linear>,
    head: &mut Option<QsdHead>,
    kind: JointDistill,
    samples: &[&Sample],
    teacher_feats: &TeacherFeatures,
    protocol: &ProtocolConfig,
    steps: usize,
    seed: u64,
    record: &mut RunRecord,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::validation(format!("{stage_name}: no labeled samples")));
    }
    let n_tokens = student.config.num_patches();
    let mut enc_opt = AdamW::for_params(
        AdamWConfig::new(protocol.encoder_task_lr, 0.0),
        &student.named_params(),
    );
    let mut dec_opt = AdamW::for_params(
        AdamWConfig::new(protocol.decoder_task_lr, 0.0),
        &decoder.named_params(),
    );
    let mut dist_opt = match kind {
        JointDistill::None => None,
        JointDistill::Pointwise => Some(AdamW::for_params(
            AdamWConfig::new(protocol.distill_lr, protocol.distill_weight_decay),
            &adapter.as_ref().expect("adapter present").named_params(),
        )),
        JointDistill::Qsd => Some(AdamW::for_params(
            AdamWConfig::new(protocol.distill_lr, protocol.distill_weight_decay),
            &head.as_ref().expect("head present").named_params(),
        )),
    };

    let mut sampler = BatchSampler::new(samples.len(), derive_seed(seed, "data", 0));
    for step in 0..steps {
        let idx = sampler.next_batch(protocol.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| samples[i]).collect();
        let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
        let images = stack_images(&batch)?;
        let labels = flat_labels(&batch)?;

        let mut g = Graph::new();
        let img = g.constant(images);
        let enc_b = student.bind(&mut g, true);
        let (s_cls, s_tokens) = encode(&mut g, &student.config, &enc_b, img, None)?;
        let dec_b = decoder.bind(&mut g, true);
        let logits = decode(&mut g, decoder, &dec_b, s_tokens)?;
        let task = pixel_cross_entropy(&mut g, logits, &labels)?;

        let mut losses = BTreeMap::new();
        let task_v = finite_or_diverged(g.value(task).item()?, stage_name, step)?;
        losses.insert("task".into(), task_v);

        let (total, dist_refs) = match kind {
            JointDistill::None => (task, Vec::new()),
            JointDistill::Pointwise => {
                let (_, t_tokens) = teacher_feats.batch(&ids)?;
                let tt = g.constant(t_tokens);
                let adapter_ref = adapter.as_ref().expect("adapter present");
                let w = g.leaf(adapter_ref.weight.clone().requires_grad(true));
                let b = g.leaf(adapter_ref.bias.clone().requires_grad(true));
                let proj = g.affine(s_tokens, w, b)?;
                let tt_const = g.detach(tt);
                let dist = g.mse(proj, tt_const)?;
                losses.insert("distill".into(), g.value(dist).item()?);
                let weighted = g.scale(dist, protocol.distill_weight)?;
                let total = g.add(task, weighted)?;
                (total, vec![("weight".to_string(), w), ("bias".to_string(), b)])
            }
            JointDistill::Qsd => {
                let (t_cls, t_tokens) = teacher_feats.batch(&ids)?;
                let tc = g.constant(t_cls);
                let tt = g.constant(t_tokens);
                let mask = sample_mask(
                    n_tokens,
                    protocol.mask_ratio,
                    derive_seed(seed, "mask", step as u64),
                )?;
                let (_, s_masked) = encode(&mut g, &student.config, &enc_b, img, Some(&mask))?;
                let head_b = head.as_ref().expect("head present").bind(&mut g, true);
                let terms = loss_qsd(
                    &mut g,
                    &head_b,
                    &protocol.qsd,
                    &StudentViews {
                        cls: s_cls,
                        tokens: s_tokens,
                        masked_tokens: Some(s_masked),
                    },
                    &TeacherViews { cls: tc, tokens: tt },
                    &protocol.qsd_weights,
                )?;
                losses.insert("distill".into(), g.value(terms.total).item()?);
                let weighted = g.scale(terms.total, protocol.distill_weight)?;
                let total = g.add(task, weighted)?;
                (total, head_b.refs)
            }
        };
        let total_v = finite_or_diverged(g.value(total).item()?, stage_name, step)?;
        losses.insert("total".into(), total_v);
        g.backward(total)?;

        let enc_grads = collect_grads(&g, &enc_b.refs);
        let dec_grads = collect_grads(&g, &dec_b.refs);
        enc_opt.step(&mut student.named_params_mut(), &enc_grads)?;
        dec_opt.step(&mut decoder.named_params_mut(), &dec_grads)?;
        if !dist_refs.is_empty() {
            let dist_grads = collect_grads(&g, &dist_refs);
            match kind {
                JointDistill::Pointwise => dist_opt
                    .as_mut()
                    .unwrap()
                    .step(&mut adapter.as_mut().unwrap().named_params_mut(), &dist_grads)?,
                JointDistill::Qsd => dist_opt
                    .as_mut()
                    .unwrap()
                    .step(&mut head.as_mut().unwrap().named_params_mut(), &dist_grads)?,
                JointDistill::None => unreachable!(),
            }
        }

        record.log_step(StepLog {
            stage: stage_name.into(),
            step,
            losses,
            samples: ids,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Full protocols

fn stage_spec(
    name: &str,
    objective: Objective,
    split: &str,
    steps: usize,
    protocol: &ProtocolConfig,
    lrs: &[(&str, f64)],
) -> StageSpec {
    StageSpec {
        name: name.into(),
        objective,
        split: split.into(),
        steps,
        batch_size: protocol.batch_size,
        lrs: lrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        trainable: lrs.iter().map(|(k, _)| k.to_string()).collect(),
    }
}

/// Executes the selected protocol end to end and returns trained modules
/// plus the run record.
pub fn run_method(method: Method, inputs: &RunInputs) -> Result<RunArtifacts> {
    let p = inputs.protocol;
    let corpus = inputs.corpus;
    let seed = inputs.seed;
    let teacher_hash = module_hash(inputs.teacher);

    let mut student = init_encoder(inputs.student_cfg, derive_seed(seed, "student", 0))?;
    let mut decoder = init_decoder(
        inputs.student_cfg.dim,
        corpus.manifest.classes,
        inputs.student_cfg.grid(),
        inputs.student_cfg.image_size,
        derive_seed(seed, "decoder", 0),
    );
    let teacher_dim = inputs.teacher.config.dim;

    let labeled_positions = corpus.labeled_source_positions(inputs.label_fraction)?;
    let labeled: Vec<&Sample> = labeled_positions.iter().map(|&i| &corpus.source[i]).collect();
    let proxy: Vec<&Sample> = corpus.proxy.iter().collect();
    let source_all: Vec<&Sample> = corpus.source.iter().collect();

    let stages = match method {
        Method::Gkd => vec![
            stage_spec(
                "distill-proxy",
                Objective::QsdDistill,
                "proxy",
                p.stage1_steps,
                p,
                &[("student", p.distill_lr), ("qsd_head", p.distill_lr)],
            ),
            stage_spec(
                "distill-source",
                Objective::QsdDistill,
                "source",
                p.stage2_steps,
                p,
                &[("student", p.distill_lr), ("qsd_head", p.distill_lr)],
            ),
            stage_spec(
                "task-probe",
                Objective::SupervisedTask,
                "source-labeled",
                p.stage3_steps,
                p,
                &[("decoder", p.decoder_task_lr)],
            ),
        ],
        Method::PointwiseKd => vec![
            stage_spec(
                "distill-proxy",
                Objective::PointwiseDistill,
                "proxy",
                p.stage1_steps,
                p,
                &[("student", p.distill_lr), ("adapter", p.distill_lr)],
            ),
            stage_spec(
                "distill-source",
                Objective::PointwiseDistill,
                "source",
                p.stage2_steps,
                p,
                &[("student", p.distill_lr), ("adapter", p.distill_lr)],
            ),
            stage_spec(
                "task-probe",
                Objective::SupervisedTask,
                "source-labeled",
                p.stage3_steps,
                p,
                &[("decoder", p.decoder_task_lr)],
            ),
        ],
        Method::SingleStage => vec![stage_spec(
            "joint",
            Objective::JointTaskPointwise,
            "source-labeled",
            p.joint_steps,
            p,
            &[
                ("student", p.encoder_task_lr),
                ("decoder", p.decoder_task_lr),
                ("adapter", p.distill_lr),
            ],
        )],
        Method::SingleStageQsd => vec![stage_spec(
            "joint",
            Objective::JointTaskQsd,
            "source-labeled",
            p.joint_steps,
            p,
            &[
                ("student", p.encoder_task_lr),
                ("decoder", p.decoder_task_lr),
                ("qsd_head", p.distill_lr),
            ],
        )],
        Method::NoDistill => vec![stage_spec(
            "joint",
            Objective::SupervisedTask,
            "source-labeled",
            p.joint_steps,
            p,
            &[
                ("student", p.encoder_task_lr),
                ("decoder", p.decoder_task_lr),
            ],
        )],
    };

    let mut record = RunRecord::new(RunHeader {
        method: method.name().into(),
        seed,
        label_fraction: inputs.label_fraction,
        stages,
        config: inputs.config_echo.clone(),
    });
    let mut hashes = BTreeMap::new();
    let mut walls = BTreeMap::new();
    hashes.insert("teacher-start/encoder".into(), teacher_hash.clone());
    hashes.insert("init/student".into(), module_hash(&student));
    hashes.insert("init/decoder".into(), module_hash(&decoder));

    let mut qsd_head = None;
    let mut adapter = None;
    let mut stage_students = Vec::new();

    match method {
        Method::Gkd | Method::PointwiseKd => {
            if method == Method::Gkd {
                let head = QsdHead::init(
                    inputs.student_cfg.dim,
                    teacher_dim,
                    derive_seed(seed, "qsd-head", 0),
                );
                hashes.insert("init/qsd_head".into(), module_hash(&head));
                qsd_head = Some(head);
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "adapter", 0));
                let a = Linear::init(&mut rng, inputs.student_cfg.dim, teacher_dim);
                hashes.insert("init/adapter".into(), module_hash(&a));
                adapter = Some(a);
            }

            let mut enc_opt = AdamW::for_params(
                AdamWConfig::new(p.distill_lr, p.distill_weight_decay),
                &student.named_params(),
            );
            {
                let mut distiller = match (&mut qsd_head, &mut adapter) {
                    (Some(h), _) => Distiller::Qsd(h),
                    (_, Some(a)) => Distiller::Pointwise(a),
                    _ => unreachable!(),
                };
                let mut dist_opt = match &distiller {
                    Distiller::Qsd(h) => AdamW::for_params(
                        AdamWConfig::new(p.distill_lr, p.distill_weight_decay),
                        &h.named_params(),
                    ),
                    Distiller::Pointwise(a) => AdamW::for_params(
                        AdamWConfig::new(p.distill_lr, p.distill_weight_decay),
                        &a.named_params(),
                    ),
                };

                let t0 = Instant::now();
                distill_stage(
                    "distill-proxy",
                    0,
                    true,
                    &mut student,
                    &mut distiller,
                    &proxy,
                    inputs.teacher_feats,
                    p,
                    p.stage1_steps,
                    seed,
                    &mut enc_opt,
                    &mut dist_opt,
                    &mut record,
                )?;
                walls.insert("distill-proxy".into(), t0.elapsed().as_secs_f64());
                hashes.insert("stage1-end/student".into(), module_hash(&student));
                hashes.insert("stage1-end/decoder".into(), module_hash(&decoder));
                stage_students.push(("distill-proxy".to_string(), student.clone()));

                let t1 = Instant::now();
                distill_stage(
                    "distill-source",
                    1,
                    false,
                    &mut student,
                    &mut distiller,
                    &source_all,
                    inputs.teacher_feats,
                    p,
                    p.stage2_steps,
                    seed,
                    &mut enc_opt,
                    &mut dist_opt,
                    &mut record,
                )?;
                walls.insert("distill-source".into(), t1.elapsed().as_secs_f64());
                hashes.insert("stage2-end/student".into(), module_hash(&student));
                hashes.insert("stage2-end/decoder".into(), module_hash(&decoder));
                stage_students.push(("distill-source".to_string(), student.clone()));
            }
            if let Some(h) = &qsd_head {
                hashes.insert("stage2-end/qsd_head".into(), module_hash(h));
            }
            if let Some(a) = &adapter {
                hashes.insert("stage2-end/adapter".into(), module_hash(a));
            }

            let t2 = Instant::now();
            probe_stage(
                "task-probe",
                &student,
                &mut decoder,
                &labeled,
                p,
                p.stage3_steps,
                seed,
                &mut record,
            )?;
            walls.insert("task-probe".into(), t2.elapsed().as_secs_f64());
            hashes.insert("stage3-end/student".into(), module_hash(&student));
            hashes.insert("stage3-end/decoder".into(), module_hash(&decoder));
            stage_students.push(("task-probe".to_string(), student.clone()));
            if let Some(h) = &qsd_head {
                hashes.insert("stage3-end/qsd_head".into(), module_hash(h));
            }
            if let Some(a) = &adapter {
                hashes.insert("stage3-end/adapter".into(), module_hash(a));
            }
        }
        Method::SingleStage | Method::SingleStageQsd | Method::NoDistill => {
            let kind = match method {
                Method::SingleStage => JointDistill::Pointwise,
                Method::SingleStageQsd => JointDistill::Qsd,
                _ => JointDistill::None,
            };
            if kind == JointDistill::Pointwise {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "adapter", 0));
                adapter = Some(Linear::init(&mut rng, inputs.student_cfg.dim, teacher_dim));
                hashes.insert("init/adapter".into(), module_hash(adapter.as_ref().unwrap()));
            }
            if kind == JointDistill::Qsd {
                qsd_head = Some(QsdHead::init(
                    inputs.student_cfg.dim,
                    teacher_dim,
                    derive_seed(seed, "qsd-head", 0),
                ));
                hashes.insert("init/qsd_head".into(), module_hash(qsd_head.as_ref().unwrap()));
            }
            let t0 = Instant::now();
            joint_stage(
                "joint",
                &mut student,
                &mut decoder,
                &mut adapter,
                &mut qsd_head,
                kind,
                &labeled,
                inputs.teacher_feats,
                p,
                p.joint_steps,
                seed,
                &mut record,
            )?;
            walls.insert("joint".into(), t0.elapsed().as_secs_f64());
            hashes.insert("joint-end/student".into(), module_hash(&student));
            hashes.insert("joint-end/decoder".into(), module_hash(&decoder));
            stage_students.push(("joint".to_string(), student.clone()));
        }
    }

    hashes.insert("teacher-end/encoder".into(), module_hash(inputs.teacher));
    record.footer = RunFooter {
        checkpoint_hashes: hashes,
        stage_wall_secs: walls,
    };

    Ok(RunArtifacts {
        method,
        student,
        decoder,
        qsd_head,
        adapter,
        record,
        stage_students,
    })
}

/// Trains a fresh frozen-encoder probe at the given label fraction. With the
/// same seed this reproduces the task stage of the multi-stage protocols
/// bit-exactly, which lets label-fraction sweeps share the (label-free)
/// distillation stages.
pub fn train_probe(
    student: &Encoder,
    corpus: &Corpus,
    protocol: &ProtocolConfig,
    label_fraction: f64,
    seed: u64,
) -> Result<(Decoder, Vec<StepLog>)> {
    let labeled_positions = corpus.labeled_source_positions(label_fraction)?;
    let labeled: Vec<&Sample> = labeled_positions.iter().map(|&i| &corpus.source[i]).collect();
    let mut decoder = init_decoder(
        student.config.dim,
        corpus.manifest.classes,
        student.config.grid(),
        student.config.image_size,
        derive_seed(seed, "decoder", 0),
    );
    let mut record = RunRecord::new(RunHeader {
        method: "probe".into(),
        seed,
        label_fraction,
        stages: vec![],
        config: serde_json::Value::Null,
    });
    probe_stage(
        "task-probe",
        student,
        &mut decoder,
        &labeled,
        protocol,
        protocol.stage3_steps,
        seed,
        &mut record,
    )?;
    Ok((decoder, record.steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_styles, generate_corpus};

    fn tiny_manifest() -> SplitManifest {
        SplitManifest {
            corpus_seed: 5,
            image_size: 16,
            classes: 5,
            proxy_count: 12,
            source_count: 8,
            target_count: 4,
            label_fraction: 1.0,
            styles: default_styles(),
        }
    }

    fn tiny_encoder_cfg(dim: usize, depth: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 8,
            depth,
            dim,
            heads: 2,
            mlp_ratio: 2.0,
        }
    }

    fn tiny_protocol() -> ProtocolConfig {
        ProtocolConfig {
            stage1_steps: 4,
            stage2_steps: 4,
            stage3_steps: 4,
            joint_steps: 6,
            batch_size: 4,
            ..ProtocolConfig::default()
        }
    }

    fn setup() -> (Corpus, Encoder, TeacherFeatures) {
        let manifest = tiny_manifest();
        let corpus = generate_corpus(&manifest).unwrap();
        let teacher = init_encoder(&tiny_encoder_cfg(12, 2), 77).unwrap();
        let all: Vec<&Sample> = corpus.proxy.iter().chain(corpus.source.iter()).collect();
        let feats = TeacherFeatures::compute(&teacher, &all, 8).unwrap();
        (corpus, teacher, feats)
    }

    fn inputs<'a>(
        corpus: &'a Corpus,
        teacher: &'a Encoder,
        feats: &'a TeacherFeatures,
        student_cfg: &'a EncoderConfig,
        protocol: &'a ProtocolConfig,
        seed: u64,
    ) -> RunInputs<'a> {
        RunInputs {
            corpus,
            teacher,
            teacher_feats: feats,
            student_cfg,
            protocol,
            label_fraction: 1.0,
            seed,
            config_echo: serde_json::Value::Null,
        }
    }

    #[test]
    fn gkd_run_respects_stage_contracts() {
        let (corpus, teacher, feats) = setup();
        let student_cfg = tiny_encoder_cfg(8, 1);
        let protocol = tiny_protocol();
        let run = run_method(
            Method::Gkd,
            &inputs(&corpus, &teacher, &feats, &student_cfg, &protocol, 3),
        )
        .unwrap();
        let h = &run.record.footer.checkpoint_hashes;
        // Decoder untouched through both distillation stages.
        assert_eq!(h["init/decoder"], h["stage1-end/decoder"]);
        assert_eq!(h["init/decoder"], h["stage2-end/decoder"]);
        assert_ne!(h["stage2-end/decoder"], h["stage3-end/decoder"]);
        // Encoder frozen through the task stage.
        assert_eq!(h["stage2-end/student"], h["stage3-end/student"]);
        // Encoder actually trained during distillation.
        assert_ne!(h["init/student"], h["stage1-end/student"]);
        // Teacher constant.
        assert_eq!(h["teacher-start/encoder"], h["teacher-end/encoder"]);
        assert_eq!(h["teacher-end/encoder"], module_hash(&teacher));
        // QSD head trained and frozen in stage 3.
        assert_eq!(h["stage2-end/qsd_head"], h["stage3-end/qsd_head"]);
    }

    #[test]
    fn target_split_never_enters_training_traces() {
        let (corpus, teacher, feats) = setup();
        let student_cfg = tiny_encoder_cfg(8, 1);
        let protocol = tiny_protocol();
        for method in [Method::Gkd, Method::SingleStage, Method::NoDistill] {
            let run = run_method(
                method,
                &inputs(&corpus, &teacher, &feats, &student_cfg, &protocol, 4),
            )
            .unwrap();
            let target_ids: Vec<u64> = corpus.targets.iter().map(|s| s.id).collect();
            for id in run.record.trace_ids() {
                assert!(!target_ids.contains(&id), "target id {id} in trace");
            }
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let (corpus, teacher, feats) = setup();
        let student_cfg = tiny_encoder_cfg(8, 1);
        let protocol = tiny_protocol();
        let a = run_method(
            Method::Gkd,
            &inputs(&corpus, &teacher, &feats, &student_cfg, &protocol, 9),
        )
        .unwrap();
        let b = run_method(
            Method::Gkd,
            &inputs(&corpus, &teacher, &feats, &student_cfg, &protocol, 9),
        )
        .unwrap();
        assert_eq!(a.record.steps.len(), b.record.steps.len());
        for (sa, sb) in a.record.steps.iter().zip(b.record.steps.iter()) {
            assert_eq!(sa.samples, sb.samples);
            for (k, v) in &sa.losses {
                assert_eq!(v.to_bits(), sb.losses[k].to_bits(), "loss {k} differs");
            }
        }
        assert_eq!(a.student, b.student);
        assert_eq!(
            a.record.footer.checkpoint_hashes,
            b.record.footer.checkpoint_hashes
        );
    }

    #[test]
    fn stage1_rejects_labeled_data() {
        let (corpus, teacher, feats) = setup();
        let student_cfg = tiny_encoder_cfg(8, 1);
        let protocol = tiny_protocol();
        let mut student = init_encoder(&student_cfg, 1).unwrap();
        let mut head = QsdHead::init(8, 12, 2);
        let mut enc_opt = AdamW::for_params(
            AdamWConfig::new(protocol.distill_lr, protocol.distill_weight_decay),
            &student.named_params(),
        );
        let mut dist_opt = AdamW::for_params(
            AdamWConfig::new(protocol.distill_lr, protocol.distill_weight_decay),
            &head.named_params(),
        );
        let mut record = RunRecord::new(RunHeader {
            method: "test".into(),
            seed: 0,
            label_fraction: 1.0,
            stages: vec![],
            config: serde_json::Value::Null,
        });
        let labeled: Vec<&Sample> = corpus.source.iter().collect();
        let mut distiller = Distiller::Qsd(&mut head);
        let err = distill_stage(
            "distill-proxy",
            0,
            true,
            &mut student,
            &mut distiller,
            &labeled,
            &feats,
            &protocol,
            1,
            0,
            &mut enc_opt,
            &mut dist_opt,
            &mut record,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_distill_weight_reduces_joint_run_to_supervised_training() {
        // Silencing the distillation term must reproduce plain supervised
        // training bit for bit: every stochastic stream draws from its own
        // seed, and a zero-weighted term contributes exact-zero gradients.
        let (corpus, teacher, feats) = setup();
        let student_cfg = tiny_encoder_cfg(8, 1);
        let protocol = tiny_protocol();
        let nd = run_method(
            Method::NoDistill,
            &inputs(&corpus, &teacher, &feats, &student_cfg, &protocol, 11),
        )
        .unwrap();

        let mut silenced = protocol.clone();
        silenced.distill_weight = 0.0;
        let ss = run_method(
            Method::SingleStage,
            &inputs(&corpus, &teacher, &feats, &student_cfg, &silenced, 11),
        )
        .unwrap();
        assert_eq!(nd.record.steps.len(), ss.record.steps.len());
        for (a, b) in nd.record.steps.iter().zip(ss.record.steps.iter()) {
            assert_eq!(a.samples, b.samples);
            assert_eq!(
                a.losses["task"].to_bits(),
                b.losses["task"].to_bits(),
                "task losses must agree at every step"
            );
        }
        assert_eq!(module_hash(&nd.student), module_hash(&ss.student));
        assert_eq!(module_hash(&nd.decoder), module_hash(&ss.decoder));
    }

    #[test]
    fn probe_reuse_matches_full_run() {
        let (corpus, teacher, feats) = setup();
        let student_cfg = tiny_encoder_cfg(8, 1);
        let protocol = tiny_protocol();
        let full = run_method(
            Method::Gkd,
            &inputs(&corpus, &teacher, &feats, &student_cfg, &protocol, 13),
        )
        .unwrap();
        let (probe_dec, steps) =
            train_probe(&full.student, &corpus, &protocol, 1.0, 13).unwrap();
        assert_eq!(module_hash(&probe_dec), module_hash(&full.decoder));
        let full_probe: Vec<&StepLog> = full
            .record
            .steps
            .iter()
            .filter(|s| s.stage == "task-probe")
            .collect();
        assert_eq!(full_probe.len(), steps.len());
        for (a, b) in full_probe.iter().zip(steps.iter()) {
            assert_eq!(a.losses["task"].to_bits(), b.losses["task"].to_bits());
        }
    }

    #[test]
    fn teacher_pretraining_produces_validation_miou() {
        let manifest = tiny_manifest();
        let cfg = tiny_encoder_cfg(12, 1);
        let train = TeacherTrainConfig {
            steps: 4,
            batch_size: 4,
            pool_per_style: 2,
            val_count: 4,
            ..TeacherTrainConfig::default()
        };
        let (bundle, record) = pretrain_teacher(&manifest, &cfg, &train).unwrap();
        assert!(bundle.val_miou >= 0.0 && bundle.val_miou <= 1.0);
        assert_eq!(record.steps.len(), 4);
        // Deterministic rerun.
        let (bundle2, _) = pretrain_teacher(&manifest, &cfg, &train).unwrap();
        assert_eq!(module_hash(&bundle.encoder), module_hash(&bundle2.encoder));
    }
}
