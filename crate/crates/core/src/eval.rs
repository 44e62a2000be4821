//! Segmentation metrics, per-domain generalization reports, and training
//! diagnostics (attention structure, feature distances, loss-curve
//! smoothness).

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, Sample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{decode, encode, Decoder, Encoder, Linear};
use crate::qsd::{attention_map, reconstruct, QsdConfig, QsdHead};
use crate::record::RunRecord;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Confusion matrix and mIoU

/// K x K counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/label grid pair, skipping ignored pixels.
    pub fn update(&mut self, pred: &[u8], labels: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::dim(format!(
                "prediction grid has {} pixels, labels {}",
                pred.len(),
                labels.len()
            )));
        }
        for (&p, &l) in pred.iter().zip(labels.iter()) {
            if l == ignore_index {
                continue;
            }
            if l as usize >= self.classes || p as usize >= self.classes {
                return Err(Error::validation(format!(
                    "class out of range: label {l}, prediction {p}, {} classes",
                    self.classes
                )));
            }
            self.counts[l as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class intersection over union; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.classes).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
                let fneg: u64 =
                    (0..self.classes).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fneg;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }
}

/// Mean IoU over classes with nonzero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::validation(
            "mIoU over an empty confusion matrix is undefined",
        ));
    }
    let ious: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

// ---------------------------------------------------------------------------
// Prediction and per-domain evaluation

/// Per-pixel argmax over the class axis of `[B, K, H, W]` logits.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!(
            "argmax expects [B, K, H, W], got {:?}",
            shape
        )));
    }
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut grid = vec![0u8; plane];
        for px in 0..plane {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let v = logits.data()[(bi * k + c) * plane + px];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            grid[px] = best as u8;
        }
        out.push(grid);
    }
    Ok(out)
}

/// Runs encoder + decoder over samples in batches and returns one predicted
/// label grid per sample.
pub fn predict(
    encoder: &Encoder,
    decoder: &Decoder,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<Vec<Vec<u8>>> {
    let size = encoder.config.image_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let images = Tensor::from_vec(vec![chunk.len(), 3, size, size], data)?;
        let mut g = Graph::new();
        let img = g.constant(images);
        let enc_b = encoder.bind(&mut g, false);
        let (_, tokens) = encode(&mut g, &encoder.config, &enc_b, img, None)?;
        let dec_b = decoder.bind(&mut g, false);
        let logits = decode(&mut g, decoder, &dec_b, tokens)?;
        out.extend(argmax_channels(g.value(logits))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain_id: String,
    pub seen: bool,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

/// Evaluates on the source domain (seen) and every target domain (unseen).
/// `source_eval_count` caps how many source samples are scored; targets are
/// always scored in full.
pub fn evaluate_domains(
    encoder: &Encoder,
    decoder: &Decoder,
    corpus: &Corpus,
    batch_size: usize,
    source_eval_count: Option<usize>,
) -> Result<Vec<DomainReport>> {
    let mut reports = Vec::new();

    let source_samples: Vec<&Sample> = corpus
        .source
        .iter()
        .filter(|s| s.labels.is_some())
        .take(source_eval_count.unwrap_or(usize::MAX))
        .collect();
    if source_samples.is_empty() {
        return Err(Error::validation("no labeled source samples to evaluate"));
    }
    reports.push(score_domain(
        encoder,
        decoder,
        &corpus.source[0].domain_id,
        true,
        &source_samples,
        batch_size,
        corpus.manifest.classes,
    )?);

    let domains = corpus.target_domains();
    if domains.is_empty() {
        return Err(Error::validation("corpus has no target split"));
    }
    for domain in domains {
        let samples = corpus.targets_of(&domain);
        reports.push(score_domain(
            encoder,
            decoder,
            &domain,
            false,
            &samples,
            batch_size,
            corpus.manifest.classes,
        )?);
    }
    Ok(reports)
}

fn score_domain(
    encoder: &Encoder,
    decoder: &Decoder,
    domain: &str,
    seen: bool,
    samples: &[&Sample],
    batch_size: usize,
    classes: usize,
) -> Result<DomainReport> {
    let preds = predict(encoder, decoder, samples, batch_size)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (pred, sample) in preds.iter().zip(samples.iter()) {
        let labels = sample
            .labels
            .as_ref()
            .ok_or_else(|| Error::validation(format!("sample {} has no labels", sample.id)))?;
        cm.update(pred, labels, IGNORE_INDEX)?;
    }
    Ok(DomainReport {
        domain_id: domain.to_string(),
        seen,
        miou: miou(&cm)?,
        per_class_iou: cm.per_class_iou(),
        pixels: cm.total(),
    })
}

/// Arithmetic mean of unseen-domain mIoUs.
pub fn unseen_average(reports: &[DomainReport]) -> Result<f64> {
    let unseen: Vec<f64> = reports.iter().filter(|r| !r.seen).map(|r| r.miou).collect();
    if unseen.is_empty() {
        return Err(Error::validation("no unseen domains in report list"));
    }
    Ok(unseen.iter().sum::<f64>() / unseen.len() as f64)
}

pub fn reports_to_csv(run_id: &str, seed: u64, reports: &[DomainReport]) -> String {
    let mut out = String::from("run_id,seed,domain,seen,miou,pixels\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            run_id, seed, r.domain_id, r.seen, r.miou, r.pixels
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Attention and feature-distance diagnostics

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    /// Mean over rows and batches of softmax(W)[i, i].
    pub diagonal_mass: f64,
    /// Mean Shannon entropy (nats) of softmax rows.
    pub row_entropy: f64,
}

pub fn attention_diagnostics(
    head: &QsdHead,
    cfg: &QsdConfig,
    student_tokens: &Tensor,
    teacher_tokens: &Tensor,
) -> Result<AttentionDiagnostics> {
    let mut g = Graph::new();
    let hb = head.bind(&mut g, false);
    let s = g.constant(student_tokens.clone());
    let t = g.constant(teacher_tokens.clone());
    let w = attention_map(&mut g, &hb, cfg, s, t)?;
    let probs = g.softmax(w, 2)?;
    let v = g.value(probs);
    let (b, n) = (v.shape()[0], v.shape()[1]);
    let mut diag = 0.0;
    let mut entropy = 0.0;
    for bi in 0..b {
        for i in 0..n {
            let row = &v.data()[(bi * n + i) * n..(bi * n + i + 1) * n];
            diag += row[i];
            entropy += -row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>();
        }
    }
    let rows = (b * n) as f64;
    Ok(AttentionDiagnostics {
        diagonal_mass: diag / rows,
        row_entropy: entropy / rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub tokens: usize,
}

/// How student tokens are brought into the teacher's space before measuring
/// distances.
pub enum FeatureAlignment<'a> {
    /// The trained distillation head's reconstruction.
    QsdReconstruction(&'a QsdHead, &'a QsdConfig),
    /// A linear adapter (trained during a run, or fit after the fact).
    Adapter(&'a Linear),
}

/// Per-token Euclidean distances between aligned student features and
/// teacher features, over `(student tokens, teacher tokens)` pairs shaped
/// `[1, N, C]`.
pub fn feature_distance_stats(
    alignment: &FeatureAlignment,
    pairs: &[(Tensor, Tensor)],
) -> Result<DistanceStats> {
    let mut distances = Vec::new();
    for (v_s, v_t) in pairs {
        let aligned = match alignment {
            FeatureAlignment::QsdReconstruction(head, cfg) => {
                let mut g = Graph::new();
                let hb = head.bind(&mut g, false);
                let s = g.constant(v_s.clone());
                let t = g.constant(v_t.clone());
                let r = reconstruct(&mut g, &hb, cfg, s, t)?;
                g.value(r).clone()
            }
            FeatureAlignment::Adapter(linear) => {
                let mut g = Graph::new();
                let s = g.constant(v_s.clone());
                let w = g.constant(linear.weight.clone());
                let b = g.constant(linear.bias.clone());
                let y = g.affine(s, w, b)?;
                g.value(y).clone()
            }
        };
        if aligned.shape() != v_t.shape() {
            return Err(Error::dim(format!(
                "aligned features {:?} do not match teacher {:?}",
                aligned.shape(),
                v_t.shape()
            )));
        }
        let n = v_t.shape()[1];
        let c = v_t.shape()[2];
        for i in 0..n {
            let mut d2 = 0.0;
            for j in 0..c {
                let diff = aligned.data()[i * c + j] - v_t.data()[i * c + j];
                d2 += diff * diff;
            }
            distances.push(d2.sqrt());
        }
    }
    if distances.is_empty() {
        return Err(Error::validation("no tokens to measure distances over"));
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = ((distances.len() - 1) as f64 * p).round() as usize;
        distances[idx]
    };
    Ok(DistanceStats {
        mean: distances.iter().sum::<f64>() / distances.len() as f64,
        median: q(0.5),
        p25: q(0.25),
        p75: q(0.75),
        tokens: distances.len(),
    })
}

/// Ridge least-squares fit of a linear map (with bias) from student tokens
/// to teacher tokens. Used to measure feature distances for models that own
/// no trained projection.
pub fn fit_linear_alignment(pairs: &[(Tensor, Tensor)], ridge: f64) -> Result<Linear> {
    let (cs, ct) = match pairs.first() {
        Some((s, t)) => (s.shape()[2], t.shape()[2]),
        None => return Err(Error::validation("no pairs to fit an alignment on")),
    };
    let d = cs + 1;
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d * ct];
    for (v_s, v_t) in pairs {
        let n = v_s.shape()[1];
        for i in 0..n {
            let mut row = Vec::with_capacity(d);
            row.extend_from_slice(&v_s.data()[i * cs..(i + 1) * cs]);
            row.push(1.0);
            let trow = &v_t.data()[i * ct..(i + 1) * ct];
            for a in 0..d {
                for b in 0..d {
                    xtx[a * d + b] += row[a] * row[b];
                }
                for j in 0..ct {
                    xty[a * ct + j] += row[a] * trow[j];
                }
            }
        }
    }
    for a in 0..d {
        xtx[a * d + a] += ridge;
    }
    let solution = solve_linear_system(&mut xtx, &mut xty, d, ct)?;
    let mut weight = Tensor::zeros(vec![cs, ct]);
    let mut bias = Tensor::zeros(vec![ct]);
    for a in 0..cs {
        for j in 0..ct {
            weight.data_mut()[a * ct + j] = solution[a * ct + j];
        }
    }
    for j in 0..ct {
        bias.data_mut()[j] = solution[cs * ct + j];
    }
    Ok(Linear { weight, bias })
}

/// Gaussian elimination with partial pivoting; solves `A X = B` in place for
/// X with A `d x d` and B `d x m`.
fn solve_linear_system(a: &mut [f64], b: &mut [f64], d: usize, m: usize) -> Result<Vec<f64>> {
    for col in 0..d {
        let mut pivot = col;
        for row in col + 1..d {
            if a[row * d + col].abs() > a[pivot * d + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * d + col].abs() < 1e-12 {
            return Err(Error::numeric("singular system in alignment fit"));
        }
        if pivot != col {
            for k in 0..d {
                a.swap(col * d + k, pivot * d + k);
            }
            for k in 0..m {
                b.swap(col * m + k, pivot * m + k);
            }
        }
        let diag = a[col * d + col];
        for row in col + 1..d {
            let factor = a[row * d + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..d {
                a[row * d + k] -= factor * a[col * d + k];
            }
            for k in 0..m {
                b[row * m + k] -= factor * b[col * m + k];
            }
        }
    }
    let mut x = vec![0.0; d * m];
    for row in (0..d).rev() {
        for k in 0..m {
            let mut acc = b[row * m + k];
            for col in row + 1..d {
                acc -= a[row * d + col] * x[col * m + k];
            }
            x[row * m + k] = acc / a[row * d + row];
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Loss-curve smoothness

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    /// Population variance of step-over-step first differences.
    pub first_diff_variance: f64,
    /// Steps where the loss rose by more than 5% over the previous step.
    pub upward_spikes: usize,
    pub steps: usize,
}

pub fn curve_stats(curve: &[f64]) -> CurveStats {
    let diffs: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    let variance = if diffs.is_empty() {
        0.0
    } else {
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64
    };
    let spikes = curve
        .windows(2)
        .filter(|w| w[1] > w[0] * 1.05)
        .count();
    CurveStats {
        first_diff_variance: variance,
        upward_spikes: spikes,
        steps: curve.len(),
    }
}

/// Compares the distillation-loss components of two runs over their common
/// step range.
pub fn loss_curve_stats(a: &RunRecord, b: &RunRecord) -> Result<(CurveStats, CurveStats)> {
    let ca = a.distill_curve();
    let cb = b.distill_curve();
    if ca.len() < 2 || cb.len() < 2 {
        return Err(Error::validation(format!(
            "loss curves are incomparable: {} and {} distillation steps",
            ca.len(),
            cb.len()
        )));
    }
    let common = ca.len().min(cb.len());
    Ok((curve_stats(&ca[..common]), curve_stats(&cb[..common])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_diagonal_and_miou_one() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 1], &[0, 1, 2, 1], IGNORE_INDEX).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(t, p) > 0, t == p && t != 2 || (t == 2 && p == 2));
            }
        }
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1], &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX)
            .unwrap();
        assert_eq!(cm.total(), 0);
        assert!(miou(&cm).is_err());
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[1, 1], &[0, 0], IGNORE_INDEX).unwrap();
        assert_eq!(miou(&cm).unwrap(), 0.0);
    }

    #[test]
    fn worked_two_by_two_example_is_seven_twelfths() {
        // truth [[0,0],[1,1]], prediction [[0,1],[1,1]].
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 1], &[0, 0, 1, 1], IGNORE_INDEX).unwrap();
        let iou = cm.per_class_iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        assert!((miou(&cm).unwrap() - 7.0 / 12.0).abs() <= 1e-15);
    }

    #[test]
    fn confusion_matches_pixel_loop_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let k = 5usize;
            let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..k as u8)).collect();
            let labels: Vec<u8> = (0..64)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        IGNORE_INDEX
                    } else {
                        rng.gen_range(0..k as u8)
                    }
                })
                .collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.update(&pred, &labels, IGNORE_INDEX).unwrap();
            // Pixel-loop oracle.
            let mut oracle = vec![0u64; k * k];
            for i in 0..64 {
                if labels[i] != IGNORE_INDEX {
                    oracle[labels[i] as usize * k + pred[i] as usize] += 1;
                }
            }
            for t in 0..k {
                for p in 0..k {
                    assert_eq!(cm.count(t, p), oracle[t * k + p]);
                }
            }
        }
    }

    #[test]
    fn class_out_of_range_is_validation_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.update(&[2], &[0], IGNORE_INDEX),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn argmax_invariant_to_constant_channel_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..1 * 3 * 4 * 4).map(|_| rng.gen::<f64>()).collect();
        let logits = Tensor::from_vec(vec![1, 3, 4, 4], data.clone()).unwrap();
        let shifted =
            Tensor::from_vec(vec![1, 3, 4, 4], data.iter().map(|v| v + 10.0).collect()).unwrap();
        assert_eq!(
            argmax_channels(&logits).unwrap(),
            argmax_channels(&shifted).unwrap()
        );
    }

    #[test]
    fn attention_diagnostics_bounds_and_degenerate_cases() {
        // N=1: diagonal mass 1, entropy 0.
        let head = QsdHead::init(3, 4, 1);
        let s = Tensor::filled(vec![1, 1, 3], 0.2);
        let t = Tensor::filled(vec![1, 1, 4], 0.4);
        let d = attention_diagnostics(&head, &QsdConfig::default(), &s, &t).unwrap();
        assert_eq!(d.diagonal_mass, 1.0);
        assert_eq!(d.row_entropy, 0.0);

        // Zero query projection makes W uniform: mass 1/N, entropy ln N.
        let mut head = QsdHead::init(3, 4, 1);
        for v in head.query_proj.weight.data_mut() {
            *v = 0.0;
        }
        for v in head.query_proj.bias.data_mut() {
            *v = 0.0;
        }
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::from_vec(
            vec![1, n, 3],
            (0..n * 3).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let t = Tensor::from_vec(
            vec![1, n, 4],
            (0..n * 4).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let d = attention_diagnostics(&head, &QsdConfig::default(), &s, &t).unwrap();
        assert!((d.diagonal_mass - 1.0 / n as f64).abs() <= 1e-12);
        assert!((d.row_entropy - (n as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn least_squares_recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cs, ct, n) = (3, 2, 40);
        let w: Vec<f64> = (0..cs * ct).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..ct).map(|_| rng.gen::<f64>() - 0.5).collect();
        let s_data: Vec<f64> = (0..n * cs).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut t_data = vec![0.0; n * ct];
        for i in 0..n {
            for j in 0..ct {
                let mut acc = b[j];
                for k in 0..cs {
                    acc += s_data[i * cs + k] * w[k * ct + j];
                }
                t_data[i * ct + j] = acc;
            }
        }
        let pairs = vec![(
            Tensor::from_vec(vec![1, n, cs], s_data).unwrap(),
            Tensor::from_vec(vec![1, n, ct], t_data).unwrap(),
        )];
        let fit = fit_linear_alignment(&pairs, 1e-9).unwrap();
        let stats = feature_distance_stats(&FeatureAlignment::Adapter(&fit), &pairs).unwrap();
        assert!(stats.mean <= 1e-6, "mean distance {}", stats.mean);
        assert!(stats.median <= stats.p75);
        assert!(stats.p25 <= stats.median);
    }

    #[test]
    fn curve_stats_degenerate_cases() {
        let constant = vec![1.0; 50];
        let s = curve_stats(&constant);
        assert_eq!(s.first_diff_variance, 0.0);
        assert_eq!(s.upward_spikes, 0);

        let decreasing: Vec<f64> = (0..50).map(|i| 10.0 - i as f64 * 0.1).collect();
        let s = curve_stats(&decreasing);
        assert_eq!(s.upward_spikes, 0);

        // Rises: 0.5 -> 1.0 (100%) and 0.404 -> 0.5 (24%); the 1% rise from
        // 0.4 to 0.404 stays under the 5% threshold.
        let spiky = vec![1.0, 0.5, 1.0, 0.4, 0.404, 0.5];
        let s = curve_stats(&spiky);
        assert_eq!(s.upward_spikes, 2);
    }
}
