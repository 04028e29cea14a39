//! The training objective: adversarial alignment terms, cycle consistency,
//! classification, and identity matching, each as a value-plus-gradient
//! computation over a class-paired batch.
//!
//! Sign conventions. Each adversarial op returns the critic objective
//! `v` (which the critic maximises) together with gradients **of `v`**
//! with respect to every network it touches. The trainer minimises
//! `dis_total = -w_adv * (v_se + v_sk + v_im)` over critic parameters and
//! `ps_total = w_adv * L_gen + w_cyc * L_cyc + w_cls * L_cls + w_iml * L_iml`
//! over generator and classifier parameters, where `L_gen` collects the
//! generator-dependent parts of the adversarial values.
//! [`critic_phase`] and [`generator_phase`] return gradients of those two
//! aggregates directly, ready for a descent step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::nn::{Mlp, MlpGrads, ParamSet};

/// One training batch. Row `i` of `sketches` and `images` are independent
/// samples of the same class (class-level pairing; no instance alignment),
/// `codes` row `i` is that class's semantic code, and `labels[i]` indexes
/// the seen-class vocabulary.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sketches: Matrix,
    pub images: Matrix,
    pub codes: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(sketches: Matrix, images: Matrix, codes: Matrix, labels: Vec<usize>) -> Result<Self> {
        let b = sketches.rows();
        if images.rows() != b || codes.rows() != b || labels.len() != b {
            return Err(Error::shape(
                "Batch::new",
                format!("{b} rows"),
                format!("images={}, codes={}, labels={}", images.rows(), codes.rows(), labels.len()),
            ));
        }
        if b == 0 {
            return Err(Error::Validation("batch must be non-empty".into()));
        }
        Ok(Batch {
            sketches,
            images,
            codes,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.sketches.rows()
    }
}

/// Linear-softmax classifier over semantic codes, shared by both branches
/// unless a per-branch head is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `n_classes x code_dim`
    pub weight: Matrix,
    pub bias: Vec<Real>,
}

impl ClassifierHead {
    pub fn glorot<R: Rng>(n_classes: usize, code_dim: usize, rng: &mut R) -> Result<Self> {
        if n_classes == 0 || code_dim == 0 {
            return Err(Error::Validation("classifier head dims must be positive".into()));
        }
        let a = (6.0 / (n_classes + code_dim) as Real).sqrt();
        let data = (0..n_classes * code_dim).map(|_| rng.random_range(-a..a)).collect();
        Ok(ClassifierHead {
            weight: Matrix::from_vec(n_classes, code_dim, data)?,
            bias: vec![0.0; n_classes],
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, codes: &Matrix) -> Result<Matrix> {
        let mut out = codes.matmul_transpose_b(&self.weight)?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

impl ParamSet for ClassifierHead {
    fn params(&self) -> Vec<&[Real]> {
        vec![self.weight.data(), &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [Real]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

/// Gradient of a scalar loss with respect to a [`ClassifierHead`].
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Matrix,
    pub bias: Vec<Real>,
}

impl HeadGrads {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        HeadGrads {
            weight: Matrix::zeros(head.n_classes(), head.code_dim()),
            bias: vec![0.0; head.n_classes()],
        }
    }

    pub fn add_assign(&mut self, other: &HeadGrads) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: Real) {
        self.weight.scale(factor);
        for b in &mut self.bias {
            *b *= factor;
        }
    }

    pub fn slices(&self) -> Vec<&[Real]> {
        vec![self.weight.data(), &self.bias]
    }
}

/// The seven networks plus classifier head(s): everything the losses see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub enc_sketch: Mlp,
    pub enc_image: Mlp,
    pub dec_sketch: Mlp,
    pub dec_image: Mlp,
    pub critic_semantic: Mlp,
    pub critic_sketch: Mlp,
    pub critic_image: Mlp,
    pub head_sketch: ClassifierHead,
    /// `None` means the head is shared by both branches.
    pub head_image: Option<ClassifierHead>,
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.enc_sketch.input_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.enc_sketch.output_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head_sketch.n_classes()
    }

    pub fn image_head(&self) -> &ClassifierHead {
        self.head_image.as_ref().unwrap_or(&self.head_sketch)
    }

    /// Checks the dimension chain across all nine parameter sets.
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        let m = self.code_dim();
        let checks = [
            ("enc_sketch", self.enc_sketch.input_dim(), d, self.enc_sketch.output_dim(), m),
            ("enc_image", self.enc_image.input_dim(), d, self.enc_image.output_dim(), m),
            ("dec_sketch", self.dec_sketch.input_dim(), m, self.dec_sketch.output_dim(), d),
            ("dec_image", self.dec_image.input_dim(), m, self.dec_image.output_dim(), d),
            ("critic_semantic", self.critic_semantic.input_dim(), m, self.critic_semantic.output_dim(), 1),
            ("critic_sketch", self.critic_sketch.input_dim(), d, self.critic_sketch.output_dim(), 1),
            ("critic_image", self.critic_image.input_dim(), d, self.critic_image.output_dim(), 1),
        ];
        for (name, got_in, want_in, got_out, want_out) in checks {
            if got_in != want_in || got_out != want_out {
                return Err(Error::shape(
                    format!("model.{name}"),
                    format!("{want_in}->{want_out}"),
                    format!("{got_in}->{got_out}"),
                ));
            }
        }
        if self.head_sketch.code_dim() != m {
            return Err(Error::shape("model.head_sketch", m, self.head_sketch.code_dim()));
        }
        if let Some(head) = &self.head_image {
            if head.code_dim() != m || head.n_classes() != self.head_sketch.n_classes() {
                return Err(Error::shape(
                    "model.head_image",
                    format!("{}x{m}", self.head_sketch.n_classes()),
                    format!("{}x{}", head.n_classes(), head.code_dim()),
                ));
            }
        }
        Ok(())
    }
}

/// Per-term coefficients for the four loss groups. All default to 1;
/// ablations zero individual groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: Real,
    pub cycle: Real,
    pub classification: Real,
    pub identity: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            cycle: 1.0,
            classification: 1.0,
            identity: 1.0,
        }
    }
}

/// All loss terms of one batch evaluation. Component fields are raw
/// (unweighted); the three totals apply the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub wadv_se: Real,
    pub wadv_sk: Real,
    pub wadv_im: Real,
    pub cyc_sk: Real,
    pub cyc_im: Real,
    pub cls_sk: Real,
    pub cls_im: Real,
    pub iml: Real,
    pub total: Real,
    pub dis_total: Real,
    pub ps_total: Real,
}

impl LossReport {
    /// Returns the first non-finite component, if any, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms: [(&'static str, Real); 11] = [
            ("wadv_se", self.wadv_se),
            ("wadv_sk", self.wadv_sk),
            ("wadv_im", self.wadv_im),
            ("cyc_sk", self.cyc_sk),
            ("cyc_im", self.cyc_im),
            ("cls_sk", self.cls_sk),
            ("cls_im", self.cls_im),
            ("iml", self.iml),
            ("total", self.total),
            ("dis_total", self.dis_total),
            ("ps_total", self.ps_total),
        ];
        terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

fn filled(rows: usize, cols: usize, value: Real) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().fill(value);
    m
}

/// `sign(x) * factor` elementwise, with `sign(0) = 0`.
fn sign_scaled(m: &Matrix, factor: Real) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = if *v > 0.0 {
            factor
        } else if *v < 0.0 {
            -factor
        } else {
            0.0
        };
    }
    out
}

fn scaled(m: &Matrix, factor: Real) -> Matrix {
    let mut out = m.clone();
    out.scale(factor);
    out
}

fn sum_abs(m: &Matrix) -> Real {
    m.data().iter().map(|v| v.abs()).sum()
}

fn sum_sq(m: &Matrix) -> Real {
    m.data().iter().map(|v| v * v).sum()
}

/// Result of [`adversarial_semantic`]: the critic objective
/// `v = 2 E[f(s)] - E[f(G_sk(x))] - E[f(G_im(y))]` and gradients of `v`.
#[derive(Debug)]
pub struct SemanticAdversarial {
    pub value: Real,
    /// `-E[f(G_sk(x))] - E[f(G_im(y))]`: the encoder-dependent part of the value.
    pub generator_part: Real,
    pub critic: MlpGrads,
    pub enc_sketch: MlpGrads,
    pub enc_image: MlpGrads,
}

/// Critic objective for the shared semantic space: the critic scores true
/// class codes against both encoders' outputs.
pub fn adversarial_semantic(
    batch: &Batch,
    enc_sketch: &Mlp,
    enc_image: &Mlp,
    critic: &Mlp,
) -> Result<SemanticAdversarial> {
    let b = batch.rows() as Real;
    let (code_sk, tape_sk) = enc_sketch.forward(&batch.sketches)?;
    let (code_im, tape_im) = enc_image.forward(&batch.images)?;

    let (c_real, t_real) = critic.forward(&batch.codes)?;
    let (c_sk, t_sk) = critic.forward(&code_sk)?;
    let (c_im, t_im) = critic.forward(&code_im)?;

    let value = 2.0 * c_real.mean() - c_sk.mean() - c_im.mean();
    let generator_part = -c_sk.mean() - c_im.mean();

    let rows = batch.rows();
    let (mut critic_grads, _) = critic.backward(&t_real, &filled(rows, 1, 2.0 / b))?;
    let (g_sk, din_sk) = critic.backward(&t_sk, &filled(rows, 1, -1.0 / b))?;
    let (g_im, din_im) = critic.backward(&t_im, &filled(rows, 1, -1.0 / b))?;
    critic_grads.add_assign(&g_sk)?;
    critic_grads.add_assign(&g_im)?;

    let (enc_sk_grads, _) = enc_sketch.backward(&tape_sk, &din_sk)?;
    let (enc_im_grads, _) = enc_image.backward(&tape_im, &din_im)?;

    Ok(SemanticAdversarial {
        value,
        generator_part,
        critic: critic_grads,
        enc_sketch: enc_sk_grads,
        enc_image: enc_im_grads,
    })
}

/// Result of [`adversarial_branch`]: `v = E[f(real)] - E[f(decoded)]`,
/// gradients of `v` for the critic, and `dv/d decoded` for chaining into
/// the decoder that produced `decoded`.
#[derive(Debug)]
pub struct BranchAdversarial {
    pub value: Real,
    /// `-E[f(decoded)]`: the decoder-dependent part of the value.
    pub generator_part: Real,
    pub critic: MlpGrads,
    pub decoded_grad: Matrix,
}

/// Feature-space critic objective for one branch: real features against
/// features decoded from class codes.
pub fn adversarial_branch(real: &Matrix, decoded: &Matrix, critic: &Mlp) -> Result<BranchAdversarial> {
    if real.rows() != decoded.rows() || real.cols() != decoded.cols() {
        return Err(Error::shape(
            "adversarial_branch",
            format!("{}x{}", real.rows(), real.cols()),
            format!("{}x{}", decoded.rows(), decoded.cols()),
        ));
    }
    let b = real.rows() as Real;
    let (c_real, t_real) = critic.forward(real)?;
    let (c_dec, t_dec) = critic.forward(decoded)?;
    let value = c_real.mean() - c_dec.mean();

    let (mut critic_grads, _) = critic.backward(&t_real, &filled(real.rows(), 1, 1.0 / b))?;
    let (g_dec, decoded_grad) = critic.backward(&t_dec, &filled(real.rows(), 1, -1.0 / b))?;
    critic_grads.add_assign(&g_dec)?;

    Ok(BranchAdversarial {
        value,
        generator_part: -c_dec.mean(),
        critic: critic_grads,
        decoded_grad,
    })
}

/// Result of [`cycle`]: both round-trip residuals and gradients through
/// both networks.
#[derive(Debug)]
pub struct CycleLoss {
    pub value: Real,
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

/// Round-trip consistency for one branch:
/// `mean_b |decoder(encoder(v)) - v|_1 + mean_b |encoder(decoder(s)) - s|_1`,
/// L1 summed over coordinates, averaged over batch rows.
pub fn cycle(features: &Matrix, codes: &Matrix, encoder: &Mlp, decoder: &Mlp) -> Result<CycleLoss> {
    let b = features.rows() as Real;

    // decoder(encoder(v)) vs v
    let (code, t_enc) = encoder.forward(features)?;
    let (recon, t_dec) = decoder.forward(&code)?;
    let diff_feat = recon.sub(features)?;
    let value_feat = sum_abs(&diff_feat) / b;
    let (dec_grads_a, din_code) = decoder.backward(&t_dec, &sign_scaled(&diff_feat, 1.0 / b))?;
    let (mut enc_grads, _) = encoder.backward(&t_enc, &din_code)?;

    // encoder(decoder(s)) vs s
    let (decoded, t_dec2) = decoder.forward(codes)?;
    let (cycled, t_enc2) = encoder.forward(&decoded)?;
    let diff_code = cycled.sub(codes)?;
    let value_code = sum_abs(&diff_code) / b;
    let (enc_grads_b, din_decoded) = encoder.backward(&t_enc2, &sign_scaled(&diff_code, 1.0 / b))?;
    let (dec_grads_b, _) = decoder.backward(&t_dec2, &din_decoded)?;

    enc_grads.add_assign(&enc_grads_b)?;
    let mut dec_grads = dec_grads_a;
    dec_grads.add_assign(&dec_grads_b)?;

    Ok(CycleLoss {
        value: value_feat + value_code,
        encoder: enc_grads,
        decoder: dec_grads,
    })
}

/// Result of [`classification`]: negative mean log-likelihood, head
/// gradients, and `d value / d codes` for chaining into the encoder.
#[derive(Debug)]
pub struct Classification {
    pub value: Real,
    pub head: HeadGrads,
    pub codes_grad: Matrix,
}

/// Cross-entropy of the linear-softmax head over semantic codes.
pub fn classification(codes: &Matrix, labels: &[usize], head: &ClassifierHead) -> Result<Classification> {
    if labels.len() != codes.rows() {
        return Err(Error::shape("classification labels", codes.rows(), labels.len()));
    }
    let n_classes = head.n_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let b = codes.rows() as Real;
    let logits = head.logits(codes)?;

    let mut value = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().fold(Real::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<Real>().ln();
        value -= row[labels[i]] - lse;
        let drow = dlogits.row_mut(i);
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - lse).exp() / b;
        }
        drow[labels[i]] -= 1.0 / b;
    }
    value /= b;

    let weight_grad = dlogits.matmul_transpose_a(codes)?;
    let bias_grad = dlogits.col_sums();
    let codes_grad = dlogits.matmul(&head.weight)?;

    Ok(Classification {
        value,
        head: HeadGrads {
            weight: weight_grad,
            bias: bias_grad,
        },
        codes_grad,
    })
}

/// Result of [`identity_matching`]: squared-L2 alignment residuals and
/// gradients for all four generators.
#[derive(Debug)]
pub struct IdentityMatching {
    pub value: Real,
    pub enc_sketch: MlpGrads,
    pub enc_image: MlpGrads,
    pub dec_sketch: MlpGrads,
    pub dec_image: MlpGrads,
}

/// Alignment of paired codes and of decoded codes with the original
/// features:
/// `mean|G_sk(x) - G_im(y)|^2 + mean|F_sk(s) - x|^2 + mean|F_im(s) - y|^2`,
/// squared L2 summed over coordinates, averaged over rows.
pub fn identity_matching(
    batch: &Batch,
    enc_sketch: &Mlp,
    enc_image: &Mlp,
    dec_sketch: &Mlp,
    dec_image: &Mlp,
) -> Result<IdentityMatching> {
    let b = batch.rows() as Real;
    let (code_sk, t_enc_sk) = enc_sketch.forward(&batch.sketches)?;
    let (code_im, t_enc_im) = enc_image.forward(&batch.images)?;
    let (dec_sk, t_dec_sk) = dec_sketch.forward(&batch.codes)?;
    let (dec_im, t_dec_im) = dec_image.forward(&batch.codes)?;

    let code_diff = code_sk.sub(&code_im)?;
    let sk_diff = dec_sk.sub(&batch.sketches)?;
    let im_diff = dec_im.sub(&batch.images)?;
    let value = (sum_sq(&code_diff) + sum_sq(&sk_diff) + sum_sq(&im_diff)) / b;

    let (enc_sk_grads, _) = enc_sketch.backward(&t_enc_sk, &scaled(&code_diff, 2.0 / b))?;
    let (enc_im_grads, _) = enc_image.backward(&t_enc_im, &scaled(&code_diff, -2.0 / b))?;
    let (dec_sk_grads, _) = dec_sketch.backward(&t_dec_sk, &scaled(&sk_diff, 2.0 / b))?;
    let (dec_im_grads, _) = dec_image.backward(&t_dec_im, &scaled(&im_diff, 2.0 / b))?;

    Ok(IdentityMatching {
        value,
        enc_sketch: enc_sk_grads,
        enc_image: enc_im_grads,
        dec_sketch: dec_sk_grads,
        dec_image: dec_im_grads,
    })
}

fn compose_report(
    weights: &LossWeights,
    wadv: [Real; 3],
    generator_part: Real,
    cyc: [Real; 2],
    cls: [Real; 2],
    iml: Real,
) -> LossReport {
    let adv_sum = wadv[0] + wadv[1] + wadv[2];
    let cyc_sum = cyc[0] + cyc[1];
    let cls_sum = cls[0] + cls[1];
    LossReport {
        wadv_se: wadv[0],
        wadv_sk: wadv[1],
        wadv_im: wadv[2],
        cyc_sk: cyc[0],
        cyc_im: cyc[1],
        cls_sk: cls[0],
        cls_im: cls[1],
        iml,
        total: weights.adversarial * adv_sum
            + weights.cycle * cyc_sum
            + weights.classification * cls_sum
            + weights.identity * iml,
        dis_total: -weights.adversarial * adv_sum,
        ps_total: weights.adversarial * generator_part
            + weights.cycle * cyc_sum
            + weights.classification * cls_sum
            + weights.identity * iml,
    }
}

/// Evaluates every loss term (values only) by composing the individual ops.
pub fn aggregate(batch: &Batch, model: &Model, weights: &LossWeights) -> Result<LossReport> {
    let sem = adversarial_semantic(batch, &model.enc_sketch, &model.enc_image, &model.critic_semantic)?;

    let dec_sk = model.dec_sketch.infer(&batch.codes)?;
    let dec_im = model.dec_image.infer(&batch.codes)?;
    let br_sk = adversarial_branch(&batch.sketches, &dec_sk, &model.critic_sketch)?;
    let br_im = adversarial_branch(&batch.images, &dec_im, &model.critic_image)?;

    let cyc_sk = cycle(&batch.sketches, &batch.codes, &model.enc_sketch, &model.dec_sketch)?;
    let cyc_im = cycle(&batch.images, &batch.codes, &model.enc_image, &model.dec_image)?;

    let code_sk = model.enc_sketch.infer(&batch.sketches)?;
    let code_im = model.enc_image.infer(&batch.images)?;
    let cls_sk = classification(&code_sk, &batch.labels, &model.head_sketch)?;
    let cls_im = classification(&code_im, &batch.labels, model.image_head())?;

    let iml = identity_matching(
        batch,
        &model.enc_sketch,
        &model.enc_image,
        &model.dec_sketch,
        &model.dec_image,
    )?;

    let generator_part = sem.generator_part + br_sk.generator_part + br_im.generator_part;
    Ok(compose_report(
        weights,
        [sem.value, br_sk.value, br_im.value],
        generator_part,
        [cyc_sk.value, cyc_im.value],
        [cls_sk.value, cls_im.value],
        iml.value,
    ))
}

/// Critic-side evaluation: adversarial values plus gradients of
/// `dis_total` for the three critics, ready for a descent step.
#[derive(Debug)]
pub struct CriticPhase {
    pub wadv_se: Real,
    pub wadv_sk: Real,
    pub wadv_im: Real,
    pub dis_total: Real,
    pub critic_semantic: MlpGrads,
    pub critic_sketch: MlpGrads,
    pub critic_image: MlpGrads,
}

pub fn critic_phase(batch: &Batch, model: &Model, weights: &LossWeights) -> Result<CriticPhase> {
    let sem = adversarial_semantic(batch, &model.enc_sketch, &model.enc_image, &model.critic_semantic)?;
    let dec_sk = model.dec_sketch.infer(&batch.codes)?;
    let dec_im = model.dec_image.infer(&batch.codes)?;
    let br_sk = adversarial_branch(&batch.sketches, &dec_sk, &model.critic_sketch)?;
    let br_im = adversarial_branch(&batch.images, &dec_im, &model.critic_image)?;

    let mut critic_semantic = sem.critic;
    let mut critic_sketch = br_sk.critic;
    let mut critic_image = br_im.critic;
    critic_semantic.scale(-weights.adversarial);
    critic_sketch.scale(-weights.adversarial);
    critic_image.scale(-weights.adversarial);

    Ok(CriticPhase {
        wadv_se: sem.value,
        wadv_sk: br_sk.value,
        wadv_im: br_im.value,
        dis_total: -weights.adversarial * (sem.value + br_sk.value + br_im.value),
        critic_semantic,
        critic_sketch,
        critic_image,
    })
}

/// Generator-side evaluation: the full [`LossReport`] plus gradients of
/// `ps_total` for the four generators and the classifier head(s), ready
/// for a descent step. Also exposes the batch's semantic codes for
/// diagnostics.
#[derive(Debug)]
pub struct GeneratorPhase {
    pub report: LossReport,
    pub enc_sketch: MlpGrads,
    pub enc_image: MlpGrads,
    pub dec_sketch: MlpGrads,
    pub dec_image: MlpGrads,
    pub head_sketch: HeadGrads,
    /// Present only for a per-branch head configuration.
    pub head_image: Option<HeadGrads>,
    pub code_sketch: Matrix,
    pub code_image: Matrix,
}

pub fn generator_phase(batch: &Batch, model: &Model, weights: &LossWeights) -> Result<GeneratorPhase> {
    let b = batch.rows() as Real;
    let rows = batch.rows();

    // Forward passes shared by all terms.
    let (code_sk, t_enc_sk) = model.enc_sketch.forward(&batch.sketches)?;
    let (code_im, t_enc_im) = model.enc_image.forward(&batch.images)?;
    let (dec_sk, t_dec_sk) = model.dec_sketch.forward(&batch.codes)?;
    let (dec_im, t_dec_im) = model.dec_image.forward(&batch.codes)?;
    let (recon_sk, t_recon_sk) = model.dec_sketch.forward(&code_sk)?;
    let (recon_im, t_recon_im) = model.dec_image.forward(&code_im)?;
    let (cycled_sk, t_cycled_sk) = model.enc_sketch.forward(&dec_sk)?;
    let (cycled_im, t_cycled_im) = model.enc_image.forward(&dec_im)?;

    let c_se_real = model.critic_semantic.infer(&batch.codes)?;
    let (c_se_sk, t_cse_sk) = model.critic_semantic.forward(&code_sk)?;
    let (c_se_im, t_cse_im) = model.critic_semantic.forward(&code_im)?;
    let c_sk_real = model.critic_sketch.infer(&batch.sketches)?;
    let (c_sk_dec, t_csk_dec) = model.critic_sketch.forward(&dec_sk)?;
    let c_im_real = model.critic_image.infer(&batch.images)?;
    let (c_im_dec, t_cim_dec) = model.critic_image.forward(&dec_im)?;

    // Values.
    let wadv_se = 2.0 * c_se_real.mean() - c_se_sk.mean() - c_se_im.mean();
    let wadv_sk = c_sk_real.mean() - c_sk_dec.mean();
    let wadv_im = c_im_real.mean() - c_im_dec.mean();
    let generator_part = -c_se_sk.mean() - c_se_im.mean() - c_sk_dec.mean() - c_im_dec.mean();

    let cyc_diff_sk = recon_sk.sub(&batch.sketches)?;
    let cyc_diff_im = recon_im.sub(&batch.images)?;
    let cyc_code_diff_sk = cycled_sk.sub(&batch.codes)?;
    let cyc_code_diff_im = cycled_im.sub(&batch.codes)?;
    let cyc_sk_value = (sum_abs(&cyc_diff_sk) + sum_abs(&cyc_code_diff_sk)) / b;
    let cyc_im_value = (sum_abs(&cyc_diff_im) + sum_abs(&cyc_code_diff_im)) / b;

    let cls_sk = classification(&code_sk, &batch.labels, &model.head_sketch)?;
    let cls_im = classification(&code_im, &batch.labels, model.image_head())?;

    let code_diff = code_sk.sub(&code_im)?;
    let iml_sk_diff = dec_sk.sub(&batch.sketches)?;
    let iml_im_diff = dec_im.sub(&batch.images)?;
    let iml_value = (sum_sq(&code_diff) + sum_sq(&iml_sk_diff) + sum_sq(&iml_im_diff)) / b;

    let report = compose_report(
        weights,
        [wadv_se, wadv_sk, wadv_im],
        generator_part,
        [cyc_sk_value, cyc_im_value],
        [cls_sk.value, cls_im.value],
        iml_value,
    );

    // d ps / d code_sk: semantic critic, cycle reconstruction, classifier,
    // identity matching.
    let (_, mut d_code_sk) = model.critic_semantic.backward(&t_cse_sk, &filled(rows, 1, -weights.adversarial / b))?;
    let (dec_sk_grads_a, din_recon_sk) =
        model.dec_sketch.backward(&t_recon_sk, &sign_scaled(&cyc_diff_sk, weights.cycle / b))?;
    d_code_sk.add_assign(&din_recon_sk)?;
    d_code_sk.add_assign(&scaled(&cls_sk.codes_grad, weights.classification))?;
    d_code_sk.add_assign(&scaled(&code_diff, 2.0 * weights.identity / b))?;
    let (mut enc_sk_grads, _) = model.enc_sketch.backward(&t_enc_sk, &d_code_sk)?;

    // d ps / d code_im, mirrored.
    let (_, mut d_code_im) = model.critic_semantic.backward(&t_cse_im, &filled(rows, 1, -weights.adversarial / b))?;
    let (dec_im_grads_a, din_recon_im) =
        model.dec_image.backward(&t_recon_im, &sign_scaled(&cyc_diff_im, weights.cycle / b))?;
    d_code_im.add_assign(&din_recon_im)?;
    d_code_im.add_assign(&scaled(&cls_im.codes_grad, weights.classification))?;
    d_code_im.add_assign(&scaled(&code_diff, -2.0 * weights.identity / b))?;
    let (mut enc_im_grads, _) = model.enc_image.backward(&t_enc_im, &d_code_im)?;

    // Cycle code terms: encoder applied to decoded codes.
    let (enc_sk_grads_b, din_dec_from_cycle_sk) =
        model.enc_sketch.backward(&t_cycled_sk, &sign_scaled(&cyc_code_diff_sk, weights.cycle / b))?;
    enc_sk_grads.add_assign(&enc_sk_grads_b)?;
    let (enc_im_grads_b, din_dec_from_cycle_im) =
        model.enc_image.backward(&t_cycled_im, &sign_scaled(&cyc_code_diff_im, weights.cycle / b))?;
    enc_im_grads.add_assign(&enc_im_grads_b)?;

    // d ps / d dec_sk: branch critic, cycle code term, identity matching.
    let (_, mut d_dec_sk) = model.critic_sketch.backward(&t_csk_dec, &filled(rows, 1, -weights.adversarial / b))?;
    d_dec_sk.add_assign(&din_dec_from_cycle_sk)?;
    d_dec_sk.add_assign(&scaled(&iml_sk_diff, 2.0 * weights.identity / b))?;
    let (dec_sk_grads_b, _) = model.dec_sketch.backward(&t_dec_sk, &d_dec_sk)?;
    let mut dec_sk_grads = dec_sk_grads_a;
    dec_sk_grads.add_assign(&dec_sk_grads_b)?;

    let (_, mut d_dec_im) = model.critic_image.backward(&t_cim_dec, &filled(rows, 1, -weights.adversarial / b))?;
    d_dec_im.add_assign(&din_dec_from_cycle_im)?;
    d_dec_im.add_assign(&scaled(&iml_im_diff, 2.0 * weights.identity / b))?;
    let (dec_im_grads_b, _) = model.dec_image.backward(&t_dec_im, &d_dec_im)?;
    let mut dec_im_grads = dec_im_grads_a;
    dec_im_grads.add_assign(&dec_im_grads_b)?;

    // Head gradients: accumulate both branches when the head is shared.
    let mut head_sketch = cls_sk.head;
    head_sketch.scale(weights.classification);
    let mut head_image_grads = cls_im.head;
    head_image_grads.scale(weights.classification);
    let head_image = if model.head_image.is_some() {
        Some(head_image_grads)
    } else {
        head_sketch.add_assign(&head_image_grads)?;
        None
    };

    Ok(GeneratorPhase {
        report,
        enc_sketch: enc_sk_grads,
        enc_image: enc_im_grads,
        dec_sketch: dec_sk_grads,
        dec_image: dec_im_grads,
        head_sketch,
        head_image,
        code_sketch: code_sk,
        code_image: code_im,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: Real = std::f64::consts::LN_2 as Real;

    fn zero_net(in_dim: usize, out_dim: usize) -> Mlp {
        Mlp::new(vec![Layer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn identity_net(dim: usize) -> Mlp {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        Mlp::new(vec![Layer {
            weight,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn bias_net(in_dim: usize, bias: Vec<Real>) -> Mlp {
        let out_dim = bias.len();
        Mlp::new(vec![Layer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias,
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn random_matrix<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Small random model: feature dim `d`, code dim `m`, `c` classes.
    fn random_model(d: usize, m: usize, c: usize, per_branch: bool, rng: &mut ChaCha8Rng) -> Model {
        random_model_with(d, m, c, per_branch, Activation::LeakyRelu(0.2), rng)
    }

    fn random_model_with(
        d: usize,
        m: usize,
        c: usize,
        per_branch: bool,
        hidden: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Model {
        let out = Activation::Identity;
        Model {
            enc_sketch: Mlp::glorot(&[d, 4, m], hidden, out, rng).unwrap(),
            enc_image: Mlp::glorot(&[d, 4, m], hidden, out, rng).unwrap(),
            dec_sketch: Mlp::glorot(&[m, 4, d], hidden, out, rng).unwrap(),
            dec_image: Mlp::glorot(&[m, 4, d], hidden, out, rng).unwrap(),
            critic_semantic: Mlp::glorot(&[m, 4, 1], hidden, out, rng).unwrap(),
            critic_sketch: Mlp::glorot(&[d, 4, 1], hidden, out, rng).unwrap(),
            critic_image: Mlp::glorot(&[d, 4, 1], hidden, out, rng).unwrap(),
            head_sketch: ClassifierHead::glorot(c, m, rng).unwrap(),
            head_image: if per_branch {
                Some(ClassifierHead::glorot(c, m, rng).unwrap())
            } else {
                None
            },
        }
    }

    fn random_batch(d: usize, m: usize, c: usize, b: usize, rng: &mut ChaCha8Rng) -> Batch {
        Batch::new(
            random_matrix(b, d, rng),
            random_matrix(b, d, rng),
            random_matrix(b, m, rng),
            (0..b).map(|i| i % c).collect(),
        )
        .unwrap()
    }

    #[test]
    fn semantic_adversarial_zero_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(5, 3, 2, 4, &mut rng);
        let enc = Mlp::glorot(&[5, 4, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let enc2 = Mlp::glorot(&[5, 4, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let critic = zero_net(3, 1);
        let out = adversarial_semantic(&batch, &enc, &enc2, &critic).unwrap();
        assert_eq!(out.value, 0.0);
        for l in &out.enc_sketch.layers {
            assert!(l.weight.data().iter().all(|&v| v == 0.0));
        }
        for l in &out.enc_image.layers {
            assert!(l.weight.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn semantic_adversarial_matched_codes_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_matrix(3, 4, &mut rng);
        let batch = Batch::new(s.clone(), s.clone(), s.clone(), vec![0, 1, 0]).unwrap();
        let enc = identity_net(4);
        let critic = Mlp::glorot(&[4, 3, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let out = adversarial_semantic(&batch, &enc, &enc, &critic).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn semantic_adversarial_matches_independent_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(6, 4, 3, 3, &mut rng);
        let enc_sk = Mlp::glorot(&[6, 5, 4], Activation::LeakyRelu(0.2), Activation::Identity, &mut rng).unwrap();
        let enc_im = Mlp::glorot(&[6, 5, 4], Activation::LeakyRelu(0.2), Activation::Identity, &mut rng).unwrap();
        let critic = Mlp::glorot(&[4, 5, 1], Activation::LeakyRelu(0.2), Activation::Identity, &mut rng).unwrap();
        let out = adversarial_semantic(&batch, &enc_sk, &enc_im, &critic).unwrap();

        let mean_of = |m: &Matrix| m.data().iter().sum::<Real>() / m.rows() as Real;
        let m_s = mean_of(&critic.infer(&batch.codes).unwrap());
        let m_x = mean_of(&critic.infer(&enc_sk.infer(&batch.sketches).unwrap()).unwrap());
        let m_y = mean_of(&critic.infer(&enc_im.infer(&batch.images).unwrap()).unwrap());
        assert!((out.value - (2.0 * m_s - m_x - m_y)).abs() < 1e-12);
        assert!((out.generator_part - (-m_x - m_y)).abs() < 1e-12);
    }

    #[test]
    fn branch_adversarial_identical_and_zero_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let real = random_matrix(4, 5, &mut rng);
        let critic = Mlp::glorot(&[5, 4, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        assert_eq!(adversarial_branch(&real, &real, &critic).unwrap().value, 0.0);
        let other = random_matrix(4, 5, &mut rng);
        assert_eq!(adversarial_branch(&real, &other, &zero_net(5, 1)).unwrap().value, 0.0);
        assert!(adversarial_branch(&real, &random_matrix(3, 5, &mut rng), &critic).is_err());
    }

    #[test]
    fn branch_adversarial_matches_independent_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let real = random_matrix(3, 6, &mut rng);
        let decoded = random_matrix(3, 6, &mut rng);
        let critic = Mlp::glorot(&[6, 4, 1], Activation::LeakyRelu(0.2), Activation::Identity, &mut rng).unwrap();
        let out = adversarial_branch(&real, &decoded, &critic).unwrap();
        let mean_of = |m: &Matrix| m.data().iter().sum::<Real>() / m.rows() as Real;
        let expected = mean_of(&critic.infer(&real).unwrap()) - mean_of(&critic.infer(&decoded).unwrap());
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn cycle_identity_composition_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = random_matrix(3, 4, &mut rng);
        let codes = random_matrix(3, 4, &mut rng);
        let net = identity_net(4);
        let out = cycle(&features, &codes, &net, &net).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn cycle_constant_offset_sums_over_coordinates() {
        // encoder collapses to zero codes; decoder outputs input + 1 on a
        // zero batch, so the first term is exactly 512 and the second 0.
        let encoder = zero_net(512, 64);
        let decoder = bias_net(64, vec![1.0; 512]);
        let features = Matrix::zeros(2, 512);
        let codes = Matrix::zeros(2, 64);
        let out = cycle(&features, &codes, &encoder, &decoder).unwrap();
        assert_eq!(out.value, 512.0);
    }

    #[test]
    fn cycle_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let features = random_matrix(4, 6, &mut rng);
        let codes = random_matrix(4, 3, &mut rng);
        let enc = Mlp::glorot(&[6, 5, 3], Activation::LeakyRelu(0.2), Activation::Identity, &mut rng).unwrap();
        let dec = Mlp::glorot(&[3, 5, 6], Activation::LeakyRelu(0.2), Activation::Identity, &mut rng).unwrap();
        let out = cycle(&features, &codes, &enc, &dec).unwrap();

        let recon = dec.infer(&enc.infer(&features).unwrap()).unwrap();
        let cycled = enc.infer(&dec.infer(&codes).unwrap()).unwrap();
        let b = features.rows() as Real;
        let t1: Real = recon.sub(&features).unwrap().data().iter().map(|v| v.abs()).sum::<Real>() / b;
        let t2: Real = cycled.sub(&codes).unwrap().data().iter().map(|v| v.abs()).sum::<Real>() / b;
        assert!((out.value - (t1 + t2)).abs() < 1e-12);
    }

    #[test]
    fn classification_uniform_logits_give_ln_c() {
        let head = ClassifierHead {
            weight: Matrix::zeros(2, 3),
            bias: vec![0.0; 2],
        };
        let codes = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.25, -0.5]).unwrap();
        let out = classification(&codes, &[0, 1], &head).unwrap();
        assert!((out.value - LN_2).abs() < 1e-12);
    }

    #[test]
    fn classification_saturated_correct_label_is_near_zero() {
        let head = ClassifierHead {
            weight: Matrix::from_vec(2, 1, vec![100.0, 0.0]).unwrap(),
            bias: vec![0.0; 2],
        };
        let codes = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let out = classification(&codes, &[0], &head).unwrap();
        assert!(out.value >= 0.0 && out.value < 1e-10);
    }

    #[test]
    fn classification_matches_independent_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head = ClassifierHead::glorot(4, 3, &mut rng).unwrap();
        let codes = random_matrix(5, 3, &mut rng);
        let labels = [0, 3, 1, 2, 3];
        let out = classification(&codes, &labels, &head).unwrap();

        let logits = head.logits(&codes).unwrap();
        let mut expected = 0.0;
        for i in 0..5 {
            let row = logits.row(i);
            let denom: Real = row.iter().map(|v| v.exp()).sum();
            expected -= (row[labels[i]].exp() / denom).ln();
        }
        expected /= 5.0;
        assert!((out.value - expected).abs() < 1e-10);
    }

    #[test]
    fn classification_rejects_out_of_range_label() {
        let head = ClassifierHead {
            weight: Matrix::zeros(2, 2),
            bias: vec![0.0; 2],
        };
        let codes = Matrix::zeros(1, 2);
        assert!(matches!(classification(&codes, &[2], &head), Err(Error::Validation(_))));
    }

    #[test]
    fn identity_matching_zero_when_aligned() {
        let batch = Batch::new(Matrix::zeros(3, 4), Matrix::zeros(3, 4), Matrix::zeros(3, 4), vec![0; 3]).unwrap();
        let net = identity_net(4);
        let out = identity_matching(&batch, &net, &net, &net, &net).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn identity_matching_unit_code_offset() {
        let d = 6;
        let m = 3;
        let batch = Batch::new(Matrix::zeros(2, d), Matrix::zeros(2, d), Matrix::zeros(2, m), vec![0, 0]).unwrap();
        let mut bias = vec![0.0; m];
        bias[0] = 1.0;
        let enc_sk = bias_net(d, bias);
        let enc_im = zero_net(d, m);
        let dec = zero_net(m, d);
        let out = identity_matching(&batch, &enc_sk, &enc_im, &dec, &dec).unwrap();
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn identity_matching_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(5, 3, 2, false, &mut rng);
        let batch = random_batch(5, 3, 2, 4, &mut rng);
        let out = identity_matching(&batch, &model.enc_sketch, &model.enc_image, &model.dec_sketch, &model.dec_image)
            .unwrap();

        let b = batch.rows() as Real;
        let sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<Real>();
        let code_sk = model.enc_sketch.infer(&batch.sketches).unwrap();
        let code_im = model.enc_image.infer(&batch.images).unwrap();
        let dec_sk = model.dec_sketch.infer(&batch.codes).unwrap();
        let dec_im = model.dec_image.infer(&batch.codes).unwrap();
        let expected = (sq(&code_sk.sub(&code_im).unwrap())
            + sq(&dec_sk.sub(&batch.sketches).unwrap())
            + sq(&dec_im.sub(&batch.images).unwrap()))
            / b;
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn aggregate_zero_model_zero_batch() {
        let d = 4;
        let m = 3;
        let c = 3;
        let model = Model {
            enc_sketch: zero_net(d, m),
            enc_image: zero_net(d, m),
            dec_sketch: zero_net(m, d),
            dec_image: zero_net(m, d),
            critic_semantic: zero_net(m, 1),
            critic_sketch: zero_net(d, 1),
            critic_image: zero_net(d, 1),
            head_sketch: ClassifierHead {
                weight: Matrix::zeros(c, m),
                bias: vec![0.0; c],
            },
            head_image: None,
        };
        model.validate().unwrap();
        let batch = Batch::new(Matrix::zeros(2, d), Matrix::zeros(2, d), Matrix::zeros(2, m), vec![0, 2]).unwrap();
        let report = aggregate(&batch, &model, &LossWeights::default()).unwrap();
        assert_eq!(report.wadv_se, 0.0);
        assert_eq!(report.wadv_sk, 0.0);
        assert_eq!(report.wadv_im, 0.0);
        assert_eq!(report.cyc_sk, 0.0);
        assert_eq!(report.cyc_im, 0.0);
        assert_eq!(report.iml, 0.0);
        let ln_c = (c as Real).ln();
        assert!((report.cls_sk - ln_c).abs() < 1e-12);
        assert!((report.cls_im - ln_c).abs() < 1e-12);
    }

    #[test]
    fn aggregate_total_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_model(5, 3, 2, false, &mut rng);
        let batch = random_batch(5, 3, 2, 3, &mut rng);
        let r = aggregate(&batch, &model, &LossWeights::default()).unwrap();
        let sum = r.wadv_se + r.wadv_sk + r.wadv_im + r.cyc_sk + r.cyc_im + r.cls_sk + r.cls_im + r.iml;
        assert!((r.total - sum).abs() < 1e-12);
        assert!((r.dis_total + (r.wadv_se + r.wadv_sk + r.wadv_im)).abs() < 1e-12);
        // non-negative groups
        assert!(r.cyc_sk >= 0.0 && r.cyc_im >= 0.0 && r.cls_sk >= 0.0 && r.cls_im >= 0.0 && r.iml >= 0.0);
    }

    #[test]
    fn generator_phase_report_agrees_with_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let weights = LossWeights {
            adversarial: 0.7,
            cycle: 1.3,
            classification: 0.5,
            identity: 2.0,
        };
        for _ in 0..3 {
            let model = random_model(6, 4, 3, false, &mut rng);
            let batch = random_batch(6, 4, 3, 4, &mut rng);
            let via_ops = aggregate(&batch, &model, &weights).unwrap();
            let fused = generator_phase(&batch, &model, &weights).unwrap().report;
            for (a, b) in [
                (via_ops.wadv_se, fused.wadv_se),
                (via_ops.wadv_sk, fused.wadv_sk),
                (via_ops.wadv_im, fused.wadv_im),
                (via_ops.cyc_sk, fused.cyc_sk),
                (via_ops.cyc_im, fused.cyc_im),
                (via_ops.cls_sk, fused.cls_sk),
                (via_ops.cls_im, fused.cls_im),
                (via_ops.iml, fused.iml),
                (via_ops.total, fused.total),
                (via_ops.dis_total, fused.dis_total),
                (via_ops.ps_total, fused.ps_total),
            ] {
                assert!((a - b).abs() < 1e-12, "aggregate={a} fused={b}");
            }
        }
    }

    #[test]
    fn branch_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = random_model(5, 3, 2, false, &mut rng);
        let batch = random_batch(5, 3, 2, 4, &mut rng);
        let swapped_model = Model {
            enc_sketch: model.enc_image.clone(),
            enc_image: model.enc_sketch.clone(),
            dec_sketch: model.dec_image.clone(),
            dec_image: model.dec_sketch.clone(),
            critic_semantic: model.critic_semantic.clone(),
            critic_sketch: model.critic_image.clone(),
            critic_image: model.critic_sketch.clone(),
            head_sketch: model.head_sketch.clone(),
            head_image: None,
        };
        let swapped_batch = Batch::new(
            batch.images.clone(),
            batch.sketches.clone(),
            batch.codes.clone(),
            batch.labels.clone(),
        )
        .unwrap();
        let a = aggregate(&batch, &model, &LossWeights::default()).unwrap();
        let b = aggregate(&swapped_batch, &swapped_model, &LossWeights::default()).unwrap();
        assert!((a.wadv_sk - b.wadv_im).abs() < 1e-12);
        assert!((a.wadv_im - b.wadv_sk).abs() < 1e-12);
        assert!((a.cyc_sk - b.cyc_im).abs() < 1e-12);
        assert!((a.cyc_im - b.cyc_sk).abs() < 1e-12);
        assert!((a.cls_sk - b.cls_im).abs() < 1e-12);
        assert!((a.cls_im - b.cls_sk).abs() < 1e-12);
        assert!((a.iml - b.iml).abs() < 1e-12);
        assert!((a.wadv_se - b.wadv_se).abs() < 1e-12);
    }

    fn fd_check(analytic: Real, numeric: Real, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            ((analytic - numeric) / denom).abs() < 1e-4,
            "{what}: analytic={analytic} numeric={numeric}"
        );
    }

    /// Smallest |entry| across the four L1 cycle residuals. Finite
    /// differences are only meaningful away from the |.| kinks, so the FD
    /// tests skip instances without margin.
    fn l1_margin(model: &Model, batch: &Batch) -> Real {
        let mut margin = Real::INFINITY;
        let mut visit = |m: &Matrix| {
            for v in m.data() {
                margin = margin.min(v.abs());
            }
        };
        let recon_sk = model.dec_sketch.infer(&model.enc_sketch.infer(&batch.sketches).unwrap()).unwrap();
        let recon_im = model.dec_image.infer(&model.enc_image.infer(&batch.images).unwrap()).unwrap();
        let cyc_sk = model.enc_sketch.infer(&model.dec_sketch.infer(&batch.codes).unwrap()).unwrap();
        let cyc_im = model.enc_image.infer(&model.dec_image.infer(&batch.codes).unwrap()).unwrap();
        visit(&recon_sk.sub(&batch.sketches).unwrap());
        visit(&recon_im.sub(&batch.images).unwrap());
        visit(&cyc_sk.sub(&batch.codes).unwrap());
        visit(&cyc_im.sub(&batch.codes).unwrap());
        margin
    }

    #[test]
    fn critic_phase_gradients_match_finite_differences() {
        let h: Real = 1e-5;
        let weights = LossWeights::default();
        for seed in 20..24u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = random_model_with(5, 3, 2, false, Activation::Tanh, &mut rng);
            let batch = random_batch(5, 3, 2, 3, &mut rng);
            let phase = critic_phase(&batch, &model, &weights).unwrap();

            let nets: [(&str, Vec<Vec<Real>>); 3] = [
                ("semantic", phase.critic_semantic.slices().iter().map(|s| s.to_vec()).collect()),
                ("sketch", phase.critic_sketch.slices().iter().map(|s| s.to_vec()).collect()),
                ("image", phase.critic_image.slices().iter().map(|s| s.to_vec()).collect()),
            ];
            for (name, grads) in nets {
                let n_slots = grads.len();
                for slot in 0..n_slots {
                    for i in 0..grads[slot].len() {
                        let with = |model: &mut Model, delta: Real| -> Real {
                            let net = match name {
                                "semantic" => &mut model.critic_semantic,
                                "sketch" => &mut model.critic_sketch,
                                _ => &mut model.critic_image,
                            };
                            let orig = net.params()[slot][i];
                            net.params_mut()[slot][i] = orig + delta;
                            let v = critic_phase(&batch, model, &weights).unwrap().dis_total;
                            let net = match name {
                                "semantic" => &mut model.critic_semantic,
                                "sketch" => &mut model.critic_sketch,
                                _ => &mut model.critic_image,
                            };
                            net.params_mut()[slot][i] = orig;
                            v
                        };
                        let up = with(&mut model, h);
                        let down = with(&mut model, -h);
                        fd_check(grads[slot][i], (up - down) / (2.0 * h), &format!("{name}[{slot}][{i}]"));
                    }
                }
            }
        }
    }

    #[test]
    fn generator_phase_gradients_match_finite_differences() {
        let h: Real = 1e-5;
        let weights = LossWeights {
            adversarial: 1.0,
            cycle: 0.8,
            classification: 1.2,
            identity: 0.6,
        };
        let mut checked = 0;
        for seed in 30..60u64 {
            if checked == 3 {
                break;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = random_model_with(5, 3, 2, false, Activation::Tanh, &mut rng);
            let batch = random_batch(5, 3, 2, 3, &mut rng);
            if l1_margin(&model, &batch) < 1e-3 {
                continue;
            }
            checked += 1;
            let phase = generator_phase(&batch, &model, &weights).unwrap();

            let grad_sets: Vec<(&str, Vec<Vec<Real>>)> = vec![
                ("enc_sketch", phase.enc_sketch.slices().iter().map(|s| s.to_vec()).collect()),
                ("enc_image", phase.enc_image.slices().iter().map(|s| s.to_vec()).collect()),
                ("dec_sketch", phase.dec_sketch.slices().iter().map(|s| s.to_vec()).collect()),
                ("dec_image", phase.dec_image.slices().iter().map(|s| s.to_vec()).collect()),
                ("head", phase.head_sketch.slices().iter().map(|s| s.to_vec()).collect()),
            ];
            for (name, grads) in grad_sets {
                for slot in 0..grads.len() {
                    for i in 0..grads[slot].len() {
                        let mut with = |delta: Real| -> Real {
                            {
                                let slots: Vec<&mut [Real]> = match name {
                                    "enc_sketch" => model.enc_sketch.params_mut(),
                                    "enc_image" => model.enc_image.params_mut(),
                                    "dec_sketch" => model.dec_sketch.params_mut(),
                                    "dec_image" => model.dec_image.params_mut(),
                                    _ => model.head_sketch.params_mut(),
                                };
                                slots.into_iter().nth(slot).unwrap()[i] += delta;
                            }
                            generator_phase(&batch, &model, &weights).unwrap().report.ps_total
                        };
                        let up = with(h);
                        let down = with(-2.0 * h);
                        let _ = with(h); // restore
                        fd_check(grads[slot][i], (up - down) / (2.0 * h), &format!("{name}[{slot}][{i}]"));
                    }
                }
            }
        }
        assert_eq!(checked, 3, "not enough kink-free instances among the seeds");
    }

    /// The fused phase must assemble exactly the gradient that composing
    /// the individual ops produces.
    #[test]
    fn generator_phase_matches_composed_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let weights = LossWeights {
            adversarial: 1.0,
            cycle: 0.8,
            classification: 1.2,
            identity: 0.6,
        };
        let model = random_model(5, 3, 2, false, &mut rng);
        let batch = random_batch(5, 3, 2, 3, &mut rng);
        let phase = generator_phase(&batch, &model, &weights).unwrap();

        let sem = adversarial_semantic(&batch, &model.enc_sketch, &model.enc_image, &model.critic_semantic).unwrap();
        let cyc_sk = cycle(&batch.sketches, &batch.codes, &model.enc_sketch, &model.dec_sketch).unwrap();
        let iml = identity_matching(&batch, &model.enc_sketch, &model.enc_image, &model.dec_sketch, &model.dec_image)
            .unwrap();
        let (code_sk, t_enc) = model.enc_sketch.forward(&batch.sketches).unwrap();
        let cls = classification(&code_sk, &batch.labels, &model.head_sketch).unwrap();
        let (cls_enc, _) = model
            .enc_sketch
            .backward(&t_enc, &scaled(&cls.codes_grad, weights.classification))
            .unwrap();

        let mut composed = sem.enc_sketch;
        composed.scale(weights.adversarial);
        let mut cyc_part = cyc_sk.encoder;
        cyc_part.scale(weights.cycle);
        composed.add_assign(&cyc_part).unwrap();
        let mut iml_part = iml.enc_sketch;
        iml_part.scale(weights.identity);
        composed.add_assign(&iml_part).unwrap();
        composed.add_assign(&cls_enc).unwrap();

        for (a, b) in phase.enc_sketch.slices().iter().zip(composed.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "fused={x} composed={y}");
            }
        }
    }

    #[test]
    fn per_branch_head_gets_separate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let model = random_model(5, 3, 2, true, &mut rng);
        let batch = random_batch(5, 3, 2, 3, &mut rng);
        let phase = generator_phase(&batch, &model, &LossWeights::default()).unwrap();
        let image_grads = phase.head_image.expect("per-branch head grads");
        // the image head's gradient reflects only the image branch; it is
        // not the sketch head's gradient
        assert_ne!(image_grads.weight, phase.head_sketch.weight);
    }
}
