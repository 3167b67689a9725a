//! The supervised Anomaly Transformer.
//!
//! Each of the four encoder layers computes two association structures over
//! the window's positions:
//!
//! * the **series association** `S = softmax(QKᵀ/√d_model)` — note the scale
//!   is √d_model even though heads attend in d_model/n_heads dimensions;
//! * the **prior association** `P`, a row-normalized Gaussian kernel
//!   `exp(−(j−i)²/(2σ_i²))` whose per-position, per-head widths σ come from a
//!   learned affine projection of the layer input, mapped through
//!   softplus + 1e-3 and capped at the sequence length.
//!
//! Value mixing is `S·V`, followed by the usual output projection, post-norm
//! residual, and feedforward. A per-position affine + sigmoid head emits
//! probabilities; the segment's prediction is the **last** position's value,
//! matching the C-LSTM's last-chunk contract.
//!
//! Training alternates two phases per batch (minimax over the association
//! discrepancy `AD(P,S)` = per-position symmetric KL averaged over layers):
//!
//! * minimize: `MSE(probs, labels) + λ·mean(AD(P, stop(S)))` — the prior
//!   chases the (frozen) series association while MSE moves the series paths
//!   toward the labels;
//! * maximize: `MSE(probs, labels) − λ·mean(AD(stop(P), S))` — the series
//!   association is pushed away from the strictly local prior.
//!
//! With the default geometry (d_model 64, 4 heads, d_ff 128) the model has
//! 136,017 learnable parameters; the figure published for the original ran
//! to 155,665 with hyperparameters that were never stated, so the count is
//! reported, not asserted.

use crate::ingest::FEATURE_COUNT;
use crate::nn::gradcheck::{grad_check_param, GradCheckReport};
use crate::nn::ops;
use crate::nn::{Adam, BoundParams, NnError, ParamSet, Tensor, Var};

use super::clstm::spread_coords;
use super::uniform_init;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomTransConfig {
    pub seq_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Weight of the association-discrepancy term in both phase losses.
    pub lambda: f64,
    /// Output width of the affine head. Only 1 is supported.
    pub head_out: usize,
}

impl Default for AnomTransConfig {
    fn default() -> Self {
        AnomTransConfig {
            seq_len: 15,
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            lambda: 1e-4,
            head_out: 1,
        }
    }
}

impl AnomTransConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let fields = [
            ("seq_len", self.seq_len),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NnError::InvalidArg(format!("anomaly_transformer.{name} must be ≥ 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NnError::InvalidArg(format!(
                "anomaly_transformer.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(NnError::InvalidArg(format!(
                "anomaly_transformer.lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.head_out != 1 {
            return Err(NnError::InvalidArg(
                "anomaly_transformer.head_out must be 1: the detector emits a single probability"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Forward-pass products: per-segment probabilities plus every layer's
/// association pair (needed by both phase losses).
pub struct AtOutput {
    /// `[batch]` — the last position's probability per segment.
    pub probs: Var,
    /// `[batch, seq_len]` — every position's probability.
    pub probs_all: Var,
    /// Per layer: series association `[batch, n_heads, N, N]`.
    pub s_layers: Vec<Var>,
    /// Per layer: prior association `[batch, n_heads, N, N]`.
    pub p_layers: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct AnomalyTransformer {
    pub cfg: AnomTransConfig,
    pub params: ParamSet,
}

impl AnomalyTransformer {
    pub fn init(cfg: &AnomTransConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let (d, h, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
        let mut params = ParamSet::new();
        let linear_pair = |params: &mut ParamSet,
                               name: String,
                               out_w: usize,
                               fan_in: usize|
         -> Result<(), NnError> {
            params.insert(
                format!("{name}.weight"),
                uniform_init(seed, &format!("{name}.weight"), vec![out_w, fan_in], fan_in),
            )?;
            params.insert(
                format!("{name}.bias"),
                uniform_init(seed, &format!("{name}.bias"), vec![out_w], fan_in),
            )?;
            Ok(())
        };

        linear_pair(&mut params, "embed".into(), d, FEATURE_COUNT)?;
        for l in 0..cfg.n_layers {
            linear_pair(&mut params, format!("layer{l}.q"), d, d)?;
            linear_pair(&mut params, format!("layer{l}.k"), d, d)?;
            linear_pair(&mut params, format!("layer{l}.v"), d, d)?;
            linear_pair(&mut params, format!("layer{l}.sigma"), h, d)?;
            linear_pair(&mut params, format!("layer{l}.out"), d, d)?;
            params.insert(format!("layer{l}.ln1.gamma"), Tensor::full(vec![d], 1.0))?;
            params.insert(format!("layer{l}.ln1.beta"), Tensor::zeros(vec![d]))?;
            linear_pair(&mut params, format!("layer{l}.ff1"), ff, d)?;
            linear_pair(&mut params, format!("layer{l}.ff2"), d, ff)?;
            params.insert(format!("layer{l}.ln2.gamma"), Tensor::full(vec![d], 1.0))?;
            params.insert(format!("layer{l}.ln2.beta"), Tensor::zeros(vec![d]))?;
        }
        linear_pair(&mut params, "head".into(), cfg.head_out, d)?;
        Ok(AnomalyTransformer { cfg: cfg.clone(), params })
    }

    /// Forward pass on `[batch, seq_len, 15]`.
    pub fn forward(&self, x: &Tensor, trainable: bool) -> Result<(AtOutput, BoundParams), NnError> {
        let bound = self.params.bind(trainable);
        let out = forward_with(&self.cfg, &bound, x)?;
        Ok((out, bound))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        let (out, _) = self.forward(x, false)?;
        Ok(out.probs.value().data().to_vec())
    }

    /// One minimax round: a gradient step on the minimize-phase loss, a
    /// fresh forward pass, then a step on the maximize-phase loss. Returns
    /// `(loss_min, loss_max)`.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[f64],
        opt: &mut Adam,
    ) -> Result<(f64, f64), NnError> {
        let lambda = self.cfg.lambda;

        let (out, bound) = self.forward(x, true)?;
        let loss_min = min_phase_loss(&out, labels, lambda)?;
        let min_value = loss_min.value().item()?;
        loss_min.backward()?;
        opt.step(&mut self.params, &bound.grads())?;

        let (out, bound) = self.forward(x, true)?;
        let loss_max = max_phase_loss(&out, labels, lambda)?;
        let max_value = loss_max.value().item()?;
        loss_max.backward()?;
        opt.step(&mut self.params, &bound.grads())?;

        Ok((min_value, max_value))
    }

    /// Finite-difference check of both phase-loss gradients for every
    /// parameter.
    ///
    /// A central difference cannot probe through a gradient stop — numeric
    /// perturbation would see the stopped path move. So the check freezes
    /// the stopped association at its base-point value and differentiates
    /// the resulting function, which has the same analytic gradient the
    /// training step uses.
    pub fn gradient_check(
        &self,
        x: &Tensor,
        labels: &[f64],
        coords_per_param: usize,
        eps: f64,
    ) -> Result<GradCheckReport, NnError> {
        let (base, _) = self.forward(x, false)?;
        let frozen_s: Vec<Tensor> = base.s_layers.iter().map(|v| v.value().clone()).collect();
        let frozen_p: Vec<Tensor> = base.p_layers.iter().map(|v| v.value().clone()).collect();
        let lambda = self.cfg.lambda;
        let n_layers = self.cfg.n_layers as f64;

        let mut worst = GradCheckReport::default();
        for min_phase in [true, false] {
            for (name, tensor) in self.params.iter() {
                let coords = spread_coords(tensor.numel(), coords_per_param);
                let cfg = self.cfg.clone();
                let (frozen_s, frozen_p) = (frozen_s.clone(), frozen_p.clone());
                let report = grad_check_param(
                    |bound| {
                        let out = forward_with(&cfg, bound, x)?;
                        let mse = ops::mse_loss(&out.probs, labels)?;
                        let mut ad: Option<Var> = None;
                        for l in 0..out.p_layers.len() {
                            let skl = if min_phase {
                                ops::skl_rows(
                                    &out.p_layers[l],
                                    &Var::constant(frozen_s[l].clone()),
                                )?
                            } else {
                                ops::skl_rows(
                                    &Var::constant(frozen_p[l].clone()),
                                    &out.s_layers[l],
                                )?
                            };
                            let m = ops::mean_all(&skl);
                            ad = Some(match ad {
                                Some(t) => ops::add(&t, &m)?,
                                None => m,
                            });
                        }
                        let ad = ops::scale(&ad.unwrap(), 1.0 / n_layers);
                        if min_phase {
                            ops::add(&mse, &ops::scale(&ad, lambda))
                        } else {
                            ops::sub(&mse, &ops::scale(&ad, lambda))
                        }
                    },
                    &self.params,
                    name,
                    &coords,
                    eps,
                )?;
                worst.merge(&report);
            }
        }
        Ok(worst)
    }
}

/// The architecture itself, applied to an arbitrary parameter binding.
fn forward_with(
    cfg: &AnomTransConfig,
    bound: &BoundParams,
    x: &Tensor,
) -> Result<AtOutput, NnError> {
    if x.rank() != 3 || x.shape()[1] != cfg.seq_len || x.shape()[2] != FEATURE_COUNT {
        return Err(NnError::ShapeMismatch {
            expected: format!("[batch, {}, {FEATURE_COUNT}]", cfg.seq_len),
            got: format!("{:?}", x.shape()),
        });
    }
    let (b, n) = (x.shape()[0], cfg.seq_len);
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let lin = |x: &Var, name: &str| {
        ops::linear(
            x,
            bound.var(&format!("{name}.weight")),
            Some(bound.var(&format!("{name}.bias"))),
        )
    };

    let mut z = lin(&Var::constant(x.clone()), "embed")?; // [B, N, d]
    let mut s_layers = Vec::with_capacity(cfg.n_layers);
    let mut p_layers = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let name = |part: &str| format!("layer{l}.{part}");

        // Heads: [B, N, d] → [B, N, H, dh] → [B, H, N, dh].
        let split = |t: &Var| -> Result<Var, NnError> {
            ops::permute4_0213(&ops::reshape(t, vec![b, n, heads, dh])?)
        };
        let q = split(&lin(&z, &name("q"))?)?;
        let k = split(&lin(&z, &name("k"))?)?;
        let v = split(&lin(&z, &name("v"))?)?;

        // The published scale is √d_model, not √d_head.
        let scores = ops::scale(&ops::bmm_nt(&q, &k)?, 1.0 / (d as f64).sqrt());
        let s = ops::softmax_last(&scores); // [B, H, N, N]

        let sigma_raw = ops::permute3_021(&lin(&z, &name("sigma"))?)?; // [B, H, N]
        let sigma = ops::sigma_transform(&sigma_raw, n as f64)?;
        let p = ops::prior_assoc(&sigma)?; // [B, H, N, N]

        let mixed = ops::bmm(&s, &v)?; // [B, H, N, dh]
        let merged = ops::reshape(&ops::permute4_0213(&mixed)?, vec![b, n, d])?;
        let attn = lin(&merged, &name("out"))?;

        let z1 = ops::layer_norm(
            &ops::add(&z, &attn)?,
            bound.var(&name("ln1.gamma")),
            bound.var(&name("ln1.beta")),
            1e-5,
        )?;
        let ff = lin(&ops::relu(&lin(&z1, &name("ff1"))?), &name("ff2"))?;
        z = ops::layer_norm(
            &ops::add(&z1, &ff)?,
            bound.var(&name("ln2.gamma")),
            bound.var(&name("ln2.beta")),
            1e-5,
        )?;

        s_layers.push(s);
        p_layers.push(p);
    }

    let logits = lin(&z, "head")?; // [B, N, 1]
    let probs_all = ops::sigmoid(&ops::reshape(&logits, vec![b, n])?);
    let probs = ops::reshape(&ops::slice_last(&probs_all, n - 1, 1)?, vec![b])?;
    Ok(AtOutput { probs, probs_all, s_layers, p_layers })
}

/// Mean association discrepancy as a graph node: per-position symmetric KL
/// between prior and series rows, averaged over layers, batch, heads, and
/// positions. The `detach_*` flags place the gradient stops for the two
/// training phases.
fn mean_ad(
    p_layers: &[Var],
    s_layers: &[Var],
    detach_p: bool,
    detach_s: bool,
) -> Result<Var, NnError> {
    debug_assert_eq!(p_layers.len(), s_layers.len());
    let mut total: Option<Var> = None;
    for (p, s) in p_layers.iter().zip(s_layers) {
        let p = if detach_p { p.detach() } else { p.clone() };
        let s = if detach_s { s.detach() } else { s.clone() };
        let layer_mean = ops::mean_all(&ops::skl_rows(&p, &s)?);
        total = Some(match total {
            Some(t) => ops::add(&t, &layer_mean)?,
            None => layer_mean,
        });
    }
    let total = total.ok_or_else(|| NnError::InvalidArg("no layers in AD".into()))?;
    Ok(ops::scale(&total, 1.0 / p_layers.len() as f64))
}

/// Minimize-phase loss: `MSE + λ·mean(AD(P, stop(S)))`. Gradient reaches the
/// σ projections through AD, but no series-association producer.
pub fn min_phase_loss(out: &AtOutput, labels: &[f64], lambda: f64) -> Result<Var, NnError> {
    let mse = ops::mse_loss(&out.probs, labels)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let ad = mean_ad(&out.p_layers, &out.s_layers, false, true)?;
    ops::add(&mse, &ops::scale(&ad, lambda))
}

/// Maximize-phase loss: `MSE − λ·mean(AD(stop(P), S))`. Gradient reaches the
/// series-association producers through AD, but no σ projection.
pub fn max_phase_loss(out: &AtOutput, labels: &[f64], lambda: f64) -> Result<Var, NnError> {
    let mse = ops::mse_loss(&out.probs, labels)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let ad = mean_ad(&out.p_layers, &out.s_layers, true, false)?;
    ops::sub(&mse, &ops::scale(&ad, lambda))
}

/// Per-position association discrepancy on plain (unbatched) layer stacks:
/// `AD(i) = (1/L) Σ_l SKL(P^l row i, S^l row i)`. The loss terms use the
/// graph-node equivalent; this form exists for invariant checks.
pub fn association_discrepancy(
    p_layers: &[Tensor],
    s_layers: &[Tensor],
) -> Result<Vec<f64>, NnError> {
    if p_layers.len() != s_layers.len() || p_layers.is_empty() {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} prior layers", s_layers.len().max(1)),
            got: format!("{}", p_layers.len()),
        });
    }
    let shape = p_layers[0].shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(NnError::ShapeMismatch {
            expected: "[N, N] layers".into(),
            got: format!("{shape:?}"),
        });
    }
    let n = shape[0];
    let mut ad = vec![0.0; n];
    for (p, s) in p_layers.iter().zip(s_layers) {
        if p.shape() != shape || s.shape() != shape {
            return Err(NnError::ShapeMismatch {
                expected: format!("{shape:?} for every layer"),
                got: format!("{:?} vs {:?}", p.shape(), s.shape()),
            });
        }
        for i in 0..n {
            let prow = &p.data()[i * n..(i + 1) * n];
            let srow = &s.data()[i * n..(i + 1) * n];
            ad[i] += ops::symmetric_kl(prow, srow)?;
        }
    }
    let scale = 1.0 / p_layers.len() as f64;
    for v in &mut ad {
        *v *= scale;
    }
    Ok(ad)
}
