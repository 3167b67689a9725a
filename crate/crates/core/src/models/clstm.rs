//! The C-LSTM detector.
//!
//! Pipeline: 1-D convolution over the time axis (the 15 features are input
//! channels, kernel 3, stride 1, valid padding) → ReLU → max-pool (kernel 2,
//! stride 1) → one LSTM layer → affine on the final hidden state → sigmoid.
//! With the default widths (conv 15→350, LSTM 350→350, head 350→1) the model
//! has exactly 997,851 learnable parameters:
//!
//! ```text
//! conv  3·15·350 + 350       =  16,100
//! lstm  4·(350·700 + 350)    = 981,400   (one bias vector per gate)
//! head  350 + 1              =     351
//! ```

use crate::nn::gradcheck::{grad_check_param, GradCheckReport};
use crate::nn::ops;
use crate::nn::{Adam, BoundParams, NnError, ParamSet, Tensor, Var};

use super::uniform_init;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CLstmConfig {
    pub input_width: usize,
    pub conv_out: usize,
    pub conv_k: usize,
    pub conv_stride: usize,
    pub pool_k: usize,
    pub pool_stride: usize,
    pub lstm_hidden: usize,
    /// Output width of the affine head. Only 1 is supported — the field
    /// exists so configs state the full geometry explicitly.
    pub head_out: usize,
}

impl Default for CLstmConfig {
    fn default() -> Self {
        CLstmConfig {
            input_width: 15,
            conv_out: 350,
            conv_k: 3,
            conv_stride: 1,
            pool_k: 2,
            pool_stride: 1,
            lstm_hidden: 350,
            head_out: 1,
        }
    }
}

impl CLstmConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let fields = [
            ("input_width", self.input_width),
            ("conv_out", self.conv_out),
            ("conv_k", self.conv_k),
            ("conv_stride", self.conv_stride),
            ("pool_k", self.pool_k),
            ("pool_stride", self.pool_stride),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NnError::InvalidArg(format!("clstm.{name} must be ≥ 1")));
            }
        }
        if self.head_out != 1 {
            return Err(NnError::InvalidArg(
                "clstm.head_out must be 1: the detector emits a single probability".into(),
            ));
        }
        Ok(())
    }

    /// Shortest segment the conv/pool stack accepts.
    pub fn min_seg_len(&self) -> usize {
        self.conv_k + self.pool_k - 1
    }
}

#[derive(Clone, Debug)]
pub struct CLstm {
    pub cfg: CLstmConfig,
    pub params: ParamSet,
}

impl CLstm {
    pub fn init(cfg: &CLstmConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let (ci, co, k, h) = (cfg.input_width, cfg.conv_out, cfg.conv_k, cfg.lstm_hidden);
        let mut params = ParamSet::new();
        params.insert("conv.weight", uniform_init(seed, "conv.weight", vec![co, ci, k], ci * k))?;
        params.insert("conv.bias", uniform_init(seed, "conv.bias", vec![co], ci * k))?;
        params.insert("lstm.w", uniform_init(seed, "lstm.w", vec![4 * h, co], h))?;
        params.insert("lstm.u", uniform_init(seed, "lstm.u", vec![4 * h, h], h))?;
        params.insert("lstm.b", uniform_init(seed, "lstm.b", vec![4 * h], h))?;
        params.insert("head.weight", uniform_init(seed, "head.weight", vec![cfg.head_out, h], h))?;
        params.insert("head.bias", uniform_init(seed, "head.bias", vec![cfg.head_out], h))?;
        Ok(CLstm { cfg: cfg.clone(), params })
    }

    /// Forward pass on `[batch, seg_len, 15]`. Returns per-segment pump
    /// probabilities `[batch]` and the bound parameters (so callers can pull
    /// gradients after `backward`).
    pub fn forward(&self, x: &Tensor, trainable: bool) -> Result<(Var, BoundParams), NnError> {
        let bound = self.params.bind(trainable);
        let probs = forward_with(&self.cfg, &bound, x)?;
        Ok((probs, bound))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        let (probs, _) = self.forward(x, false)?;
        Ok(probs.value().data().to_vec())
    }

    /// One BCE gradient step. Returns the batch loss.
    pub fn train_batch(
        &mut self,
        x: &Tensor,
        labels: &[f64],
        opt: &mut Adam,
    ) -> Result<f64, NnError> {
        let (probs, bound) = self.forward(x, true)?;
        let loss = ops::bce_loss(&probs, labels)?;
        let loss_value = loss.value().item()?;
        loss.backward()?;
        opt.step(&mut self.params, &bound.grads())?;
        Ok(loss_value)
    }

    /// Finite-difference check of the BCE loss gradient for every parameter,
    /// probing `coords_per_param` evenly spread coordinates each.
    pub fn gradient_check(
        &self,
        x: &Tensor,
        labels: &[f64],
        coords_per_param: usize,
        eps: f64,
    ) -> Result<GradCheckReport, NnError> {
        let mut worst = GradCheckReport::default();
        for (name, tensor) in self.params.iter() {
            let coords = spread_coords(tensor.numel(), coords_per_param);
            let cfg = self.cfg.clone();
            let report = grad_check_param(
                |bound| {
                    let probs = forward_with(&cfg, bound, x)?;
                    ops::bce_loss(&probs, labels)
                },
                &self.params,
                name,
                &coords,
                eps,
            )?;
            worst.merge(&report);
        }
        Ok(worst)
    }
}

/// The architecture itself, applied to an arbitrary parameter binding.
fn forward_with(cfg: &CLstmConfig, bound: &BoundParams, x: &Tensor) -> Result<Var, NnError> {
    if x.rank() != 3 || x.shape()[2] != cfg.input_width {
        return Err(NnError::ShapeMismatch {
            expected: format!("[batch, seg_len, {}]", cfg.input_width),
            got: format!("{:?}", x.shape()),
        });
    }
    let batch = x.shape()[0];

    // [B, s, 15] → [B, 15, s]: features become conv channels.
    let xin = ops::permute3_021(&Var::constant(x.clone()))?;
    let conv = ops::conv1d(&xin, bound.var("conv.weight"), bound.var("conv.bias"), cfg.conv_stride)?;
    let pooled = ops::maxpool1d(&ops::relu(&conv), cfg.pool_k, cfg.pool_stride)?;

    let steps = pooled.shape()[2];
    let mut xs = Vec::with_capacity(steps);
    for t in 0..steps {
        let col = ops::slice_last(&pooled, t, 1)?;
        xs.push(ops::reshape(&col, vec![batch, cfg.conv_out])?);
    }
    let h = cfg.lstm_hidden;
    let h0 = Var::constant(Tensor::zeros(vec![batch, h]));
    let c0 = Var::constant(Tensor::zeros(vec![batch, h]));
    let (_, h_last, _) = ops::lstm_forward(
        &xs,
        bound.var("lstm.w"),
        bound.var("lstm.u"),
        bound.var("lstm.b"),
        &h0,
        &c0,
    )?;

    let logits = ops::linear(&h_last, bound.var("head.weight"), Some(bound.var("head.bias")))?;
    ops::reshape(&logits, vec![batch]).map(|l| ops::sigmoid(&l))
}

/// `k` coordinates spread evenly across `n` elements (all of them if n ≤ k).
pub(crate) fn spread_coords(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut coords: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    coords.dedup();
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use crate::seed::substream;
    use rand::Rng;

    fn random_batch(b: usize, s: usize, width: usize, name: &str) -> Tensor {
        let mut rng = substream(17, name);
        let data = (0..b * s * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, s, width], data).unwrap()
    }

    #[test]
    fn default_config_has_exactly_997_851_parameters() {
        let model = CLstm::init(&CLstmConfig::default(), 0).unwrap();
        assert_eq!(model.params.param_count(), 997_851);
    }

    #[test]
    fn parameter_count_decomposes_as_documented() {
        let model = CLstm::init(&CLstmConfig::default(), 0).unwrap();
        let numel = |name: &str| model.params.get(name).unwrap().numel();
        assert_eq!(numel("conv.weight") + numel("conv.bias"), 16_100);
        assert_eq!(numel("lstm.w") + numel("lstm.u") + numel("lstm.b"), 981_400);
        assert_eq!(numel("head.weight") + numel("head.bias"), 351);
    }

    #[test]
    fn outputs_live_strictly_inside_the_unit_interval() {
        let cfg = CLstmConfig { conv_out: 8, lstm_hidden: 6, ..Default::default() };
        let model = CLstm::init(&cfg, 3).unwrap();
        let x = random_batch(4, 15, 15, "clstm/unit");
        let probs = model.predict(&x).unwrap();
        assert_eq!(probs.len(), 4);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_parameters_give_exactly_one_half() {
        let cfg = CLstmConfig { conv_out: 4, lstm_hidden: 3, ..Default::default() };
        let mut model = CLstm::init(&cfg, 0).unwrap();
        for (_, tensor) in model.params.iter_mut() {
            for v in tensor.data_mut() {
                *v = 0.0;
            }
        }
        let probs = model.predict(&random_batch(3, 15, 15, "clstm/zero")).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn internal_sequence_lengths_for_default_geometry() {
        // s=15 → conv(k=3) gives 13, pool(k=2) gives 12. Observable through
        // the minimum segment length: s = 4 is accepted, s = 3 is not.
        let cfg = CLstmConfig { conv_out: 2, lstm_hidden: 2, ..Default::default() };
        assert_eq!(cfg.min_seg_len(), 4);
        let model = CLstm::init(&cfg, 1).unwrap();
        assert!(model.predict(&random_batch(1, 4, 15, "clstm/min")).is_ok());
        assert!(matches!(
            model.predict(&random_batch(1, 3, 15, "clstm/short")),
            Err(NnError::SegmentTooShort(_))
        ));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = CLstmConfig { conv_out: 6, lstm_hidden: 5, ..Default::default() };
        let model = CLstm::init(&cfg, 9).unwrap();
        let x = random_batch(3, 15, 15, "clstm/perm");
        let probs = model.predict(&x).unwrap();
        // Reverse the batch.
        let row = 15 * 15;
        let mut rev = Vec::with_capacity(x.numel());
        for b in (0..3).rev() {
            rev.extend_from_slice(&x.data()[b * row..(b + 1) * row]);
        }
        let rev_probs = model.predict(&Tensor::new(vec![3, 15, 15], rev).unwrap()).unwrap();
        assert_eq!(probs[0], rev_probs[2]);
        assert_eq!(probs[1], rev_probs[1]);
        assert_eq!(probs[2], rev_probs[0]);
    }

    #[test]
    fn training_reduces_loss_on_a_toy_problem() {
        let cfg = CLstmConfig { conv_out: 6, lstm_hidden: 5, ..Default::default() };
        let mut model = CLstm::init(&cfg, 7).unwrap();
        // Two separable classes: constant-high vs constant-low windows.
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let v = if i % 2 == 0 { 1.5 } else { -1.5 };
            data.extend(std::iter::repeat_n(v, 15 * 15));
            labels.push(f64::from(i % 2 == 0));
        }
        let x = Tensor::new(vec![6, 15, 15], data).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2));
        let first = model.train_batch(&x, &labels, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = model.train_batch(&x, &labels, &mut opt).unwrap();
        }
        assert!(last < first * 0.5, "loss {first} → {last}");
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = CLstmConfig { conv_out: 5, lstm_hidden: 4, ..Default::default() };
        let model = CLstm::init(&cfg, 13).unwrap();
        let x = random_batch(2, 8, 15, "clstm/gradcheck");
        let report = model.gradient_check(&x, &[1.0, 0.0], 6, 1e-5).unwrap();
        assert!(report.max_rel_diff < 1e-4, "rel diff {}", report.max_rel_diff);
        assert!(report.coords_checked > 30);
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let cfg = CLstmConfig { conv_out: 2, lstm_hidden: 2, ..Default::default() };
        let model = CLstm::init(&cfg, 0).unwrap();
        let x = random_batch(1, 15, 14, "clstm/width");
        assert!(matches!(model.predict(&x), Err(NnError::ShapeMismatch { .. })));
    }
}
