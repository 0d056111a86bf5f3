//! Masking, losses, the Adam optimizer and the training loops: continued MLM
//! pretraining, pretraining after vocabulary augmentation, joint
//! generator/discriminator pretraining from scratch, and `[CLS]` fine-tuning
//! with best-validation model selection.

mod loops;
mod losses;
mod masking;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, Model};
use crate::{Error, Result};

pub use loops::{
    accuracy, detection_accuracy, finetune, finetune_records, finetune_with_validator, generator_config, pretrain_electra, pretrain_mlm,
    pretrain_with_augmented_vocab, replaced_token_accuracy, select_best_epoch, AugmentedPretraining,
    DetectionAccuracy, ElectraOutcome, LabeledSeq,
};
pub use losses::{
    binary_cross_entropy, classification_loss, discriminator_loss, electra_loss, mlm_loss, mlm_loss_value,
    perplexity, ElectraLoss,
};
pub use masking::{mask_tokens, Masked};

/// Corruption applied to positions selected for masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskSplit {
    fn default() -> Self {
        MaskSplit {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub mask_rate: f64,
    pub mask_split: MaskSplit,
    /// Weight of the discriminator term in the joint ELECTRA objective.
    pub electra_weight: f64,
    pub seed: u64,
    /// Pretraining stops at the first epoch whose validation perplexity is at
    /// or below this value.
    pub target_perplexity: Option<f64>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 7,
            max_steps: None,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            mask_rate: 0.15,
            mask_split: MaskSplit::default(),
            electra_weight: 50.0,
            seed: 0,
            target_perplexity: None,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate ({}) must be positive", self.learning_rate));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate ({}) must lie in (0, 1)", self.mask_rate));
        }
        let s = self.mask_split;
        if [s.mask, s.random, s.keep].iter().any(|&p| p < 0.0) || (s.mask + s.random + s.keep - 1.0).abs() > 1e-9 {
            return fail(format!(
                "mask split {}/{}/{} must be non-negative and sum to 1",
                s.mask, s.random, s.keep
            ));
        }
        if !(self.electra_weight > 0.0) {
            return fail(format!("electra_weight ({}) must be positive", self.electra_weight));
        }
        if let Some(p) = self.target_perplexity {
            if !(p > 0.0) {
                return fail(format!("target_perplexity ({p}) must be positive"));
            }
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return fail("adam parameters out of range".into());
        }
        Ok(())
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    learning_rate: f64,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model<f32>, config: AdamConfig, learning_rate: f64) -> Self {
        let zeros = || model.tensors().iter().map(|t| vec![0f32; t.data.len()]).collect();
        Adam {
            config,
            learning_rate,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &Gradients<f32>) {
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step = (self.learning_rate / c1) as f32;
        let rc2 = (1.0 / c2) as f32;
        let eps = epsilon as f32;
        for (((param, grad), m), v) in model
            .tensors_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in param.data.iter_mut().zip(&grad.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v * rc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

/// Validation metric after an epoch (or at an early stop).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps taken when the metric was measured.
    pub step: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub selected: Option<EvalRecord>,
}

impl TrainLog {
    /// `step<TAB>loss<TAB>metric`; the metric is empty on steps without an
    /// evaluation. Evaluations before the first step appear at step 0.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\tmetric\n");
        let mut evals = self.evals.iter().peekable();
        while let Some(e) = evals.next_if(|e| e.step == 0) {
            let _ = writeln!(out, "0\t\t{:.6}", e.metric);
        }
        for s in &self.steps {
            let metric = evals.next_if(|e| e.step == s.step).map(|e| format!("{:.6}", e.metric));
            let _ = writeln!(out, "{}\t{:.6}\t{}", s.step, s.loss, metric.unwrap_or_default());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::pretrain();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.mask_rate, 0.15);
        assert_eq!(c.electra_weight, 50.0);
        assert_eq!(TrainConfig::finetune().learning_rate, 5e-5);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::pretrain();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.mask_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.mask_split.keep = 0.2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let config = ModelConfig::desk(10).with_hidden(8);
        let mut ckpt = init_model(&config, 0).unwrap();
        let before = ckpt.model.clone();
        let mut grads = Gradients::zeros_like(&ckpt.model);
        grads.tensors[0].data[0] = 3.0;
        grads.tensors[0].data[1] = -0.5;
        let mut adam = Adam::new(&ckpt.model, AdamConfig::default(), 1e-2);
        adam.step(&mut ckpt.model, &grads);
        let d0 = before.tensors()[0].data[0] - ckpt.model.tensors()[0].data[0];
        let d1 = before.tensors()[0].data[1] - ckpt.model.tensors()[0].data[1];
        assert!((d0 - 1e-2).abs() < 1e-6);
        assert!((d1 + 1e-2).abs() < 1e-6);
        assert_eq!(before.tensors()[1], ckpt.model.tensors()[1]);
    }

    #[test]
    fn log_tsv_marks_eval_steps() {
        let log = TrainLog {
            steps: vec![StepRecord { step: 1, loss: 2.0 }, StepRecord { step: 2, loss: 1.5 }],
            evals: vec![EvalRecord { epoch: 1, step: 2, metric: 0.75 }],
            selected: None,
        };
        assert_eq!(log.to_tsv(), "step\tloss\tmetric\n1\t2.000000\t\n2\t1.500000\t0.750000\n");
    }
}
