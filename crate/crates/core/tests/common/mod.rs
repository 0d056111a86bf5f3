//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::Rng;
use tvlab::model::ops::{log_sum_exp, softplus};
use tvlab::model::{init_model, Model, ModelConfig, Scalar};
use tvlab::rng;
use tvlab::tokenizer::{TokenId, CLS, NUM_SPECIAL, SEP};
use tvlab::train::{classification_loss, discriminator_loss, mlm_loss};

/// One input with targets for all three heads.
pub struct GradCase {
    pub ids: Vec<TokenId>,
    pub mlm_targets: Vec<(usize, TokenId)>,
    pub replaced: Vec<bool>,
    pub label: usize,
    pub dropout_seed: u64,
}

impl GradCase {
    pub fn random(vocab: usize, len: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut ids = vec![CLS];
        ids.extend((0..len - 2).map(|_| r.random_range(NUM_SPECIAL as TokenId..vocab as TokenId)));
        ids.push(SEP);
        let mlm_targets = (1..len - 1)
            .filter(|i| i % 3 == 1)
            .map(|i| (i, r.random_range(NUM_SPECIAL as TokenId..vocab as TokenId)))
            .collect();
        let replaced = (0..len).map(|_| r.random_bool(0.4)).collect();
        GradCase {
            ids,
            mlm_targets,
            replaced,
            label: r.random_range(0..3),
            dropout_seed: r.random(),
        }
    }
}

/// Initializes a model and jitters every tensor so that gains, biases and
/// the output bias are away from their special initial values.
pub fn jittered_model(config: &ModelConfig, seed: u64) -> Model<f32> {
    let mut model = init_model(config, seed).unwrap().model;
    let mut r = rng::seeded(seed ^ 0xABCD);
    for t in model.tensors_mut() {
        for x in &mut t.data {
            *x += rng::normal(&mut r, 0.15) as f32;
        }
    }
    model
}

/// Combined MLM + discriminator + classifier objective computed from the
/// forward pieces alone, with no library loss code involved.
pub fn objective<T: Scalar>(model: &Model<T>, case: &GradCase) -> f64 {
    let n = case.ids.len();
    let hidden = model.encode_sequence(&case.ids, &vec![1; n]).unwrap();
    let v = model.config().vocab_size;
    let positions: Vec<usize> = case.mlm_targets.iter().map(|&(p, _)| p).collect();
    let logits = model.mlm_logits(&hidden, &positions);
    let mut mlm = 0.0;
    for (row, &(_, t)) in logits.chunks(v).zip(&case.mlm_targets) {
        mlm += (log_sum_exp(row) - row[t as usize]).to_f64().unwrap();
    }
    mlm /= positions.len() as f64;
    let disc_logits = model.discriminator_logits(&hidden);
    let mut bce = 0.0;
    for (&x, &y) in disc_logits.iter().zip(&case.replaced) {
        let x = x.to_f64().unwrap();
        bce += softplus(x) - if y { x } else { 0.0 };
    }
    bce /= n as f64;
    let cls = model.cls_forward(&hidden, Some(case.dropout_seed));
    let ce = (log_sum_exp(&cls.logits) - cls.logits[case.label]).to_f64().unwrap();
    mlm + bce + ce
}

/// Analytic gradients of [`objective`] through the library losses.
pub fn analytic<T: Scalar>(model: &Model<T>, case: &GradCase) -> Vec<Vec<f64>> {
    let (_, mut grads) = mlm_loss(model, &case.ids, &case.mlm_targets).unwrap();
    let (_, g, _) = discriminator_loss(model, &case.ids, &case.replaced, T::one()).unwrap();
    grads.add_assign(&g);
    let (_, g) = classification_loss(model, &case.ids, case.label, Some(case.dropout_seed)).unwrap();
    grads.add_assign(&g);
    grads
        .tensors
        .iter()
        .map(|t| t.data.iter().map(|x| x.to_f64().unwrap()).collect())
        .collect()
}

/// Central differences of [`objective`] on the f64 copy of the model.
pub fn numeric(model: &Model<f64>, case: &GradCase, step: f64) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    (0..m.tensors().len())
        .map(|ti| {
            (0..m.tensors()[ti].data.len())
                .map(|j| {
                    let orig = m.tensors()[ti].data[j];
                    m.tensors_mut()[ti].data[j] = orig + step;
                    let up = objective(&m, case);
                    m.tensors_mut()[ti].data[j] = orig - step;
                    let down = objective(&m, case);
                    m.tensors_mut()[ti].data[j] = orig;
                    (up - down) / (2.0 * step)
                })
                .collect()
        })
        .collect()
}

/// Norm below which a gradient tensor counts as zero.
pub const ZERO_GRADIENT_NORM: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both norms are negligible.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < ZERO_GRADIENT_NORM {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst per-tensor relative error between the f32 analytic gradients and
/// f64 central differences, with the name of the offending tensor.
pub fn gradient_check(config: &ModelConfig, seed: u64) -> (f64, String) {
    let model = jittered_model(config, seed);
    let case = GradCase::random(config.vocab_size, 12, seed);
    let a = analytic(&model, &case);
    let n = numeric(&model.cast::<f64>(), &case, 1e-5);
    let mut worst = (0.0, String::new());
    for (i, (a, n)) in a.iter().zip(&n).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, model.layout().name(i).to_string());
        }
    }
    worst
}

pub fn gradient_desk_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        ..ModelConfig::desk(50).with_hidden(16)
    }
}
