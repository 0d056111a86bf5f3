mod common;

use common::*;
use tvlab::model::ModelConfig;

#[test]
fn f64_gradients_match_central_differences_tightly() {
    let config = gradient_desk_config();
    let model = jittered_model(&config, 11).cast::<f64>();
    let case = GradCase::random(config.vocab_size, 10, 11);
    let a = analytic(&model, &case);
    let n = numeric(&model, &case, 1e-5);
    for (i, (a, n)) in a.iter().zip(&n).enumerate() {
        let e = relative_error(a, n);
        assert!(e < 1e-6, "{}: {e}", model.layout().name(i));
    }
}

#[test]
fn shared_factorized_encoder_gradients() {
    let config = ModelConfig {
        share_layers: true,
        embedding_size: 8,
        ..gradient_desk_config()
    };
    let (err, name) = gradient_check(&config, 4);
    assert!(err < 1e-3, "{name}: {err}");
}

#[test]
fn every_tensor_receives_gradient() {
    let config = gradient_desk_config();
    let model = jittered_model(&config, 2);
    let case = GradCase::random(config.vocab_size, 12, 2);
    for (i, g) in analytic(&model, &case).iter().enumerate() {
        if model.layout().name(i).ends_with("key.bias") {
            continue;
        }
        assert!(g.iter().any(|&x| x != 0.0), "{}", model.layout().name(i));
    }
}


#[test]
fn attention_key_bias_gradient_vanishes() {
    // A per-query constant added to every score leaves the softmax unchanged.
    let config = gradient_desk_config();
    let model = jittered_model(&config, 8);
    let case = GradCase::random(config.vocab_size, 12, 8);
    let a = analytic(&model, &case);
    let i = model.layout().index_of("encoder.layer0.attention.key.bias").unwrap();
    assert!(a[i].iter().all(|x| x.abs() < 1e-6));
}
