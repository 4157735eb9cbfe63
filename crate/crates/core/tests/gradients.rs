mod common;

use common::gradient_case;
use propmlp::attention::AttentionKind;
use propmlp::model::layers::Activation;
use propmlp::model::DropoutRates;

const KINDS: [AttentionKind; 4] = [
    AttentionKind::Smoothing,
    AttentionKind::Recursive,
    AttentionKind::Jk,
    AttentionKind::Uniform,
];

#[test]
fn gradients_match_central_differences_without_dropout() {
    for kind in KINDS {
        for gamma in [0.0, 0.5] {
            for act in [Activation::Sigmoid, Activation::LeakyRelu { slope: 0.2 }] {
                let (err, at) = gradient_case(kind, gamma, act, DropoutRates::default(), 7);
                println!("{kind} gamma={gamma} {act:?}: {err:.3e} ({at})");
                assert!(err <= 1e-4, "{kind} gamma={gamma}: {err:e} at {at}");
            }
        }
    }
}

#[test]
fn gradients_match_central_differences_with_fixed_dropout_masks() {
    let dropout = DropoutRates {
        input: 0.2,
        attention: 0.3,
        hidden: 0.25,
    };
    for kind in KINDS {
        let (err, at) = gradient_case(kind, 0.5, Activation::Sigmoid, dropout, 11);
        println!("{kind} with dropout: {err:.3e} ({at})");
        assert!(err <= 1e-4, "{kind}: {err:e} at {at}");
    }
}
