use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectrum_core::autodiff::Tape;
use spectrum_core::network::{forward_on_tape, temporal_len, GateKind, ModelConfig, ModelParams, MIN_SEQUENCE_LEN};
use spectrum_core::Matrix;

fn small(gate: GateKind) -> ModelConfig {
    ModelConfig {
        width: 8,
        scales: vec![2, 5],
        heads: 2,
        temporal_dim: 6,
        gate,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shapes_follow_the_halving_law(l in MIN_SEQUENCE_LEN..90, seed in any::<u64>(), softmax in any::<bool>()) {
        let gate = if softmax { GateKind::Softmax } else { GateKind::Sigmoid };
        let p = ModelParams::<f64>::init(small(gate), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(l, 15, |_, _| rng.random_range(-3.0..3.0));
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let xv = t.constant(x);
        let ev = forward_on_tape(&mut t, &b, p.layout(), xv).unwrap();
        prop_assert_eq!(t.value(ev.f_t).shape(), (temporal_len(l), 6));
        prop_assert_eq!(temporal_len(l), l.div_ceil(2).div_ceil(2));
        prop_assert_eq!(t.value(ev.f_f).shape(), (1, 8));
        prop_assert_eq!(t.value(ev.gates[0]).shape(), (l.div_ceil(2), 8));
        prop_assert_eq!(t.value(ev.gates[1]).shape(), (temporal_len(l), 8));
        for g in ev.gates {
            prop_assert!(t.value(g).as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
