mod common;

use common::oracle::{smooth_networks_worst, spiking_networks_worst};
use neurove::neuron::{SurrogateKind, SurrogateSpec};
use neurove::recurrent::{AslstmLayer, CellConfig};
use neurove::training::{ParamStore, Tape};
use neurove::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn smooth_networks_match_finite_differences() {
    let worst = smooth_networks_worst();
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn spiking_networks_match_the_smoothed_oracle() {
    let worst = spiking_networks_worst();
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

/// One neuron that fires at step 1: with the reset mask treated as a
/// constant, nothing reaches the step-2 potential through the gated path,
/// while the direct synaptic drive still carries gradient.
#[test]
fn reset_mask_is_straight_through() {
    let surrogate = SurrogateSpec::new(SurrogateKind::Rectangular, 1.0).unwrap();
    let run = |first_input: f64| {
        let mut store = ParamStore::new();
        let mut cfg = CellConfig::new(1, 1);
        cfg.diffusion_d = 0.0;
        cfg.surrogate = surrogate;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = AslstmLayer::init(&mut store, "cell", cfg, &mut rng).unwrap();
        let w_in = store.find("cell.w_in").unwrap();
        // gates [i f g o] = 1, membrane drive weight 1
        *store.get_mut(w_in) = Tensor::from_vec(1, 5, vec![1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let mut st = layer.zero_state(&mut tape, 1);
        let x1 = tape.constant(Tensor::scalar(first_input));
        st = layer.step(&mut tape, &store, x1, &st).unwrap();
        let fired = st.s_hard.get(0, 0);
        let x2 = tape.constant(Tensor::scalar(0.25));
        st = layer.step(&mut tape, &store, x2, &st).unwrap();
        let grads = tape.backward(st.v).unwrap();
        (fired, grads.param(w_in).unwrap().clone())
    };
    let (fired, g) = run(2.0);
    assert_eq!(fired, 1.0);
    // gate columns carry nothing; the drive column sees x2 directly
    assert_eq!(&g.data()[..4], &[0.0, 0.0, 0.0, 0.0]);
    assert_eq!(g.data()[4], 0.25);
    let (fired, g) = run(0.1);
    assert_eq!(fired, 0.0);
    assert!(g.data()[..4].iter().any(|&v| v != 0.0));
}
