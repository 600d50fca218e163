//! Finite-difference harness shared by the gradient tests and the
//! acceptance suite.
//!
//! Reverse-mode gradients are checked against central finite differences.
//!
//! Smooth networks are compared directly. Networks with spiking units are
//! compared on a tape whose spike nodes evaluate the surrogate's
//! antiderivative, so the finite-difference derivative of the forward pass
//! is exactly what the surrogate backward pass claims to compute.

use neurove::encoding::SpikeTensor;
use neurove::encoding::WindowSpec;
use neurove::network::{BlockConfig, EstimatorConfig, FeatureExtractorConfig, Mode, NeuroVe, NeuroVeConfig};
use neurove::neuron::{SurrogateKind, SurrogateSpec};
use neurove::recurrent::{AslstmLayer, CellConfig, LayerState, Recurrence};
use neurove::training::loss::{mse, velocity_loss_parts};
use neurove::training::{ConvGeometry, ParamStore, SpikeForward, Tape, Var};
use neurove::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

/// Relative error `|g - g_fd| / |g_fd|` over every trainable parameter.
fn relative_gradient_error<F>(store: &mut ParamStore<f64>, mode: SpikeForward, net: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::with_spike_forward(mode);
    let loss = net(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let eval = |store: &ParamStore<f64>| {
        let mut t = Tape::with_spike_forward(mode);
        let l = net(&mut t, store);
        t.value(l).get(0, 0)
    };
    let (mut diff, mut norm) = (0.0, 0.0);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + H;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - H;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * H);
            let an = grads.param(id).map_or(0.0, |g| g.data()[k]);
            diff += (an - fd).powi(2);
            norm += fd.powi(2);
        }
    }
    assert!(norm > 0.0, "degenerate network: zero gradient");
    (diff / norm).sqrt()
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor<f64> {
    Tensor::uniform(rows, cols, bound, rng)
}

fn trainable_count(store: &ParamStore<f64>) -> usize {
    store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| store.get(id).len())
        .sum()
}

/// Unrolls recurrent layers over `inputs`; returns the readout of the top layer.
fn unroll(tape: &mut Tape<f64>, store: &ParamStore<f64>, layers: &[AslstmLayer<f64>], inputs: &[Tensor<f64>]) -> Var {
    let batch = inputs[0].rows();
    let mut xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let mut out = None;
    for (l, layer) in layers.iter().enumerate() {
        let mut st: LayerState<f64> = layer.zero_state(tape, batch);
        let mut next = Vec::new();
        for (t, &x) in xs.iter().enumerate() {
            st = layer.step(tape, store, x, &st).unwrap();
            next.push(st.v);
            if l + 1 == layers.len() && t + 1 == xs.len() {
                out = Some(layer.readout(tape, store, x, &st).unwrap());
            }
        }
        xs = next;
    }
    out.unwrap()
}

fn cell_net(
    seed: u64,
    dims: &[usize],
    v_th: f64,
    surrogate: SurrogateSpec<f64>,
    recurrence: Recurrence,
    d: f64,
) -> (ParamStore<f64>, Vec<AslstmLayer<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let mut cfg = CellConfig::new(w[0], w[1]);
            cfg.v_th = v_th;
            cfg.surrogate = surrogate;
            cfg.recurrence = recurrence;
            cfg.diffusion_d = d;
            cfg.gate_bias = true;
            let layer = AslstmLayer::init(&mut store, &format!("l{l}"), cfg, &mut rng).unwrap();
            // non-zero biases exercise the bias path
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).ends_with(".bias") {
                    *store.get_mut(id) = rand_tensor(&mut rng, 1, store.get(id).cols(), 0.3);
                }
            }
            layer
        })
        .collect();
    (store, layers)
}

/// Worst relative error over the smooth networks.
pub fn smooth_networks_worst() -> f64 {
    let mut worst: f64 = 0.0;

    // 1. two-layer perceptron with tanh and sigmoid
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_tensor(&mut rng, 4, 6, 0.8));
        let b1 = store.add("b1", rand_tensor(&mut rng, 1, 6, 0.3));
        let w2 = store.add("w2", rand_tensor(&mut rng, 6, 3, 0.8));
        let x = rand_tensor(&mut rng, 5, 4, 1.0);
        let y = rand_tensor(&mut rng, 5, 3, 1.0);
        assert!(trainable_count(&store) <= 200);
        let err = relative_gradient_error(&mut store, SpikeForward::Hard, |tape, s| {
            let xv = tape.constant(x.clone());
            let (w1, b1, w2) = (
                tape.param(w1, s.get(w1)),
                tape.param(b1, s.get(b1)),
                tape.param(w2, s.get(w2)),
            );
            let h = tape.matmul(xv, w1).unwrap();
            let h = tape.add_bias(h, b1).unwrap();
            let h = tape.tanh(h);
            let o = tape.matmul(h, w2).unwrap();
            let o = tape.sigmoid(o);
            mse(tape, o, &y).unwrap()
        });
        worst = worst.max(err);
    }

    // 2. convolution, batch normalisation and row norms
    {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let geom = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            in_h: 5,
            in_w: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let w = store.add("w", rand_tensor(&mut rng, 3, 18, 0.5));
        let b = store.add("b", rand_tensor(&mut rng, 1, 3, 0.2));
        let g = store.add("gamma", rand_tensor(&mut rng, 1, 3, 0.5).map(|v| v + 1.0));
        let be = store.add("beta", rand_tensor(&mut rng, 1, 3, 0.2));
        let x = rand_tensor(&mut rng, 4, 50, 1.0);
        assert!(trainable_count(&store) <= 200);
        let err = relative_gradient_error(&mut store, SpikeForward::Hard, |tape, s| {
            let xv = tape.constant(x.clone());
            let (w, b) = (tape.param(w, s.get(w)), tape.param(b, s.get(b)));
            let (g, be) = (tape.param(g, s.get(g)), tape.param(be, s.get(be)));
            let y = tape.conv2d(xv, w, b, geom).unwrap();
            let (y, _) = tape.batch_norm(y, g, be, 3, 1e-5, None).unwrap();
            let y = tape.tanh(y);
            let r = tape.reshape(y, 12, 9).unwrap();
            let n = tape.row_norm(r, 2, 5).unwrap();
            tape.mean(n).unwrap()
        });
        worst = worst.max(err);
    }

    // 3. the velocity loss over a linear map, through slices and concatenation
    {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 5, 12, 0.6));
        let k = rand_tensor(&mut rng, 3, 12, 1.0);
        let x = rand_tensor(&mut rng, 3, 5, 1.0);
        let y = rand_tensor(&mut rng, 6, 6, 2.0);
        assert!(trainable_count(&store) <= 200);
        let err = relative_gradient_error(&mut store, SpikeForward::Hard, |tape, s| {
            let xv = tape.constant(x.clone());
            let w = tape.param(w, s.get(w));
            let o = tape.matmul(xv, w).unwrap();
            let o = tape.mul_const(o, k.clone()).unwrap();
            let top = tape.slice_rows(o, 0, 2).unwrap();
            let bottom = tape.slice_rows(o, 2, 1).unwrap();
            let o = tape.concat_rows(&[bottom, top]).unwrap();
            let o = tape.reshape(o, 6, 6).unwrap();
            let (la, ll) = velocity_loss_parts(tape, o, &y).unwrap();
            let la = tape.scale(la, 0.7);
            tape.add(la, ll).unwrap()
        });
        worst = worst.max(err);
    }

    // 4-5. recurrent cells below threshold: every spike is zero and the
    // surrogate vanishes, leaving the gated membrane dynamics
    let surrogate = SurrogateSpec::new(SurrogateKind::Rectangular, 1.0).unwrap();
    for (seed, dims, d) in [(4u64, vec![2usize, 3], 0.5), (5, vec![1, 2, 2], 0.3)] {
        let (mut store, layers) = cell_net(seed, &dims, 1e6, surrogate, Recurrence::Membrane, d);
        assert!(trainable_count(&store) <= 200, "{}", trainable_count(&store));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let inputs: Vec<Tensor<f64>> = (0..4).map(|_| rand_tensor(&mut rng, 2, dims[0], 1.0)).collect();
        let target = rand_tensor(&mut rng, 2, *dims.last().unwrap(), 1.0);
        let err = relative_gradient_error(&mut store, SpikeForward::Hard, |tape, s| {
            let out = unroll(tape, s, &layers, &inputs);
            mse(tape, out, &target).unwrap()
        });
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error over the spiking networks, smoothed forward pass.
pub fn spiking_networks_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let arctan = SurrogateSpec::new(SurrogateKind::Arctan, 2.0).unwrap();
    let rect = SurrogateSpec::new(SurrogateKind::Rectangular, 1.0).unwrap();
    let cases = [
        (11u64, vec![2usize, 3], 0.3, arctan, Recurrence::Membrane, 0.5),
        (12, vec![1, 3, 2], 0.2, arctan, Recurrence::Membrane, 0.5),
        (13, vec![2, 4], 0.25, arctan, Recurrence::Spike, 0.0),
        (14, vec![2, 3], 0.3, rect, Recurrence::Membrane, 0.4),
    ];
    for (seed, dims, v_th, sur, rec, d) in cases {
        let (mut store, layers) = cell_net(seed, &dims, v_th, sur, rec, d);
        assert!(trainable_count(&store) <= 200, "{}", trainable_count(&store));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let inputs: Vec<Tensor<f64>> = (0..5).map(|_| rand_tensor(&mut rng, 3, dims[0], 1.5)).collect();
        let target = rand_tensor(&mut rng, 3, *dims.last().unwrap(), 1.0);
        let err = relative_gradient_error(&mut store, SpikeForward::Smoothed, |tape, s| {
            let out = unroll(tape, s, &layers, &inputs);
            mse(tape, out, &target).unwrap()
        });
        worst = worst.max(err);
    }

    // a complete miniature velocity network: conv, batch norm, LIF block,
    // recurrent estimator and head
    let cfg = NeuroVeConfig {
        window: WindowSpec {
            window_duration: 0.01,
            n_bins: 2,
            t_steps: 3,
            sensor_h: 4,
            sensor_w: 4,
        },
        extractor: FeatureExtractorConfig {
            blocks: vec![BlockConfig {
                out_channels: 1,
                kernel: 3,
                stride: 2,
                padding: 1,
            }],
            v_th: 0.3,
            surrogate: arctan,
            ..Default::default()
        },
        estimator: EstimatorConfig {
            hidden: 2,
            v_th: 0.3,
            surrogate: arctan,
            ..Default::default()
        },
    };
    let model = std::cell::RefCell::new(NeuroVe::<f64>::build(cfg, 21).unwrap());
    let count = trainable_count(&model.borrow().store);
    assert!(count <= 200, "{count}");
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut spikes = SpikeTensor::zeros(3, 2, 4, 4, 4);
    for t in 0..3 {
        for b in 0..2 {
            for c in 0..4 {
                for y in 0..4 {
                    for x in 0..4 {
                        if rng.gen_bool(0.4) {
                            spikes.set([t, b, c, y, x]);
                        }
                    }
                }
            }
        }
    }
    let target = rand_tensor(&mut rng, 4, 6, 1.0);
    let mut store = model.borrow().store.clone();
    let err = relative_gradient_error(&mut store, SpikeForward::Smoothed, |tape, s| {
        let mut model = model.borrow_mut();
        model.store = s.clone();
        let pass = model.forward(tape, &spikes, Mode::Train).unwrap();
        let out = tape.reshape(pass.output, 4, 6).unwrap();
        let (la, ll) = velocity_loss_parts(tape, out, &target).unwrap();
        tape.add(la, ll).unwrap()
    });
    worst.max(err)
}
