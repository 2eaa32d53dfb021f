use invguard_nn::{Architecture, LayerSpec, Mode, Network, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// conv -> bn -> act -> transposed conv -> act -> flatten -> linear.
fn arch(channels: usize, side: usize, width: usize, act: usize) -> Architecture {
    let activation = match act {
        0 => LayerSpec::Tanh,
        1 => LayerSpec::Sigmoid,
        2 => LayerSpec::LeakyRelu { slope: 0.2 },
        _ => LayerSpec::UnitTanh,
    };
    Architecture {
        input_shape: vec![channels, side, side],
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: channels,
                out_channels: width,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            LayerSpec::BatchNorm { channels: width },
            activation.clone(),
            LayerSpec::ConvTranspose2d {
                in_channels: width,
                out_channels: 2,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            activation,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                inputs: 2,
                outputs: 3,
            },
        ],
    }
}

/// `sum(w * net(x))` in training mode.
fn objective(net: &Network, x: &Tensor, w: &[f64]) -> f64 {
    let (y, _) = net.forward(x, Mode::Train).unwrap();
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    // Floor keeps zero gradients (a bias feeding batch norm) from dividing noise by noise.
    d / s.max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_matches_central_differences(
        seed in any::<u64>(),
        channels in 1usize..3,
        side in prop::sample::select(vec![4usize, 6, 8]),
        width in 1usize..4,
        act in 0usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(&arch(channels, side, width, act), &mut rng).unwrap();
        let n = 2 * channels * side * side;
        let x = Tensor::new(vec![2, channels, side, side], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, trace) = net.forward(&x, Mode::Train).unwrap();
        let seed_grad = Tensor::new(vec![2, 3], w.clone()).unwrap();
        let (gx, gp) = net.backward_full(&trace, &seed_grad).unwrap();

        let h = 1e-6;
        let fd_x: Vec<f64> = (0..n)
            .map(|k| {
                let mut p = x.clone();
                p.data_mut()[k] += h;
                let mut m = x.clone();
                m.data_mut()[k] -= h;
                (objective(&net, &p, &w) - objective(&net, &m, &w)) / (2.0 * h)
            })
            .collect();
        prop_assert!(rel_err(&fd_x, gx.data()) < 1e-5, "input gradient {}", rel_err(&fd_x, gx.data()));

        let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        for (t, &len) in sizes.iter().enumerate() {
            let mut fd = Vec::with_capacity(len);
            for k in 0..len {
                net.params_mut()[t][k] += h;
                let up = objective(&net, &x, &w);
                net.params_mut()[t][k] -= 2.0 * h;
                let down = objective(&net, &x, &w);
                net.params_mut()[t][k] += h;
                fd.push((up - down) / (2.0 * h));
            }
            let e = rel_err(&fd, &gp.0[t]);
            prop_assert!(e < 1e-5, "parameter tensor {t}: {e}");
        }
    }

    #[test]
    fn eval_mode_is_per_item(seed in any::<u64>(), side in prop::sample::select(vec![4usize, 8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&arch(2, side, 3, 0), &mut rng).unwrap();
        let item = 2 * side * side;
        let data: Vec<f64> = (0..3 * item).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![3, 2, side, side], data.clone()).unwrap();
        let together = net.infer(&batch).unwrap();
        for i in 0..3 {
            let single = Tensor::new(vec![1, 2, side, side], data[i * item..(i + 1) * item].to_vec()).unwrap();
            let alone = net.infer(&single).unwrap();
            prop_assert_eq!(alone.data(), together.item(i));
        }
        prop_assert_eq!(net.infer(&batch).unwrap(), together);
    }
}
