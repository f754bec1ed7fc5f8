use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::uniform_tensor;
use crate::autodiff::softmax_cross_entropy;
use crate::graph::{synth_planted, Labels, PlantedConfig};

fn small_graph() -> Graph {
    synth_planted(&PlantedConfig {
        num_nodes: 40,
        num_classes: 3,
        feat_dim: 6,
        p_in: 0.2,
        p_out: 0.02,
        seed: 5,
        ..PlantedConfig::default()
    })
    .unwrap()
}

fn net(k: usize, graph: &Graph, seed: u64) -> SuperNet {
    let cfg = SuperNetConfig {
        k,
        hidden: 8,
        heads: 2,
        ..SuperNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SuperNet::new(&cfg, graph.feat_dim(), graph.num_classes(), &mut rng).unwrap()
}

fn leaves<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
    ts.iter().map(|t| tape.leaf(t.clone(), false)).collect()
}

#[test]
fn saturated_mixture_selects_one_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outs: Vec<Tensor> = (0..4).map(|_| uniform_tensor(&[3, 2], -1.0, 1.0, &mut rng)).collect();
    for j in 0..4 {
        let tape = Tape::new();
        let mut a = vec![0.0; 4];
        a[j] = 40.0;
        let alpha = tape.leaf(Tensor::vector(a), false);
        let mixed = mixed_op(alpha, &leaves(&tape, &outs)).unwrap();
        assert!(mixed.value().max_abs_diff(&outs[j]) < 1e-12);
    }
}

#[test]
fn uniform_mixture_of_two_is_average() {
    let tape = Tape::new();
    let a = Tensor::vector(vec![1.0, 2.0, -4.0]);
    let b = Tensor::vector(vec![3.0, 0.0, 4.0]);
    let alpha = tape.leaf(Tensor::vector(vec![0.7, 0.7]), false);
    let mixed = mixed_op(alpha, &leaves(&tape, &[a, b])).unwrap();
    assert_eq!(mixed.value().data(), &[2.0, 1.0, 0.0]);
}

#[test]
fn random_mixture_matches_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let outs: Vec<Tensor> = (0..3).map(|_| uniform_tensor(&[4, 3], -2.0, 2.0, &mut rng)).collect();
        let alpha = uniform_tensor(&[3], -3.0, 3.0, &mut rng);
        let e: Vec<f64> = alpha.data().iter().map(|x| x.exp()).collect();
        let total: f64 = e.iter().sum();
        let tape = Tape::new();
        let mixed = mixed_op(tape.leaf(alpha.clone(), false), &leaves(&tape, &outs)).unwrap();
        for i in 0..12 {
            let expected: f64 = (0..3).map(|o| e[o] / total * outs[o].data()[i]).sum();
            assert!((mixed.value().data()[i] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn mixture_rejects_mismatches() {
    let tape = Tape::new();
    let alpha = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
    let one = leaves(&tape, &[Tensor::zeros(&[2, 2])]);
    assert!(mixed_op(alpha, &one).is_err());
    let ragged = leaves(&tape, &[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 3])]);
    assert!(mixed_op(alpha, &ragged).is_err());
}

#[test]
fn softmax_weight_examples() {
    let arch = ArchParams::zeros(2);
    let w = arch.softmax_weights();
    assert!(w.node[0].iter().all(|&x| (x - 1.0 / 11.0).abs() < 1e-15));
    let e = std::f64::consts::E;
    let s = softmax(&[1.0, 0.0]);
    assert!((s[0] - e / (e + 1.0)).abs() < 1e-12 && (s[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut arch = ArchParams::new(3, &mut rng);
    arch.node_mut(1).data_mut()[4] = 30.0;
    let before = arch.clone();
    let w = arch.softmax_weights();
    assert_eq!(arch, before);
    for v in w.node.iter().chain(&w.skip).chain(std::iter::once(&w.layer)) {
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn logits_have_node_by_class_shape() {
    let g = small_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=3 {
        let net = net(k, &g, 0);
        let arch = ArchParams::new(k, &mut rng);
        let logits = net.predict(&arch, &g).unwrap();
        assert_eq!(logits.shape(), &[g.num_nodes(), g.num_classes()]);
        assert!(logits.all_finite());
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Dense affine map `x·W + b` over plain rows.
fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| row[i] * w.get(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn one_layer_mean_architecture_matches_hand_built_model() {
    let g = small_graph();
    let net = net(1, &g, 4);
    let arch = ArchParams::one_hot(
        &[NodeAggKind::SageMean],
        &[SkipKind::Identity],
        LayerAggKind::Concat,
        40.0,
    )
    .unwrap();
    let logits = net.predict(&arch, &g).unwrap();

    let p = net.params();
    let get = |name: &str| p.get(p.find(name).unwrap());
    let x: Vec<Vec<f64>> = (0..g.num_nodes()).map(|v| g.features().row(v).to_vec()).collect();
    let h0 = affine(&x, get("enc.w"), get("enc.b"));
    let mean: Vec<Vec<f64>> = (0..g.num_nodes())
        .map(|v| {
            let nb = g.neighbors(v);
            (0..8)
                .map(|j| nb.iter().map(|&u| h0[u][j]).sum::<f64>() / nb.len() as f64)
                .collect()
        })
        .collect();
    let h1: Vec<Vec<f64>> = affine(&mean, get("layer0.w"), get("layer0.b"))
        .into_iter()
        .map(|r| r.into_iter().map(elu).collect())
        .collect();
    let z = affine(&h1, get("jk.CONCAT.proj.w"), get("jk.CONCAT.proj.b"));
    let out = affine(&z, get("cls.w"), get("cls.b"));
    for v in 0..g.num_nodes() {
        for c in 0..g.num_classes() {
            assert!((logits.get(v, c) - out[v][c]).abs() < 1e-10);
        }
    }
}

#[test]
fn all_zero_skips_leave_only_biases() {
    let g = small_graph();
    let net = net(3, &g, 5);
    for layer in LayerAggKind::ALL {
        let arch = ArchParams::one_hot(
            &[NodeAggKind::Gcn, NodeAggKind::Gat, NodeAggKind::Gin],
            &[SkipKind::Zero; 3],
            *layer,
            40.0,
        )
        .unwrap();
        let logits = net.predict(&arch, &g).unwrap();
        for v in 1..g.num_nodes() {
            for c in 0..g.num_classes() {
                assert!((logits.get(v, c) - logits.get(0, c)).abs() < 1e-12, "{layer}");
            }
        }
        // with zero biases downstream of the skips the logits vanish
        let mut zeroed = net.clone();
        let params = zeroed.params_mut();
        let names: Vec<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names.iter().filter(|n| n.ends_with("proj.b") || *n == "cls.b" || n.ends_with("lstm.b")) {
            let id = params.find(name).unwrap();
            params.get_mut(id).data_mut().fill(0.0);
        }
        let logits = zeroed.predict(&arch, &g).unwrap();
        assert!(logits.data().iter().all(|x| x.abs() < 1e-12), "{layer}");
    }
}

fn train_loss_grads(net: &SuperNet, arch: &ArchParams, g: &Graph) -> (f64, Vec<Option<Tensor>>, Vec<Option<Tensor>>) {
    let Labels::Single(labels) = g.labels() else { unreachable!() };
    let tape = Tape::new();
    let w = net.params().bind(&tape, true);
    let a = arch.bind(&tape, true);
    let logits = net.forward(&w, &a, g, Mode::EVAL, None).unwrap();
    let mask = vec![true; g.num_nodes()];
    let loss = softmax_cross_entropy(logits, &Arc::clone(labels), &mask).unwrap();
    let grads = tape.backward(loss).unwrap();
    let arch_grads = a.collect_grads(&grads);
    (loss.value().data()[0], w.collect_grads(&grads), arch_grads)
}

#[test]
fn shifting_alpha_changes_nothing() {
    let g = small_graph();
    let net = net(2, &g, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = ArchParams::new(2, &mut rng);
    let mut shifted = arch.clone();
    for t in shifted.params_mut().values_mut() {
        for x in t.data_mut() {
            *x += 3.7;
        }
    }
    let (la, ga, _) = train_loss_grads(&net, &arch, &g);
    let (lb, gb, _) = train_loss_grads(&net, &shifted, &g);
    assert!((la - lb).abs() < 1e-9);
    let (wa, wb) = (net.predict(&arch, &g).unwrap(), net.predict(&shifted, &g).unwrap());
    assert!(wa.max_abs_diff(&wb) < 1e-9);
    for (x, y) in ga.iter().zip(&gb) {
        match (x, y) {
            (Some(x), Some(y)) => assert!(x.max_abs_diff(y) < 1e-9),
            (None, None) => {}
            _ => panic!("gradient presence differs"),
        }
    }
}

#[test]
fn architecture_gradient_is_nonzero() {
    let g = small_graph();
    let net = net(2, &g, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = ArchParams::new(2, &mut rng);
    let (_, _, arch_grads) = train_loss_grads(&net, &arch, &g);
    let largest = arch_grads
        .iter()
        .flatten()
        .flat_map(|t| t.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    assert!(largest > 1e-8, "{largest}");
}

#[test]
fn evaluation_is_deterministic_and_training_uses_dropout() {
    let g = small_graph();
    let net = net(2, &g, 8);
    let arch = ArchParams::zeros(2);
    assert_eq!(net.predict(&arch, &g).unwrap(), net.predict(&arch, &g).unwrap());
    let run = |mode: Mode| {
        let tape = Tape::new();
        let w = net.params().bind(&tape, false);
        let a = arch.bind(&tape, false);
        let v = net.forward(&w, &a, &g, mode, None).unwrap().value();
        (*v).clone()
    };
    assert_eq!(run(Mode::train(1)), run(Mode::train(1)));
    assert_ne!(run(Mode::train(1)), run(Mode::train(2)));
    assert_ne!(run(Mode::train(1)), run(Mode::EVAL));
}

#[test]
fn single_op_masks_match_saturated_mixture() {
    let g = small_graph();
    let net = net(2, &g, 9);
    let node = [NodeAggKind::GatCos, NodeAggKind::GeniePath];
    let skip = [SkipKind::Identity, SkipKind::Zero];
    let layer = LayerAggKind::Lstm;
    let saturated = net
        .predict(&ArchParams::one_hot(&node, &skip, layer, 40.0).unwrap(), &g)
        .unwrap();
    let masks = EdgeMasks {
        node: node.iter().map(|k| Some(k.index())).collect(),
        skip: skip.iter().map(|k| Some(k.index())).collect(),
        layer: Some(layer.index()),
    };
    assert!(!masks.is_full() && EdgeMasks::full(2).is_full());
    let tape = Tape::new();
    let w = net.params().bind(&tape, false);
    let a = ArchParams::zeros(2).bind(&tape, false);
    let masked = net.forward(&w, &a, &g, Mode::EVAL, Some(&masks)).unwrap();
    assert!(masked.value().max_abs_diff(&saturated) < 1e-8);
}

#[test]
fn rejects_mismatched_inputs() {
    let g = small_graph();
    let net = net(2, &g, 0);
    assert!(net.predict(&ArchParams::zeros(3), &g).is_err());
    let cfg = SuperNetConfig {
        hidden: 9,
        heads: 2,
        ..SuperNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(SuperNet::new(&cfg, 6, 3, &mut rng).is_err());
}

#[test]
fn checkpoint_restores_weights_and_alpha() {
    let g = small_graph();
    let net_a = net(2, &g, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let arch = ArchParams::new(2, &mut rng);
    let ckpt = net_a.checkpoint(&arch);
    let (m, p) = ckpt.encode();
    let back = Checkpoint::decode(&m, &p).unwrap();
    let mut net_b = net(2, &g, 11);
    let mut arch_b = ArchParams::zeros(2);
    back.restore("w", net_b.params_mut()).unwrap();
    back.restore("alpha", arch_b.params_mut()).unwrap();
    assert_eq!(net_a.predict(&arch, &g).unwrap(), net_b.predict(&arch_b, &g).unwrap());
}
