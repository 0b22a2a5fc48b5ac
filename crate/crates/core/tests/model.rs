mod common;

use sdnet::autodiff::{Graph, Tensor};
use sdnet::checkpoint::{self, StoredTensor};
use sdnet::model::{Arch, Mode, ModelConfig, MultiExitModel, SectionSpec};
use sdnet::Error;

use common::*;

fn input<T: sdnet::autodiff::Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend(&cfg.input_shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn golden_forward_matches_reference() {
    let cfg = ModelConfig {
        arch: Arch::MiniResnet,
        sections: vec![SectionSpec::new(1, 4, false), SectionSpec::new(1, 8, true)],
        num_classes: 3,
        input_shape: vec![2, 8, 8],
    };
    let mut model = MultiExitModel::<f64>::build(&cfg, 1).unwrap();
    let mut entries = checkpoint::read_file(&fixture("golden_resnet.sdck")).unwrap();
    let pos = entries.iter().position(|(n, _)| n == "input").unwrap();
    let (_, x) = entries.remove(pos);
    checkpoint::load_into(&mut model, &entries).unwrap();
    let x = match x {
        StoredTensor::F64(t) => t,
        _ => panic!("input stored as f64"),
    };
    let out = model.infer(&x).unwrap();
    let text = std::fs::read_to_string(fixture("golden_forward.txt")).unwrap();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let vals: Vec<f64> = parts.map(|v| v.parse().unwrap()).collect();
        let got: Vec<f64> = match key {
            "exit1" => out.logits[0].data().to_vec(),
            "exit2" => out.logits[1].data().to_vec(),
            "feature_sum1" => vec![out.features[0].data().iter().sum()],
            other => panic!("unexpected key {other}"),
        };
        assert_eq!(got.len(), vals.len());
        for (g, w) in got.iter().zip(&vals) {
            assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "{key}: {g} vs {w}");
        }
    }
}

#[test]
fn mini_resnet_shapes() {
    let cfg = ModelConfig::mini_resnet_cifar(10);
    let model = MultiExitModel::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(model.num_exits(), 4);
    assert_eq!(model.feature_shape(), vec![128, 4, 4]);
    let out = model.infer(&input(&cfg, 2, 1)).unwrap();
    for (z, f) in out.logits.iter().zip(&out.features) {
        assert_eq!(z.shape(), &[2, 10]);
        assert_eq!(f.shape(), &[2, 128, 4, 4]);
    }
}

#[test]
fn mlp_and_plain_cnn_build() {
    for cfg in [mlp_config(&[8, 6, 4], 5, 3), plain_cnn(4)] {
        let model = MultiExitModel::<f64>::build(&cfg, 3).unwrap();
        let out = model.infer(&input(&cfg, 3, 2)).unwrap();
        assert_eq!(out.num_exits(), cfg.sections.len());
        for z in &out.logits {
            assert_eq!(z.shape(), &[3, cfg.num_classes]);
        }
    }
}

#[test]
fn rejects_invalid_configs() {
    let mut cfg = ModelConfig::mini_resnet_cifar(10);
    cfg.sections.truncate(1);
    assert!(matches!(MultiExitModel::<f32>::build(&cfg, 0), Err(Error::Model(_))));
    let mut cfg = ModelConfig::mini_resnet_cifar(10);
    cfg.input_shape = vec![3, 4, 4];
    let err = MultiExitModel::<f32>::build(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("spatial size < 1"), "{err}");
}

#[test]
fn initialization_is_seeded() {
    let cfg = small_resnet(3);
    let a = MultiExitModel::<f32>::build(&cfg, 5).unwrap();
    let b = MultiExitModel::<f32>::build(&cfg, 5).unwrap();
    let c = MultiExitModel::<f32>::build(&cfg, 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn shallow_exit_ignores_deeper_parameters() {
    let cfg = small_resnet(3);
    let mut model = MultiExitModel::<f64>::build(&cfg, 2).unwrap();
    let x = input(&cfg, 2, 9);
    let before = model.infer(&x).unwrap();
    let deep: Vec<String> = model
        .params()
        .iter()
        .filter(|p| p.name.starts_with("section3") || p.name.starts_with("section4") || p.name.starts_with("head3"))
        .map(|p| p.name.clone())
        .collect();
    for p in model.params_mut().iter_mut().filter(|p| deep.contains(&p.name)) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    let after = model.infer(&x).unwrap();
    assert_eq!(before.logits[0], after.logits[0]);
    assert_eq!(before.logits[1], after.logits[1]);
    assert_ne!(before.logits[2], after.logits[2]);
}

#[test]
fn forward_until_touches_only_prefix() {
    let cfg = small_resnet(3);
    let model = MultiExitModel::<f32>::build(&cfg, 2).unwrap();
    let x = input::<f32>(&cfg, 2, 4);
    let full = model.infer(&x).unwrap();
    for exit in 1..=4 {
        let mut g = Graph::new();
        let xv = g.constant(&x).unwrap();
        let pass = model.forward_until(&mut g, xv, exit).unwrap();
        assert_eq!(pass.sections_run, exit);
        assert_eq!(pass.exits, (1..=exit).collect::<Vec<_>>());
        assert_eq!(g.tensor(*pass.logits.last().unwrap()), full.logits[exit - 1]);
    }
}

#[test]
fn stripped_model_matches_bitwise() {
    let cfg = small_resnet(5);
    let model = MultiExitModel::<f32>::build(&cfg, 8).unwrap();
    let x = input(&cfg, 3, 1);
    let full = model.infer(&x).unwrap();
    let deepest = model.strip_heads(&[4]).unwrap();
    assert_eq!(deepest.num_exits(), 1);
    assert!(deepest.params().count() < model.params().count());
    assert_eq!(deepest.infer(&x).unwrap().logits[0], full.logits[3]);
    let shallow = model.strip_heads(&[2]).unwrap();
    assert_eq!(shallow.infer(&x).unwrap().logits[0], full.logits[1]);
    let costs = model.exit_costs();
    assert_eq!(shallow.exit_costs()[0], costs[1]);
    assert_eq!(deepest.exit_costs()[0], costs[3]);
    assert_eq!(deepest.total_macs(), costs[3].macs);
    assert!(model.strip_heads(&[7]).is_err());
}

#[test]
fn costs_grow_with_depth() {
    let model = MultiExitModel::<f32>::build(&ModelConfig::mini_resnet_cifar(100), 0).unwrap();
    let costs = model.exit_costs();
    for w in costs.windows(2) {
        assert!(w[0].macs < w[1].macs);
        assert!(w[0].params < w[1].params);
    }
}

#[test]
fn dense_mac_count_is_in_times_out() {
    let cfg = mlp_config(&[4, 4], 10, 5);
    let model = MultiExitModel::<f32>::build(&cfg, 0).unwrap();
    // exit 2 path: 10x4 + 4x4 + fc 4x5
    assert_eq!(model.exit_costs()[1].macs, 40 + 16 + 20);
}

#[test]
fn zero_weights_give_uniform_outputs() {
    let cfg = small_resnet(4);
    let mut model = MultiExitModel::<f64>::build(&cfg, 0).unwrap();
    model.zero_weights();
    let out = model.infer(&input(&cfg, 2, 3)).unwrap();
    for z in &out.logits {
        assert!(z.data().iter().all(|&v| v == 0.0));
        let q = sdnet::loss::softmax_t(z, 1.0).unwrap();
        assert!(q.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }
}

#[test]
fn eval_is_batch_independent() {
    let cfg = small_resnet(3);
    let model = MultiExitModel::<f64>::build(&cfg, 4).unwrap();
    let x = input::<f64>(&cfg, 4, 7);
    let together = model.infer(&x).unwrap();
    let per = x.numel() / 4;
    for i in 0..4 {
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let xi = Tensor::new(shape, x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let alone = model.infer(&xi).unwrap();
        for (a, b) in alone.logits.iter().zip(&together.logits) {
            for (u, v) in a.data().iter().zip(b.row(i)) {
                assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
            }
        }
    }
}

#[test]
fn train_forward_updates_running_stats() {
    let cfg = small_resnet(3);
    let mut model = MultiExitModel::<f64>::build(&cfg, 4).unwrap();
    let before = model.params().find("stem.bn.running_mean").unwrap().tensor.clone();
    let mut g = Graph::new();
    let x = g.constant(&input(&cfg, 4, 2)).unwrap();
    model.forward(&mut g, x, Mode::Train).unwrap();
    let after = &model.params().find("stem.bn.running_mean").unwrap().tensor;
    assert_ne!(&before, after);
}

#[test]
fn checkpoint_round_trip_through_model() {
    let cfg = small_resnet(3);
    let a = MultiExitModel::<f32>::build(&cfg, 1).unwrap();
    let mut b = MultiExitModel::<f32>::build(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sdck");
    checkpoint::save_model(&a, &path).unwrap();
    checkpoint::load_model(&mut b, &path).unwrap();
    assert_eq!(a.params(), b.params());
    let bytes = std::fs::read(&path).unwrap();
    checkpoint::save_model(&b, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let mut other = MultiExitModel::<f32>::build(&mlp_config(&[4, 4], 3, 3), 0).unwrap();
    assert!(checkpoint::load_model(&mut other, &path).is_err());
}
