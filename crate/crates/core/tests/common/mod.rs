#![allow(dead_code)]

use std::path::PathBuf;

use sdnet::data::{make_synthetic, split_stratified, Splits, SyntheticKind, SyntheticSpec};
use sdnet::model::{Arch, ModelConfig, SectionSpec};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn mlp_config(widths: &[usize], input: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::Mlp,
        sections: widths.iter().map(|&w| SectionSpec::new(1, w, false)).collect(),
        num_classes: classes,
        input_shape: vec![input],
    }
}

/// Four-section residual net on 3×16×16 inputs.
pub fn small_resnet(classes: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::MiniResnet,
        sections: vec![
            SectionSpec::new(1, 4, false),
            SectionSpec::new(1, 8, true),
            SectionSpec::new(1, 8, true),
            SectionSpec::new(1, 16, true),
        ],
        num_classes: classes,
        input_shape: vec![3, 16, 16],
    }
}

pub fn plain_cnn(classes: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::PlainCnn,
        sections: vec![
            SectionSpec::new(1, 4, false),
            SectionSpec::new(2, 6, true),
            SectionSpec::new(1, 8, true),
        ],
        num_classes: classes,
        input_shape: vec![2, 8, 8],
    }
}

pub fn blobs(n: usize, classes: usize, noise: f64, shape: Vec<usize>, seed: u64) -> Splits {
    let ds = make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::GaussianBlobs,
        n_samples: n,
        num_classes: classes,
        noise,
        seed,
        shape,
    })
    .unwrap();
    let mut s = split_stratified(&ds, 0.2, seed).unwrap();
    s.standardize();
    s
}
