mod common;

use sdnet::data::{batches, load_cifar, read_cifar_file, Augment, CifarVariant, Subset};
use sdnet::Error;

use common::*;

fn fixture_pixels(record: usize) -> Vec<u8> {
    (0..3072).map(|j| ((7 * j + 31 * record) % 256) as u8).collect()
}

#[test]
fn cifar_fixture_parses_to_known_bytes() {
    let r = read_cifar_file(&fixture("cifar_two.bin"), CifarVariant::Cifar10).unwrap();
    assert_eq!(r.labels, vec![3, 9]);
    assert_eq!(r.pixels.len(), 2 * 3072);
    assert_eq!(&r.pixels[..3072], fixture_pixels(0).as_slice());
    assert_eq!(&r.pixels[3072..], fixture_pixels(1).as_slice());
}

#[test]
fn truncated_file_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let bytes = std::fs::read(fixture("cifar_two.bin")).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = read_cifar_file(&path, CifarVariant::Cifar10).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }));
    assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = 10;
    std::fs::write(&path, &bad).unwrap();
    assert!(read_cifar_file(&path, CifarVariant::Cifar10).is_err());
}

#[test]
fn cifar100_uses_the_fine_label() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    let mut rec = vec![4u8, 57];
    rec.extend(fixture_pixels(0));
    std::fs::write(&path, &rec).unwrap();
    let r = read_cifar_file(&path, CifarVariant::Cifar100).unwrap();
    assert_eq!(r.labels, vec![57]);
    assert_eq!(r.pixels, fixture_pixels(0));
}

#[test]
fn cifar_directory_loads_and_standardizes() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read(fixture("cifar_two.bin")).unwrap();
    for name in CifarVariant::Cifar10.train_files().iter().chain(&[CifarVariant::Cifar10.test_file()]) {
        std::fs::write(dir.path().join(name), &src).unwrap();
    }
    let splits = load_cifar(dir.path(), CifarVariant::Cifar10, None).unwrap();
    assert_eq!(splits.train.len(), 10);
    assert_eq!(splits.test.len(), 2);
    assert_eq!(splits.train.sample_shape(), &[3, 32, 32]);
    let stats = splits.train.channel_stats();
    for c in 0..3 {
        assert!(stats.mean[c].abs() < 1e-5);
        assert!((stats.std[c] - 1.0).abs() < 1e-4);
    }
    let sub = Subset {
        train_per_class: Some(2),
        test_per_class: None,
        seed: 0,
    };
    let capped = load_cifar(dir.path(), CifarVariant::Cifar10, Some(sub)).unwrap();
    assert_eq!(capped.train.class_counts()[3], 2);
    assert_eq!(capped.train.class_counts()[9], 2);
    std::fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
    let err = load_cifar(dir.path(), CifarVariant::Cifar10, None).unwrap_err();
    assert!(err.to_string().contains("data_batch_3.bin"), "{err}");
}

#[test]
fn augmentation_is_seeded_and_shape_preserving() {
    let splits = blobs(40, 2, 1.0, vec![3, 8, 8], 1);
    let a: Vec<_> = batches::<f32>(&splits.train, 8, Some(4), Augment::CropFlip, 2).collect();
    let b: Vec<_> = batches::<f32>(&splits.train, 8, Some(4), Augment::CropFlip, 2).collect();
    let c: Vec<_> = batches::<f32>(&splits.train, 8, Some(4), Augment::CropFlip, 3).collect();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.inputs, y.inputs);
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.inputs.shape(), &[8, 3, 8, 8]);
    }
    assert!(a.iter().zip(&c).any(|(x, y)| x.inputs != y.inputs));
    let plain: Vec<_> = batches::<f32>(&splits.test, 3, None, Augment::None, 1).collect();
    let seen: Vec<usize> = plain.iter().flat_map(|b| b.indices.clone()).collect();
    assert_eq!(seen, (0..splits.test.len()).collect::<Vec<_>>());
}
