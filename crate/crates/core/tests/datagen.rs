use std::fs;
use ocl::error::OclError;
use ocl::datagen::*;

#[test]
fn synthetic_is_deterministic_and_labelled() {
    let spec = CorpusSpec::synthetic(2, 4, 7);
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a.labels.as_deref(), Some(&[0, 0, 0, 0, 1, 1, 1, 1][..]));
    assert_eq!(a, b);
}

#[test]
fn synthetic_seed_changes_pixels() {
    let a = generate_synthetic(&CorpusSpec::synthetic(2, 4, 7)).unwrap();
    let b = generate_synthetic(&CorpusSpec::synthetic(2, 4, 8)).unwrap();
    assert!(a.pixels.iter().zip(b.pixels.iter()).any(|(x, y)| x != y));
}

#[test]
fn synthetic_range_and_count() {
    let a = generate_synthetic(&CorpusSpec::synthetic(10, 100, 1)).unwrap();
    assert_eq!(a.pixels.shape(), &[1000, 3, 32, 32]);
    assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    a.validate(4).unwrap();
}

#[test]
fn synthetic_rejects_empty_specs() {
    assert!(matches!(
        generate_synthetic(&CorpusSpec::synthetic(0, 4, 1)),
        Err(OclError::Config { .. })
    ));
    assert!(matches!(
        generate_synthetic(&CorpusSpec::synthetic(3, 0, 1)),
        Err(OclError::Config { .. })
    ));
}

#[test]
fn cifar_record_count_and_scaling() {
    let mut bytes = vec![0u8; 10 * CIFAR_RECORD_BYTES];
    bytes[1] = 255;
    bytes[CIFAR_RECORD_BYTES] = 9;
    let batch = decode_cifar_binary(&bytes).unwrap();
    assert_eq!(batch.len(), 10);
    assert_eq!(batch.pixels[[0, 0, 0, 0]], 1.0);
    assert_eq!(batch.labels.as_ref().unwrap()[1], 9);
}

#[test]
fn cifar_rejects_truncated_and_bad_labels() {
    assert!(matches!(
        decode_cifar_binary(&[0u8; 3000]),
        Err(OclError::Format { .. })
    ));
    let mut bytes = vec![0u8; CIFAR_RECORD_BYTES];
    bytes[0] = 10;
    assert!(matches!(decode_cifar_binary(&bytes), Err(OclError::Format { .. })));
}

#[test]
fn cifar_round_trip_through_file() {
    let corpus = generate_synthetic(&CorpusSpec::synthetic(3, 2, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch.bin");
    write_cifar_binary(&corpus, &path).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len() as usize, 6 * CIFAR_RECORD_BYTES);
    let back = load_cifar_binary(&path).unwrap();
    assert_eq!(back.labels, corpus.labels);
    for (a, b) in back.pixels.iter().zip(corpus.pixels.iter()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn batches_drop_ragged_tail() {
    let corpus = generate_synthetic(&CorpusSpec::synthetic(2, 5, 1)).unwrap();
    let batches: Vec<_> = batch_iterator(&corpus, 4, 3, 0, true).unwrap().collect();
    assert_eq!(batches.len(), 2);
    assert!(batches.iter().all(|b| b.len() == 4));
    assert_eq!(batches_per_epoch(10, 4, true), 2);
    assert_eq!(batches_per_epoch(10, 4, false), 3);
}

#[test]
fn epoch_order_is_seeded() {
    let corpus = generate_synthetic(&CorpusSpec::synthetic(2, 5, 1)).unwrap();
    let a = batch_iterator(&corpus, 4, 11, 2, true).unwrap();
    let b = batch_iterator(&corpus, 4, 11, 2, true).unwrap();
    let c = batch_iterator(&corpus, 4, 11, 3, true).unwrap();
    assert_eq!(a.order(), b.order());
    assert_ne!(a.order(), c.order());
}

#[test]
fn full_epoch_visits_each_image_once() {
    let corpus = generate_synthetic(&CorpusSpec::synthetic(2, 5, 1)).unwrap();
    let mut seen: Vec<usize> = batch_iterator(&corpus, 3, 1, 0, false)
        .unwrap()
        .order()
        .to_vec();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    let n: usize = batch_iterator(&corpus, 3, 1, 0, false)
        .unwrap()
        .map(|b| b.len())
        .sum();
    assert_eq!(n, 10);
}

#[test]
fn batch_size_one_is_rejected() {
    let corpus = generate_synthetic(&CorpusSpec::synthetic(2, 2, 1)).unwrap();
    assert!(matches!(
        batch_iterator(&corpus, 1, 0, 0, true),
        Err(OclError::Config { .. })
    ));
}
