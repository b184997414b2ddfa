use rand_chacha::ChaCha8Rng;
use ocl::config::RunConfig;
use ocl::error::OclError;
use ocl::trainer::checkpoint::*;
use rand::{Rng, SeedableRng};

fn sample() -> Checkpoint<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let _: u64 = rng.random();
    Checkpoint {
        meta: CheckpointMeta {
            config_hash: "abc".into(),
            step: 12,
            rng: RngState::capture(&rng),
            config: RunConfig::default(),
        },
        arrays: vec![
            NamedArray { name: "a".into(), shape: vec![2, 3], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, 7.0] },
            NamedArray { name: "b".into(), shape: vec![1], data: vec![f32::MAX] },
        ],
    }
}

#[test]
fn round_trip_bit_exact() {
    let c = sample();
    let back = Checkpoint::<f32>::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(back.meta, c.meta);
    for (x, y) in back.arrays.iter().zip(&c.arrays) {
        let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn rng_state_resumes_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    rng.set_stream(4);
    for _ in 0..7 {
        let _: u32 = rng.random();
    }
    let mut restored = RngState::capture(&rng).restore().unwrap();
    let a: Vec<u64> = (0..5).map(|_| rng.random()).collect();
    let b: Vec<u64> = (0..5).map(|_| restored.random()).collect();
    assert_eq!(a, b);
}

#[test]
fn truncated_payload_is_format_error() {
    let mut bytes = sample().to_bytes().unwrap();
    bytes.pop();
    let err = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, OclError::Format { .. }), "{err}");
}

#[test]
fn wrong_dtype_is_format_error() {
    let bytes = sample().to_bytes().unwrap();
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(OclError::Format { .. })));
}

#[test]
fn bad_magic() {
    let mut bytes = sample().to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
}
