use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realmerge_core::{load_archive, save_archive, Error, Role, Tensor, TensorArchive};

const ROLES: [Role; 4] = [Role::Attention, Role::Mlp, Role::Head, Role::Other];

fn random_archive(rng: &mut ChaCha8Rng) -> TensorArchive {
    let mut a = TensorArchive::new();
    for i in 0..rng.random_range(0..8) {
        let rank = rng.random_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let numel = shape.iter().product();
        // Arbitrary f64 values; the payload narrows them to f32 on save.
        let data = (0..numel).map(|_| rng.random_range(-1e3..1e3)).collect();
        let role = ROLES[rng.random_range(0..ROLES.len())];
        a.insert(
            format!("layer{i}.{}", rng.random_range(0..100)),
            Tensor::new(shape, role, data).unwrap(),
        )
        .unwrap();
    }
    if rng.random_bool(0.5) {
        a.set_id(format!("ckpt-{}", rng.random::<u32>()));
        a.meta_mut()
            .insert("note".into(), "ünïcode \"quoted\"".into());
    }
    a
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..50 {
        let a = random_archive(&mut rng);
        let (p1, p2) = (
            dir.path().join(format!("a{case}.rma")),
            dir.path().join(format!("b{case}.rma")),
        );
        save_archive(&a, &p1).unwrap();
        let loaded = load_archive(&p1).unwrap();
        save_archive(&loaded, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "case {case}"
        );
        assert_eq!(loaded.meta(), a.meta());
        assert_eq!(loaded.len(), a.len());
        for ((n1, t1), (n2, t2)) in a.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.role(), t2.role());
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // A second load is a fixed point.
        assert_eq!(load_archive(&p2).unwrap(), loaded);
    }
}

#[test]
fn empty_archive_round_trips() {
    let a = TensorArchive::new();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(&bytes[..8], &2u64.to_le_bytes());
    assert_eq!(&bytes[8..], b"{}");
    assert!(TensorArchive::from_bytes(&bytes).unwrap().is_empty());
}

#[test]
fn truncation_and_garbage_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a = TensorArchive::new();
    a.insert(
        "w",
        Tensor::new(vec![3, 2], Role::Mlp, vec![1.0; 6]).unwrap(),
    )
    .unwrap();
    let bytes = a.to_bytes().unwrap();
    assert!(matches!(
        TensorArchive::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::TruncatedPayload { .. })
    ));
    assert!(matches!(
        TensorArchive::from_bytes(&bytes[..5]),
        Err(Error::MalformedHeader(_))
    ));
    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(
        TensorArchive::from_bytes(&bad),
        Err(Error::MalformedHeader(_))
    ));
    for _ in 0..200 {
        let n = rng.random_range(0..64);
        let junk: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        assert!(TensorArchive::from_bytes(&junk).is_err());
    }
}

#[test]
fn non_finite_values_are_refused_on_save() {
    let mut a = TensorArchive::new();
    a.insert(
        "w",
        Tensor::new(vec![2], Role::Other, vec![0.0, f64::NAN]).unwrap(),
    )
    .unwrap();
    assert!(matches!(
        a.to_bytes(),
        Err(Error::NonFinite { index: 1, .. })
    ));
}

proptest! {
    #[test]
    fn bytes_round_trip(seed in any::<u64>()) {
        let a = random_archive(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = a.to_bytes().unwrap();
        let again = TensorArchive::from_bytes(&bytes).unwrap().to_bytes().unwrap();
        prop_assert_eq!(bytes, again);
    }
}
