mod common;

use common::rand_tensor;
use mixfire::imageio::{read_gray_bytes, write_pgm};
use mixfire::model::init_params;
use mixfire::params::MAGIC;
use mixfire::{Error, ModelConfig, ModelParams, Tensor};

fn sample() -> ModelParams {
    let mut p = ModelParams::new();
    p.insert("a.weight", rand_tensor(&[2, 3], 1)).unwrap();
    p.insert("b", Tensor::scalar(-0.0)).unwrap();
    p.insert("c.bias", Tensor::new(&[1, 1, 2], vec![f64::MIN_POSITIVE, 1e300]).unwrap()).unwrap();
    p
}

#[test]
fn layout_matches_hand_encoding() {
    let mut p = ModelParams::new();
    p.insert("w", Tensor::new(&[2], vec![1.5, -2.0]).unwrap()).unwrap();
    let mut want = MAGIC.to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u16.to_le_bytes());
    want.extend(b"w");
    want.push(1);
    want.extend(2u32.to_le_bytes());
    want.extend(1.5f64.to_le_bytes());
    want.extend((-2.0f64).to_le_bytes());
    assert_eq!(p.to_bytes(), want);
}

#[test]
fn model_files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    for params in [sample(), init_params(&ModelConfig::default(), 3).unwrap()] {
        let path = dir.path().join("m.mxf");
        params.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.to_bytes(), bytes);
        let bits = |p: &ModelParams| -> Vec<u64> {
            p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&back), bits(&params));
    }
}

#[test]
fn corrupted_files_are_rejected() {
    let bytes = sample().to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(ModelParams::from_bytes(&bad_magic), Err(Error::ModelFormat(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(ModelParams::from_bytes(&trailing), Err(Error::ModelFormat(_))));
    for cut in [0, 3, 7, bytes.len() / 2, bytes.len() - 1] {
        assert!(ModelParams::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let dir = tempfile::tempdir().unwrap();
    let err = ModelParams::load(dir.path().join("absent.mxf")).unwrap_err();
    assert!(err.to_string().contains("absent.mxf"));
}

#[test]
fn pgm_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    let px: Vec<u8> = (0..=255).chain(0..9).collect();
    write_pgm(&path, 5, 53, &px).unwrap();
    assert_eq!(read_gray_bytes(&path).unwrap(), (5, 53, px));
}
