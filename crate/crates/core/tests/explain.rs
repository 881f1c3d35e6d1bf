mod common;

use common::rand_tensor;
use mixfire::explain::{
    export_heatmap, export_heatmap_with_sidecar, gradcam, normalize_to_bytes, upsample_nearest, FEATURE_LAYER,
};
use mixfire::imageio::read_gray_bytes;
use mixfire::model::init_params;
use mixfire::{Error, ModelConfig, Tensor};

#[test]
fn zero_head_row_gives_a_zero_map() {
    let config = common::toy_config(4);
    let mut params = init_params(&config, 1).unwrap();
    let head = params.get_mut("head.weight").unwrap();
    for k in 0..4 {
        head.set(&[1, k], 0.0).unwrap();
    }
    let map = gradcam(&params, &config, &common::toy_image(1), 1).unwrap();
    assert_eq!(map.values.shape(), &[8, 8]);
    assert!(map.values.data().iter().all(|&v| v == 0.0));
    assert_eq!(map.feature_layer, FEATURE_LAYER);
}

#[test]
fn single_map_with_unit_weight_is_relu_of_the_activation() {
    let config = common::toy_config(1);
    let n = config.backbone.tokens() as f64;
    let mut params = init_params(&config, 2).unwrap();
    // dy/dA_ij = w / n, so w = n makes the channel weight exactly 1.
    params.get_mut("head.weight").unwrap().set(&[0, 0], n).unwrap();
    let img = common::toy_image(2);
    let a = common::feature_maps(&params, &config, &img);
    let map = gradcam(&params, &config, &img, 0).unwrap();
    let want: Vec<f64> = a.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(map.values.data(), &want[..]);
    assert!(want.iter().any(|&v| v > 0.0) && a.data().iter().any(|&v| v < 0.0));
}

#[test]
fn two_channel_toy_matches_hand_chain_rule() {
    let config = common::toy_config(2);
    let n = config.backbone.tokens() as f64;
    let mut params = init_params(&config, 3).unwrap();
    let w = Tensor::new(&[3, 2], vec![0.8, -0.3, -1.1, 0.6, 0.25, 0.4]).unwrap();
    *params.get_mut("head.weight").unwrap() = w.clone();
    *params.get_mut("tokenizer.bias").unwrap() = Tensor::new(&[2], vec![0.05, -0.02]).unwrap();
    let img = common::toy_image(3);
    let a = common::feature_maps(&params, &config, &img);
    for class in 0..3 {
        let map = gradcam(&params, &config, &img, class).unwrap();
        let (w0, w1) = (w.get(&[class, 0]).unwrap() / n, w.get(&[class, 1]).unwrap() / n);
        for (i, &m) in map.values.data().iter().enumerate() {
            let want = (w0 * a.data()[i] + w1 * a.data()[64 + i]).max(0.0);
            assert!((m - want).abs() < 1e-10);
        }
    }
}

#[test]
fn default_model_maps_are_nonnegative_and_deterministic() {
    let mut config = ModelConfig::default();
    config.backbone.input_size = 32;
    config.token_hidden = 16;
    config.channel_hidden = 16;
    let params = init_params(&config, 4).unwrap();
    let img = common::map(&rand_tensor(&[1, 32, 32], 4), f64::abs);
    let a = gradcam(&params, &config, &img, 2).unwrap();
    let b = gradcam(&params, &config, &img, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (4, 4));
    assert!(a.values.data().iter().all(|&v| v >= 0.0));
    assert!(matches!(
        gradcam(&params, &config, &img, 3),
        Err(Error::ClassOutOfRange { index: 3, classes: 3 })
    ));
}

#[test]
fn upsampling_keeps_values_and_rejects_shrinking() {
    let m = rand_tensor(&[3, 3], 1);
    let u = upsample_nearest(&m, 5, 5).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(u.get(&[i, j]).unwrap(), m.get(&[i * 3 / 5, j * 3 / 5]).unwrap());
        }
    }
    assert!(upsample_nearest(&m, 2, 5).is_err());
}

fn payload(path: &std::path::Path) -> Vec<u8> {
    let (_, _, bytes) = read_gray_bytes(path).unwrap();
    bytes
}

#[test]
fn zero_map_exports_as_zero_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.pgm");
    export_heatmap(&Tensor::zeros(&[2, 2]).unwrap(), &path).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert!(raw.starts_with(b"P5"));
    let header = String::from_utf8_lossy(&raw[..raw.len() - 4]);
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["P5", "2", "2", "255"]);
    assert_eq!(&raw[raw.len() - 4..], &[0, 0, 0, 0]);
}

#[test]
fn endpoints_export_as_0_and_255() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ends.pgm");
    export_heatmap(&Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(), &path).unwrap();
    assert_eq!(payload(&path), vec![0, 255]);
}

#[test]
fn export_round_trips_the_quantized_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.pgm");
    let m = common::map(&rand_tensor(&[7, 5], 8), f64::abs);
    export_heatmap_with_sidecar(&m, 2, &path).unwrap();
    let (w, h, bytes) = read_gray_bytes(&path).unwrap();
    assert_eq!((w, h), (5, 7));
    assert_eq!(bytes, normalize_to_bytes(m.data()));
    let side = std::fs::read_to_string(dir.path().join("map.pgm.txt")).unwrap();
    assert!(side.starts_with("class=2 min="));
    assert!(side.contains(" max="));
}

#[test]
fn unwritable_path_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("map.pgm");
    let err = export_heatmap(&Tensor::zeros(&[2, 2]).unwrap(), &path).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}
