use bricklayer::numerics::{Matrix, RngStream};
use bricklayer::{Adam, Backbone, BackboneConfig};

fn golden_net() -> Backbone {
    let cfg = BackboneConfig {
        hidden: vec![5],
        feature_dim: 3,
    };
    Backbone::new(6, &cfg, &mut RngStream::new(42)).unwrap()
}

fn probe() -> Matrix {
    Matrix::from_rows(&[
        [1.0, -0.5, 0.25, 0.0, 2.0, -1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-0.3, 0.7, 1.1, -2.0, 0.4, 0.9],
    ])
    .unwrap()
}

const GOLDEN: [[f64; 3]; 3] = [
    [0.23997344272337795, -0.13750292484207166, -0.5367912857006089],
    [0.0, 0.0, 0.0],
    [0.7848967283212648, 1.279230825406581, 0.25764916532311266],
];

#[test]
fn seed_42_features_match_the_recorded_matrix() {
    let f = golden_net().forward(&probe()).unwrap();
    for (row, want) in f.iter_rows().zip(GOLDEN) {
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn straight_line_forward_agrees() {
    let net = golden_net();
    let p = net.params();
    // 6 -> 5 tanh -> 3 linear; weights are input-major, biases follow
    let (w1, rest) = p.split_at(30);
    let (b1, rest) = rest.split_at(5);
    let (w2, b2) = rest.split_at(15);
    let x = probe();
    let f = net.forward(&x).unwrap();
    for i in 0..3 {
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut s = b1[j];
            for k in 0..6 {
                s += x.get(i, k) * w1[k * 5 + j];
            }
            h[j] = s.tanh();
        }
        for j in 0..3 {
            let mut s = b2[j];
            for k in 0..5 {
                s += h[k] * w2[k * 3 + j];
            }
            assert!((s - f.get(i, j)).abs() < 1e-13);
        }
    }
}

#[test]
fn snapshot_survives_training() {
    let mut net = golden_net();
    let frozen = net.snapshot();
    let before = frozen.forward(&probe()).unwrap();
    assert_eq!(before, net.forward(&probe()).unwrap());
    let mut opt = Adam::new(net.num_params());
    let upstream = Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
    for _ in 0..10 {
        let cache = net.forward_cached(&probe()).unwrap();
        let g = net.backward(&cache, &upstream).unwrap();
        opt.step(net.params_mut(), &g, 0.01).unwrap();
    }
    assert_ne!(net.forward(&probe()).unwrap(), before);
    assert_eq!(frozen.forward(&probe()).unwrap(), before);
    assert_eq!(frozen.snapshot().forward(&probe()).unwrap(), before);
}
