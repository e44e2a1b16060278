//! Shared fixtures for the benchmarks.

use bricklayer::backbone::{Backbone, BackboneConfig};
use bricklayer::numerics::{Matrix, RngStream};

pub fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn default_backbone(seed: u64) -> Backbone {
    let mut rng = RngStream::new(seed);
    Backbone::new(128, &BackboneConfig::default(), &mut rng).expect("backbone")
}
