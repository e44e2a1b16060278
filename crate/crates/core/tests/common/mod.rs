#![allow(dead_code)]

use bricklayer::numerics::{Matrix, RngStream};

/// Straight-line replay of the SUR selection, written without reusing any
/// library helper beyond the matrix container.
pub fn sur_oracle(features: &Matrix, stability: &[f64], n_r: usize) -> Vec<usize> {
    let n = features.rows();
    let d = features.cols();

    let mut c = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            c[k] += features.get(i, k);
        }
    }
    for ck in c.iter_mut() {
        *ck /= n as f64;
    }

    let mut mag = vec![0.0; n];
    let mut unit: Vec<Option<Vec<f64>>> = Vec::new();
    for i in 0..n {
        let diff: Vec<f64> = (0..d).map(|k| features.get(i, k) - c[k]).collect();
        let mut s = 0.0;
        for v in &diff {
            s += v * v;
        }
        mag[i] = s.sqrt();
        if mag[i] == 0.0 {
            unit.push(None);
        } else {
            unit.push(Some(diff.iter().map(|v| v / mag[i]).collect()));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mag[a].partial_cmp(&mag[b]).unwrap().then(a.cmp(&b)));

    let k = n_r / 2;
    let mut picked = vec![false; n];
    let mut out = Vec::new();
    let mut start = 0;
    for s in 0..k {
        let len = n / k + if s < n % k { 1 } else { 0 };
        let seg = &order[start..start + len];
        start += len;

        let mut fs = seg[0];
        for &i in seg {
            if stability[i] > stability[fs] || (stability[i] == stability[fs] && i < fs) {
                fs = i;
            }
        }
        out.push(fs);
        picked[fs] = true;

        let mut fa: Option<(usize, f64)> = None;
        for &j in seg {
            if j == fs || unit[j].is_none() {
                continue;
            }
            let cos = match (&unit[fs], &unit[j]) {
                (Some(u), Some(v)) => {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += u[t] * v[t];
                    }
                    acc
                }
                _ => 0.0,
            };
            match fa {
                Some((bj, bc)) if cos > bc || (cos == bc && j > bj) => {}
                _ => fa = Some((j, cos)),
            }
        }
        if let Some((j, _)) = fa {
            out.push(j);
            picked[j] = true;
        }
    }

    let mut rest: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
    rest.sort_by(|&a, &b| stability[b].partial_cmp(&stability[a]).unwrap().then(a.cmp(&b)));
    let short = n_r - out.len();
    out.extend(rest.into_iter().take(short));
    out
}

pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pairwise Mann–Whitney count with half credit for ties.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}
