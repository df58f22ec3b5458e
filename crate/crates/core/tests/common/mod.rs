//! Brute-force oracles shared by the integration and acceptance suites.
//! None of them call the routines they check.
#![allow(dead_code)]

use onestream::geometry::{Box3D, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [0; 3].map(|_: i32| rng.gen_range(-extent..extent)))
            .collect(),
    )
    .unwrap()
}

/// Greedy FPS recomputing every candidate's distance to the whole selected
/// set at every step.
pub fn fps_oracle(pts: &[Point3], n: usize) -> Vec<usize> {
    let mut sel = vec![0usize];
    while sel.len() < n.min(pts.len()) {
        let mut best = (usize::MAX, -1.0);
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel
                .iter()
                .map(|&s| dist2(&pts[i], &pts[s]))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        sel.push(best.0);
    }
    (0..n).map(|i| sel[i % sel.len()]).collect()
}

pub fn ball_query_oracle(pts: &[Point3], c: &Point3, r: f64, k: usize) -> Vec<usize> {
    let inside: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&pts[i], c) <= r * r).collect();
    if inside.is_empty() {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| dist2(&pts[a], c).total_cmp(&dist2(&pts[b], c)).then(a.cmp(&b)));
        return vec![order[0]; k];
    }
    (0..k).map(|i| if i < inside.len() { inside[i] } else { inside[0] }).collect()
}

pub fn knn_oracle(pts: &[Point3], c: &Point3, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| dist2(&pts[a], c).total_cmp(&dist2(&pts[b], c)).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)],
        rng.gen_range(0.5..2.5),
        rng.gen_range(0.5..4.5),
        rng.gen_range(0.5..2.0),
        rng.gen_range(-3.1..3.1),
    )
    .unwrap()
}

fn inside_oracle(b: &Box3D, p: &Point3) -> bool {
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let (s, c) = b.heading.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0 && (p[2] - b.center[2]).abs() <= b.h / 2.0
}

/// Monte-Carlo IoU from uniform samples over a box enclosing both inputs.
pub fn iou_monte_carlo(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let reach = |bx: &Box3D| (bx.l.hypot(bx.w)) / 2.0;
    let lo = [0, 1, 2].map(|k| {
        let (ra, rb) = if k == 2 { (a.h / 2.0, b.h / 2.0) } else { (reach(a), reach(b)) };
        (a.center[k] - ra).min(b.center[k] - rb)
    });
    let hi = [0, 1, 2].map(|k| {
        let (ra, rb) = if k == 2 { (a.h / 2.0, b.h / 2.0) } else { (reach(a), reach(b)) };
        (a.center[k] + ra).max(b.center[k] + rb)
    });
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [0, 1, 2].map(|k| r.gen_range(lo[k]..hi[k]));
        let (ia, ib) = (inside_oracle(a, &p), inside_oracle(b, &p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Row-major dense matrices for oracle arithmetic.
pub type Mat = Vec<Vec<f64>>;

pub mod dense {
    use super::Mat;
    use onestream_tensor::{ParamStore, Tensor};

    pub fn from_tensor(t: &Tensor<f64>) -> Mat {
        let (r, c) = t.dims2().unwrap();
        (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
    }

    pub fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
        store
            .by_name(name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .clone()
    }

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn transpose(a: &Mat) -> Mat {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn relu(a: &Mat) -> Mat {
        a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
    }

    pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
        a.iter().map(|r| r[start..start + len].to_vec()).collect()
    }

    pub fn rows(a: &Mat, start: usize, len: usize) -> Mat {
        a[start..start + len].to_vec()
    }

    pub fn linear(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
        let w = from_tensor(&param(store, &format!("{prefix}.weight")));
        let b = param(store, &format!("{prefix}.bias"));
        matmul(x, &w)
            .into_iter()
            .map(|r| r.iter().zip(b.data()).map(|(v, bb)| v + bb).collect())
            .collect()
    }

    pub fn layer_norm(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
        let g = param(store, &format!("{prefix}.gamma"));
        let b = param(store, &format!("{prefix}.beta"));
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
                    .collect()
            })
            .collect()
    }

    pub fn softmax_rows(a: &Mat) -> Mat {
        a.iter()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    /// Straightforward multi-head pre-norm block.
    pub fn block(store: &ParamStore<f64>, prefix: &str, x: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
        let d = x[0].len();
        let dh = d / heads;
        let h = layer_norm(store, &format!("{prefix}.ln1"), x);
        let qkv = linear(store, &format!("{prefix}.qkv"), &h);
        let mut cat: Mat = vec![Vec::new(); x.len()];
        let mut maps = Vec::new();
        for i in 0..heads {
            let q = cols(&qkv, i * dh, dh);
            let k = cols(&qkv, d + i * dh, dh);
            let v = cols(&qkv, 2 * d + i * dh, dh);
            let s: Mat = matmul(&q, &transpose(&k))
                .into_iter()
                .map(|r| r.into_iter().map(|e| e / (dh as f64).sqrt()).collect())
                .collect();
            let a = softmax_rows(&s);
            for (row, o) in cat.iter_mut().zip(matmul(&a, &v)) {
                row.extend(o);
            }
            maps.push(a);
        }
        let x1 = add(x, &linear(store, &format!("{prefix}.proj"), &cat));
        let h = layer_norm(store, &format!("{prefix}.ln2"), &x1);
        let h = relu(&linear(store, &format!("{prefix}.fc1"), &h));
        (add(&x1, &linear(store, &format!("{prefix}.fc2"), &h)), maps)
    }

    pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }
}
