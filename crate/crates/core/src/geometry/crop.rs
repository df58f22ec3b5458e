use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Box3D, Point3, PointCloud};

/// Output of [`crop_and_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub cloud: PointCloud,
    /// Number of points inside the (enlarged) box before resampling.
    pub inside: usize,
    /// Set when no point fell inside and the cloud is box-center copies.
    pub degenerate: bool,
}

/// Indices of the points inside `b` (inclusive boundary), in input order.
pub fn points_in_box(pc: &PointCloud, b: &Box3D) -> Vec<usize> {
    pc.points()
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Keeps the points inside `b` grown by `enlarge` on every extent and
/// resamples them to exactly `n` points: a seeded subset without replacement
/// (kept in input order) when there are more, cyclic repetition when fewer,
/// and `n` copies of the box center when the box is empty.
pub fn crop_and_sample(pc: &PointCloud, b: &Box3D, enlarge: f64, n: usize, seed: u64) -> Crop {
    let region = b.enlarged(enlarge);
    let inside = points_in_box(pc, &region);
    resample(pc, inside, b.center, n, seed)
}

/// Resamples a whole cloud to `n` points under the same rules as
/// [`crop_and_sample`]; an empty cloud gives `n` copies of `fallback`.
pub fn sample_points(pc: &PointCloud, n: usize, fallback: Point3, seed: u64) -> Crop {
    resample(pc, (0..pc.len()).collect(), fallback, n, seed)
}

fn resample(pc: &PointCloud, inside: Vec<usize>, fallback: Point3, n: usize, seed: u64) -> Crop {
    let count = inside.len();
    if count == 0 {
        return Crop {
            cloud: PointCloud::new(vec![fallback; n]).expect("finite center"),
            inside: 0,
            degenerate: true,
        };
    }
    let idx: Vec<usize> = if count > n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick: Vec<usize> = sample(&mut rng, count, n).into_iter().collect();
        pick.sort_unstable();
        pick.into_iter().map(|i| inside[i]).collect()
    } else {
        (0..n).map(|i| inside[i % count]).collect()
    };
    Crop {
        cloud: pc.select(&idx),
        inside: count,
        degenerate: false,
    }
}
