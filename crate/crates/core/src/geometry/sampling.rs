use super::{Point3, PointCloud};
use crate::error::{Error, Result};

#[inline]
pub fn squared_distance(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy farthest point sampling seeded at index 0.
///
/// Each pick maximizes the distance to the already selected set (lowest
/// index on ties, never re-picking). When `n` exceeds the cloud size the
/// full ordering repeats cyclically.
pub fn farthest_point_sample(pc: &PointCloud, n: usize) -> Result<Vec<usize>> {
    let pts = pc.points();
    if pts.is_empty() {
        return Err(Error::EmptyCloud("farthest_point_sample"));
    }
    let take = n.min(pts.len());
    let mut order = Vec::with_capacity(take);
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut picked = vec![false; pts.len()];
    let mut cur = 0;
    while order.len() < take {
        order.push(cur);
        picked[cur] = true;
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            let d = squared_distance(p, &pts[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !picked[i] && best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        match best {
            Some((i, _)) => cur = i,
            None => break,
        }
    }
    Ok((0..n).map(|i| order[i % order.len()]).collect())
}

/// Fixed-size radius neighborhood of `center`.
///
/// Returns the first `k` indices (input order) within distance `radius`.
/// Underfilled balls repeat their first member; empty balls use the nearest
/// point (lowest index on ties) for every slot.
pub fn ball_query(pc: &PointCloud, center: &Point3, radius: f64, k: usize) -> Result<Vec<usize>> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud("ball_query"));
    }
    if !(radius > 0.0) || k == 0 {
        return Err(Error::invalid(format!("ball_query radius {radius}, k {k}")));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(k);
    for (i, p) in pc.points().iter().enumerate() {
        if squared_distance(p, center) <= r2 {
            out.push(i);
            if out.len() == k {
                return Ok(out);
            }
        }
    }
    let fill = match out.first() {
        Some(&f) => f,
        None => nearest(pc, center),
    };
    out.resize(k, fill);
    Ok(out)
}

/// [`ball_query`] around every point of `centers`, flattened row-major
/// (`centers.len() * k` indices).
pub fn ball_query_all(
    pc: &PointCloud,
    centers: &PointCloud,
    radius: f64,
    k: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(centers.len() * k);
    for c in centers.points() {
        out.extend(ball_query(pc, c, radius, k)?);
    }
    Ok(out)
}

fn nearest(pc: &PointCloud, center: &Point3) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in pc.points().iter().enumerate() {
        let d = squared_distance(p, center);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// The `k` nearest points of `pc` to each center, ordered by distance with
/// ties broken by lower index.
pub fn knn(pc: &PointCloud, centers: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    if k > pc.len() {
        return Err(Error::invalid(format!(
            "knn: k = {k} exceeds cloud size {}",
            pc.len()
        )));
    }
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(pc.len());
    Ok(centers
        .points()
        .iter()
        .map(|c| {
            scratch.clear();
            scratch.extend(
                pc.points()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (squared_distance(p, c), i)),
            );
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < scratch.len() && k > 0 {
                scratch.select_nth_unstable_by(k - 1, cmp);
            }
            let head = &mut scratch[..k];
            head.sort_unstable_by(cmp);
            head.iter().map(|&(_, i)| i).collect()
        })
        .collect())
}
