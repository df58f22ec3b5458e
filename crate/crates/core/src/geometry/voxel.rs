use onestream_tensor::{Graph, ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Regular voxel grid: cell `(ix, iy, iz) = floor((p - origin) / size)` with
/// `ix < W` along x, `iy < H` along y and `iz < Z` along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub size: [f64; 3],
    pub origin: [f64; 3],
    /// `[W, H, Z]` cell counts.
    pub dims: [usize; 3],
}

impl VoxelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) || self.dims.contains(&0) {
            return Err(Error::invalid(format!("invalid voxel spec {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn depth(&self) -> usize {
        self.dims[2]
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell(&self, p: &Point3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.size[k]).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            out[k] = f as usize;
        }
        Some(out)
    }

    /// Flat index in `H x W x Z` order: `(iy * W + ix) * Z + iz`.
    pub fn flat(&self, cell: [usize; 3]) -> usize {
        (cell[1] * self.dims[0] + cell[0]) * self.dims[2] + cell[2]
    }
}

/// Flat cell of every point, `None` outside the grid.
pub fn voxel_cells(pc: &PointCloud, spec: &VoxelSpec) -> Vec<Option<usize>> {
    pc.points()
        .iter()
        .map(|p| spec.cell(p).map(|c| spec.flat(c)))
        .collect()
}

/// Max-reduces per-point features (`N x C`) into an `H x W x Z x C` grid.
/// Empty cells hold zero; points outside the grid are dropped.
pub fn voxelize<T: Real>(pc: &PointCloud, features: &Tensor<T>, spec: &VoxelSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, c) = features.dims2()?;
    if n != pc.len() {
        return Err(Error::invalid(format!(
            "voxelize: {n} feature rows for {} points",
            pc.len()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(features.clone());
    let v = g.scatter_max_rows(x, &voxel_cells(pc, spec), spec.cell_count())?;
    let [w, h, z] = spec.dims;
    Ok(g.value(v).clone().reshape(vec![h, w, z, c])?)
}
