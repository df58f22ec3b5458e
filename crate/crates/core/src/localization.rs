//! BEV localization: voxel features to a 2-D image (space-to-channel), a
//! residual conv encoder, four dense heads, target assignment, loss and
//! decoding.
//!
//! Cell convention: a coordinate `x` falls in cell `i = floor((x - x0)/s)`
//! and has offset `(x - x0)/s - i - 0.5`, so a point at a cell center has
//! offset zero and offsets live in `[-0.5, 0.5)`.

use std::fmt::Write as _;
use std::path::Path;

use onestream_tensor::nn::{Conv2d, Deconv2d};
use onestream_tensor::{sigmoid, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{voxel_cells, wrap_angle, Box3D, PointCloud, VoxelSpec};

/// Layer order inside the residual block's outer activation stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaOrder {
    /// ReLU, conv, ReLU.
    ReluConvRelu,
    /// ReLU, conv.
    ReluConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    pub voxel_size: [f64; 3],
    /// Rows (y).
    pub grid_h: usize,
    /// Columns (x).
    pub grid_w: usize,
    /// Vertical cells.
    pub grid_z: usize,
    pub z_min: f64,
    /// Channels of the encoder and trunk.
    pub channels: usize,
    /// Hidden channels of each head.
    pub head_channels: usize,
    pub alpha_order: AlphaOrder,
    /// Add encoder features back after each upsampling step.
    pub skip_connections: bool,
    pub min_overlap: f64,
    pub min_radius: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            voxel_size: [0.3, 0.3, 0.3],
            grid_h: 24,
            grid_w: 38,
            grid_z: 8,
            z_min: -1.2,
            channels: 128,
            head_channels: 64,
            alpha_order: AlphaOrder::ReluConvRelu,
            skip_connections: true,
            min_overlap: 0.7,
            min_radius: 0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("bev.{key}"),
                msg,
            })
        };
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return bad("voxel_size", format!("{:?} must be positive", self.voxel_size));
        }
        for (key, v) in [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("grid_z", self.grid_z),
            ("channels", self.channels),
            ("head_channels", self.head_channels),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(self.min_overlap > 0.0 && self.min_overlap < 1.0) {
            return bad("min_overlap", format!("{} not in (0, 1)", self.min_overlap));
        }
        if !self.z_min.is_finite() {
            return bad("z_min", "must be finite".into());
        }
        Ok(())
    }

    /// Grid centered on the origin in x and y.
    pub fn voxel_spec(&self) -> VoxelSpec {
        let [sx, sy, _] = self.voxel_size;
        VoxelSpec {
            size: self.voxel_size,
            origin: [
                -(self.grid_w as f64) * sx / 2.0,
                -(self.grid_h as f64) * sy / 2.0,
                self.z_min,
            ],
            dims: [self.grid_w, self.grid_h, self.grid_z],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub offset: f64,
    pub theta: f64,
    pub z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            offset: 1.0,
            theta: 1.0,
            z: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("cls", self.cls),
            ("offset", self.offset),
            ("theta", self.theta),
            ("z", self.z),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("loss.{key}"),
                    msg: format!("weight {v} must be finite and non-negative"),
                });
            }
        }
        Ok(())
    }
}

/// Dense head outputs, all `H x W x C`. The heatmap holds probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMaps<T> {
    pub heatmap: Tensor<T>,
    pub offset: Tensor<T>,
    pub theta: Tensor<T>,
    pub z: Tensor<T>,
}

/// Head outputs as graph nodes; the heatmap is kept as logits.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub heatmap_logits: Var,
    pub offset: Var,
    pub theta: Var,
    pub z: Var,
}

impl HeadOutputs {
    pub fn maps<T: Real>(&self, g: &Graph<'_, T>) -> LocalizationMaps<T> {
        let logits = g.value(self.heatmap_logits);
        let heatmap = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().map(|&v| sigmoid(v)).collect(),
        )
        .expect("same shape");
        LocalizationMaps {
            heatmap,
            offset: g.value(self.offset).clone(),
            theta: g.value(self.theta).clone(),
            z: g.value(self.z).clone(),
        }
    }
}

/// Max-pools per-point features into the voxel grid and folds the vertical
/// axis into channels: entry `(h, w, z*d + c)` of the `H x W x (Z*d)` image
/// is channel `c` of voxel `(w, h, z)`.
pub fn bev_image<T: Real>(
    g: &mut Graph<'_, T>,
    features: Var,
    points: &PointCloud,
    spec: &VoxelSpec,
) -> Result<Var> {
    spec.validate()?;
    let (n, d) = (g.shape(features)[0], g.shape(features)[1]);
    if n != points.len() {
        return Err(Error::invalid(format!(
            "bev_image: {n} feature rows for {} points",
            points.len()
        )));
    }
    let v = g.scatter_max_rows(features, &voxel_cells(points, spec), spec.cell_count())?;
    let [w, h, z] = spec.dims;
    Ok(g.reshape(v, &[h, w, z * d])?)
}

#[derive(Debug, Clone)]
struct Head {
    hidden: Conv2d,
    out: Conv2d,
}

impl Head {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Head {
            hidden: Conv2d::new(store, &format!("{prefix}.0"), cin, hidden, 3, 1, rng)?,
            out: Conv2d::new(store, &format!("{prefix}.1"), hidden, cout, 1, 1, rng)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        Ok(self.out.forward(g, h)?)
    }
}

/// Heatmap bias so the initial probability is about 0.1.
const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Encoder, trunk and heads; parameters under `localization.*`.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub cfg: BevConfig,
    /// Bias-free 3x3 reduction from `Z*d` to `channels`.
    reduce: ParamId,
    beta: [Conv2d; 2],
    alpha: Conv2d,
    down: [Conv2d; 2],
    up: [Deconv2d; 2],
    post: Conv2d,
    heatmap: Head,
    offset: Head,
    theta: Head,
    z: Head,
}

impl Localizer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &BevConfig,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let p = "localization";
        let fan_in = 9 * cfg.grid_z * feature_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let reduce = store.add(
            format!("{p}.reduce.weight"),
            Tensor::from_fn(vec![fan_in, c], |_| T::lit(rng.gen_range(-bound..=bound))),
        )?;
        let conv = |store: &mut ParamStore<T>, name: &str, stride: usize, rng: &mut R| {
            Conv2d::new(store, &format!("{p}.{name}"), c, c, 3, stride, rng)
        };
        let beta = [conv(store, "eem.beta0", 1, rng)?, conv(store, "eem.beta1", 1, rng)?];
        let alpha = conv(store, "eem.alpha", 1, rng)?;
        let down = [conv(store, "trunk.down0", 2, rng)?, conv(store, "trunk.down1", 2, rng)?];
        let up = [
            Deconv2d::new(store, &format!("{p}.trunk.up0"), c, c, rng)?,
            Deconv2d::new(store, &format!("{p}.trunk.up1"), c, c, rng)?,
        ];
        let post = conv(store, "trunk.post", 1, rng)?;
        let hc = cfg.head_channels;
        let heatmap = Head::new(store, &format!("{p}.head.heatmap"), c, hc, 1, rng)?;
        store.set(
            &format!("{p}.head.heatmap.1.bias"),
            Tensor::full(vec![1], T::lit(HEATMAP_PRIOR_BIAS)),
        )?;
        Ok(Localizer {
            cfg: cfg.clone(),
            reduce,
            beta,
            alpha,
            down,
            up,
            post,
            heatmap,
            offset: Head::new(store, &format!("{p}.head.offset"), c, hc, 2, rng)?,
            theta: Head::new(store, &format!("{p}.head.theta"), c, hc, 1, rng)?,
            z: Head::new(store, &format!("{p}.head.z"), c, hc, 1, rng)?,
        })
    }

    /// Residual block on the reduced image:
    /// `F_r = alpha(F_v + beta(F_v))`, `beta = conv, relu, conv`.
    pub fn residual<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let w = g.param(self.reduce);
        let zero = g.constant(Tensor::zeros(vec![self.cfg.channels]));
        let fv = g.conv2d(image, w, zero, 3, 1, 1)?;
        let b = self.beta[0].forward(g, fv)?;
        let b = g.relu(b);
        let b = self.beta[1].forward(g, b)?;
        let s = g.add(fv, b)?;
        let s = g.relu(s);
        let s = self.alpha.forward(g, s)?;
        Ok(match self.cfg.alpha_order {
            AlphaOrder::ReluConvRelu => g.relu(s),
            AlphaOrder::ReluConv => s,
        })
    }

    /// Two stride-2 convolutions, two 2x deconvolutions back to `H x W`, and
    /// a final convolution.
    pub fn trunk<T: Real>(&self, g: &mut Graph<'_, T>, fr: Var) -> Result<Var> {
        let (h, w) = (g.shape(fr)[0], g.shape(fr)[1]);
        let d0 = self.down[0].forward(g, fr)?;
        let d0 = g.relu(d0);
        let d1 = self.down[1].forward(g, d0)?;
        let d1 = g.relu(d1);
        let (h1, w1) = (g.shape(d0)[0], g.shape(d0)[1]);
        let u = self.up[0].forward(g, d1, h1, w1)?;
        let mut u = g.relu(u);
        if self.cfg.skip_connections {
            u = g.add(u, d0)?;
        }
        let u = self.up[1].forward(g, u, h, w)?;
        let mut u = g.relu(u);
        if self.cfg.skip_connections {
            u = g.add(u, fr)?;
        }
        let y = self.post.forward(g, u)?;
        Ok(g.relu(y))
    }

    /// Voxelize, fold, residual block and trunk: `H x W x channels`.
    pub fn eem_encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        points: &PointCloud,
    ) -> Result<Var> {
        let image = bev_image(g, features, points, &self.cfg.voxel_spec())?;
        let fr = self.residual(g, image)?;
        self.trunk(g, fr)
    }

    pub fn heads<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<HeadOutputs> {
        Ok(HeadOutputs {
            heatmap_logits: self.heatmap.forward(g, x)?,
            offset: self.offset.forward(g, x)?,
            theta: self.theta.forward(g, x)?,
            z: self.z.forward(g, x)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        points: &PointCloud,
    ) -> Result<HeadOutputs> {
        let x = self.eem_encode(g, features, points)?;
        self.heads(g, x)
    }
}

/// Integer Gaussian radius (in cells) for a box footprint of `h x w` cells:
/// the largest radius at which all three corner-displacement cases keep an
/// IoU of at least `min_overlap`.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> usize {
    let o = min_overlap;
    // Both corners shifted by r.
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    // Prediction shrunk by r on every side.
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).sqrt()) / 8.0;
    // Prediction grown by r on every side.
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);
    let r = r1.min(r2).min(r3);
    if r.is_finite() && r > 0.0 {
        r.floor() as usize
    } else {
        0
    }
}

/// Training targets for one search region.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `H x W` splatted heatmap, peak 1 at the center cell.
    pub heatmap: Vec<f64>,
    /// `(row, col)` of the positive cell.
    pub center: (usize, usize),
    /// `[x, y]` offsets at the positive cell.
    pub offset: [f64; 2],
    pub theta: f64,
    pub z: f64,
    pub radius: usize,
    /// The gt center lay outside the grid and was clamped to the border.
    pub clamped: bool,
}

impl Targets {
    /// Dense maps holding the targets; offset, orientation and height are
    /// zero away from the positive cell.
    pub fn to_maps<T: Real>(&self, cfg: &BevConfig) -> LocalizationMaps<T> {
        let (h, w) = (cfg.grid_h, cfg.grid_w);
        let (r, c) = self.center;
        let cell = r * w + c;
        let mut offset = Tensor::zeros(vec![h, w, 2]);
        offset.data_mut()[cell * 2] = T::lit(self.offset[0]);
        offset.data_mut()[cell * 2 + 1] = T::lit(self.offset[1]);
        let mut theta = Tensor::zeros(vec![h, w, 1]);
        theta.data_mut()[cell] = T::lit(self.theta);
        let mut z = Tensor::zeros(vec![h, w, 1]);
        z.data_mut()[cell] = T::lit(self.z);
        LocalizationMaps {
            heatmap: Tensor::from_fn(vec![h, w, 1], |i| T::lit(self.heatmap[i])),
            offset,
            theta,
            z,
        }
    }

    /// Positive-cell mask, row-major.
    pub fn positive_mask(&self, cfg: &BevConfig) -> Vec<bool> {
        let mut m = vec![false; cfg.grid_h * cfg.grid_w];
        m[self.center.0 * cfg.grid_w + self.center.1] = true;
        m
    }
}

/// Builds targets for `gt`, given in the search frame.
pub fn assign_targets(gt: &Box3D, cfg: &BevConfig) -> Targets {
    let spec = cfg.voxel_spec();
    let [sx, sy, _] = cfg.voxel_size;
    let (w, h) = (cfg.grid_w, cfg.grid_h);
    let mut clamped = false;
    let mut axis = |v: f64, origin: f64, s: f64, n: usize| -> (usize, f64) {
        let u = (v - origin) / s;
        let i = u.floor();
        if i < 0.0 || i >= n as f64 {
            clamped = true;
            let i = i.clamp(0.0, (n - 1) as f64);
            return (i as usize, (u - i - 0.5).clamp(-0.5, 0.5));
        }
        (i as usize, u - i - 0.5)
    };
    let (col, ox) = axis(gt.center[0], spec.origin[0], sx, w);
    let (row, oy) = axis(gt.center[1], spec.origin[1], sy, h);
    let radius = gaussian_radius(gt.w / sy, gt.l / sx, cfg.min_overlap).max(cfg.min_radius);
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let mut heatmap = vec![0.0; h * w];
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (rr, cc) = (row as isize + dy, col as isize + dx);
            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let slot = &mut heatmap[rr as usize * w + cc as usize];
            *slot = f64::max(*slot, v);
        }
    }
    Targets {
        heatmap,
        center: (row, col),
        offset: [ox, oy],
        theta: gt.heading,
        z: gt.center[2],
        radius,
        clamped,
    }
}

/// Sigmoid clamp used before every log in the focal loss.
pub const HEATMAP_EPS: f64 = 1e-4;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;

/// Loss node and its unweighted components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub offset: f64,
    pub theta: f64,
    pub z: f64,
}

/// Penalty-reduced focal loss on sigmoid(logits), normalized by the number
/// of positive cells (target exactly 1). Returns value and d/dlogits.
pub fn focal_loss(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let mut positives = 0usize;
    for (i, (&x, &y)) in logits.iter().zip(target).enumerate() {
        let raw = 1.0 / (1.0 + (-x).exp());
        let p = raw.clamp(HEATMAP_EPS, 1.0 - HEATMAP_EPS);
        let dp_dx = if raw == p { p * (1.0 - p) } else { 0.0 };
        let (l, dl_dp) = if y == 1.0 {
            positives += 1;
            let q = 1.0 - p;
            (
                -q.powi(FOCAL_ALPHA) * p.ln(),
                FOCAL_ALPHA as f64 * q.powi(FOCAL_ALPHA - 1) * p.ln() - q.powi(FOCAL_ALPHA) / p,
            )
        } else {
            let wneg = (1.0 - y).powi(FOCAL_BETA);
            let lq = (1.0 - p).ln();
            (
                -wneg * p.powi(FOCAL_ALPHA) * lq,
                -wneg
                    * (FOCAL_ALPHA as f64 * p.powi(FOCAL_ALPHA - 1) * lq
                        - p.powi(FOCAL_ALPHA) / (1.0 - p)),
            )
        };
        loss += l;
        grad[i] = dl_dp * dp_dx;
    }
    let norm = positives.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= norm);
    (loss / norm, grad)
}

/// Weighted sum of the focal heatmap loss and the L1 offset, wrapped-angle
/// and height losses at the positive cell.
pub fn compute_loss<T: Real>(
    g: &mut Graph<'_, T>,
    pred: &HeadOutputs,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<LossParts> {
    let shape = g.shape(pred.heatmap_logits).to_vec();
    if shape.len() != 3 || shape[2] != 1 || shape[0] * shape[1] != targets.heatmap.len() {
        return Err(Error::invalid(format!(
            "compute_loss: heatmap {shape:?} vs {} target cells",
            targets.heatmap.len()
        )));
    }
    let w = shape[1];
    let cell = targets.center.0 * w + targets.center.1;

    let logits = g.value(pred.heatmap_logits).to_f64_vec();
    let (cls, dcls) = focal_loss(&logits, &targets.heatmap);
    let cls_var = g.scalar_with_grad(
        pred.heatmap_logits,
        T::lit(cls),
        dcls.into_iter().map(T::lit).collect(),
    )?;

    let l1_at = |g: &mut Graph<'_, T>, v: Var, want: &[f64], wrap: bool| -> Result<(Var, f64)> {
        let values = g.value(v).to_f64_vec();
        let c = want.len();
        let mut dx = vec![T::zero(); values.len()];
        let mut total = 0.0;
        for (k, &t) in want.iter().enumerate() {
            let idx = cell * c + k;
            let mut diff = values[idx] - t;
            if wrap {
                diff = wrap_angle(diff);
            }
            total += diff.abs() / c as f64;
            dx[idx] = T::lit(diff.signum() * (diff != 0.0) as i32 as f64 / c as f64);
        }
        Ok((g.scalar_with_grad(v, T::lit(total), dx)?, total))
    };
    let (off_var, off) = l1_at(g, pred.offset, &targets.offset, false)?;
    let (theta_var, theta) = l1_at(g, pred.theta, &[targets.theta], true)?;
    let (z_var, z) = l1_at(g, pred.z, &[targets.z], false)?;

    let parts = [
        (cls_var, weights.cls),
        (off_var, weights.offset),
        (theta_var, weights.theta),
        (z_var, weights.z),
    ];
    let mut total = g.scale(parts[0].0, T::lit(parts[0].1));
    for &(v, wt) in &parts[1..] {
        let s = g.scale(v, T::lit(wt));
        total = g.add(total, s)?;
    }
    Ok(LossParts {
        total,
        cls,
        offset: off,
        theta,
        z,
    })
}

/// Decoded box in the search frame plus the winning cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub bbox: Box3D,
    pub cell: (usize, usize),
    pub score: f64,
}

/// Argmax cell of the heatmap (first in row-major order on ties), refined by
/// the offset map; height and heading are read at that cell and the size is
/// copied from `size = (w, l, h)`.
pub fn decode<T: Real>(maps: &LocalizationMaps<T>, cfg: &BevConfig, size: [f64; 3]) -> Result<Decoded> {
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let expect = |t: &Tensor<T>, c: usize, name: &str| -> Result<()> {
        if t.shape() != [h, w, c] {
            return Err(Error::invalid(format!(
                "decode: {name} map {:?}, expected [{h}, {w}, {c}]",
                t.shape()
            )));
        }
        Ok(())
    };
    expect(&maps.heatmap, 1, "heatmap")?;
    expect(&maps.offset, 2, "offset")?;
    expect(&maps.theta, 1, "theta")?;
    expect(&maps.z, 1, "z")?;
    let hm = maps.heatmap.data();
    let mut best = 0;
    for (i, v) in hm.iter().enumerate() {
        if *v > hm[best] {
            best = i;
        }
    }
    let (row, col) = (best / w, best % w);
    let spec = cfg.voxel_spec();
    let [sx, sy, _] = cfg.voxel_size;
    let ox = maps.offset.data()[best * 2].as_f64();
    let oy = maps.offset.data()[best * 2 + 1].as_f64();
    let x = spec.origin[0] + (col as f64 + 0.5 + ox) * sx;
    let y = spec.origin[1] + (row as f64 + 0.5 + oy) * sy;
    let z = maps.z.data()[best].as_f64();
    let theta = maps.theta.data()[best].as_f64();
    Ok(Decoded {
        bbox: Box3D::new([x, y, z], size[0], size[1], size[2], theta)?,
        cell: (row, col),
        score: hm[best].as_f64(),
    })
}

/// Writes one channel of an `H x W x C` map as a comma-separated grid, one
/// line per row.
pub fn write_map_csv<T: Real>(map: &Tensor<T>, channel: usize, path: &Path) -> Result<()> {
    let [h, w, c] = map.shape()[..] else {
        return Err(Error::invalid(format!("map shape {:?} is not H x W x C", map.shape())));
    };
    if channel >= c {
        return Err(Error::invalid(format!("channel {channel} of {c}")));
    }
    let mut out = String::new();
    for r in 0..h {
        for col in 0..w {
            if col > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", map.data()[(r * w + col) * c + channel]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
