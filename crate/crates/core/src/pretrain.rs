//! Masked point modeling: patchify a cloud, encode the visible patches,
//! reconstruct the masked ones, and hand the encoder blocks to the tracker.

use std::f64::consts::PI;

use onestream_tensor::nn::{LayerNorm, Linear};
use onestream_tensor::{AdamState, Checkpoint, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TransformerBlock;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, squared_distance, Point3, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Patch count (FPS centers).
    pub patches: usize,
    /// Points per patch.
    pub k: usize,
    pub mask_ratio: f64,
    pub dim: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    /// Hidden width of the per-point patch MLP.
    pub embed_hidden: usize,
    /// Hidden width of the positional MLP.
    pub pos_hidden: usize,
    /// One epoch is one full-batch optimizer step over the corpus.
    pub epochs: usize,
    pub lr: f64,
    /// Draw a fresh mask every epoch instead of fixing one per shape.
    pub remask_each_epoch: bool,
    /// Synthetic corpus size and points per shape.
    pub shapes: usize,
    pub points: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            patches: 32,
            k: 16,
            mask_ratio: 0.6,
            dim: 64,
            encoder_blocks: 3,
            encoder_heads: 4,
            decoder_blocks: 2,
            decoder_heads: 8,
            embed_hidden: 32,
            pos_hidden: 64,
            epochs: 500,
            lr: 3e-4,
            remask_each_epoch: false,
            shapes: 8,
            points: 256,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("pretrain.{key}"),
                msg,
            })
        };
        for (key, v) in [
            ("patches", self.patches),
            ("k", self.k),
            ("dim", self.dim),
            ("encoder_heads", self.encoder_heads),
            ("decoder_heads", self.decoder_heads),
            ("embed_hidden", self.embed_hidden),
            ("pos_hidden", self.pos_hidden),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", format!("{} not in [0, 1)", self.mask_ratio));
        }
        if self.masked_count() >= self.patches {
            return bad("mask_ratio", "masks every patch".into());
        }
        for (key, heads) in [
            ("encoder_heads", self.encoder_heads),
            ("decoder_heads", self.decoder_heads),
        ] {
            if self.dim % heads != 0 {
                return bad(key, format!("dim {} not divisible by {heads}", self.dim));
            }
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        (self.patches as f64 * self.mask_ratio).round() as usize
    }
}

/// FPS centers, KNN patches relative to their center, and a patch mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point3>,
    /// `patches * k` offsets, patch-major.
    pub patches: Vec<Point3>,
    pub k: usize,
    pub mask: Vec<bool>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[Point3] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }

    /// Patch `i` in the original coordinates.
    pub fn absolute(&self, i: usize) -> Vec<Point3> {
        let c = self.centers[i];
        self.patch(i)
            .iter()
            .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            .collect()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<Point3>, Vec<Point3>) {
        let centers = idx.iter().map(|&i| self.centers[i]).collect();
        let patches = idx.iter().flat_map(|&i| self.patch(i).to_vec()).collect();
        (centers, patches)
    }
}

pub fn patchify(pc: &PointCloud, cfg: &PretrainConfig, seed: u64) -> Result<PatchSet> {
    if pc.len() < cfg.k {
        return Err(Error::invalid(format!(
            "patchify: {} points but k = {}",
            pc.len(),
            cfg.k
        )));
    }
    let centers = pc.select(&farthest_point_sample(pc, cfg.patches)?);
    let neighborhoods = knn(pc, &centers, cfg.k)?;
    let pts = pc.points();
    let mut patches = Vec::with_capacity(cfg.patches * cfg.k);
    for (c, nb) in centers.points().iter().zip(&neighborhoods) {
        for &j in nb {
            patches.push([pts[j][0] - c[0], pts[j][1] - c[1], pts[j][2] - c[2]]);
        }
    }
    let mut mask = vec![false; cfg.patches];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, cfg.patches, cfg.masked_count()) {
        mask[i] = true;
    }
    Ok(PatchSet {
        centers: centers.into_points(),
        patches,
        k: cfg.k,
        mask,
    })
}

/// Symmetric Chamfer distance: mean squared distance from each predicted
/// point to its nearest target plus the reverse term.
pub fn chamfer_l2(pred: &[Point3], target: &[Point3]) -> Result<f64> {
    Ok(chamfer_with_grad(pred, target)?.0)
}

/// Chamfer value and its gradient with respect to `pred`.
pub fn chamfer_with_grad(pred: &[Point3], target: &[Point3]) -> Result<(f64, Vec<Point3>)> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud("chamfer_l2"));
    }
    let nearest = |p: &Point3, set: &[Point3]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, q) in set.iter().enumerate() {
            let d = squared_distance(p, q);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    let (np, nt) = (pred.len() as f64, target.len() as f64);
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut forward = 0.0;
    for (i, p) in pred.iter().enumerate() {
        let (j, d) = nearest(p, target);
        forward += d;
        for c in 0..3 {
            grad[i][c] += 2.0 * (p[c] - target[j][c]) / np;
        }
    }
    let mut backward = 0.0;
    for t in target {
        let (i, d) = nearest(t, pred);
        backward += d;
        for c in 0..3 {
            grad[i][c] += 2.0 * (pred[i][c] - t[c]) / nt;
        }
    }
    Ok((forward / np + backward / nt, grad))
}

/// Mean Chamfer over patches of `pred` (`patches*k x 3`) against the
/// matching target patches, as a differentiable scalar.
pub fn patch_chamfer_loss<T: Real>(
    g: &mut Graph<'_, T>,
    pred: Var,
    target: &[Point3],
    k: usize,
) -> Result<Var> {
    let values: Vec<f64> = g.value(pred).to_f64_vec();
    if values.len() != target.len() * 3 || k == 0 || target.len() % k != 0 {
        return Err(Error::invalid(format!(
            "patch_chamfer_loss: {} predicted coordinates for {} targets (k = {k})",
            values.len(),
            target.len()
        )));
    }
    let pts: Vec<Point3> = values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let patches = target.len() / k;
    let mut total = 0.0;
    let mut dx = Vec::with_capacity(values.len());
    for p in 0..patches {
        let range = p * k..(p + 1) * k;
        let (v, grad) = chamfer_with_grad(&pts[range.clone()], &target[range])?;
        total += v;
        dx.extend(grad.iter().flatten().map(|&d| T::lit(d / patches as f64)));
    }
    Ok(g.scalar_with_grad(pred, T::lit(total / patches as f64), dx)?)
}

/// Encoder/decoder used for masked point modeling. Parameters live under
/// `encoder.*`, `decoder.*`, `pos_mlp.*` and `mask_token`.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub cfg: PretrainConfig,
    pub patch_embed: [Linear; 2],
    pub pos_mlp: [Linear; 2],
    pub encoder: Vec<TransformerBlock>,
    pub encoder_norm: LayerNorm,
    pub mask_token: ParamId,
    pub decoder: Vec<TransformerBlock>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
}

impl PretrainModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &PretrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_embed = [
            Linear::new(store, "encoder.patch_embed.fc0", 3, cfg.embed_hidden, rng)?,
            Linear::new(store, "encoder.patch_embed.fc1", cfg.embed_hidden, d, rng)?,
        ];
        let pos_mlp = [
            Linear::new(store, "pos_mlp.fc0", 3, cfg.pos_hidden, rng)?,
            Linear::new(store, "pos_mlp.fc1", cfg.pos_hidden, d, rng)?,
        ];
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| TransformerBlock::new(store, &format!("encoder.block{i}"), d, cfg.encoder_heads, rng))
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d)?;
        let token = Tensor::from_fn(vec![1, d], |_| T::lit(rng.gen_range(-0.02..0.02)));
        let mask_token = store.add("mask_token", token)?;
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| TransformerBlock::new(store, &format!("decoder.block{i}"), d, cfg.decoder_heads, rng))
            .collect::<Result<_>>()?;
        let decoder_norm = LayerNorm::new(store, "decoder.norm", d)?;
        let head = Linear::new(store, "decoder.head", d, 3 * cfg.k, rng)?;
        Ok(PretrainModel {
            cfg: cfg.clone(),
            patch_embed,
            pos_mlp,
            encoder,
            encoder_norm,
            mask_token,
            decoder,
            decoder_norm,
            head,
        })
    }

    fn points_input<T: Real>(g: &mut Graph<'_, T>, pts: &[Point3]) -> Result<Var> {
        let data = pts.iter().flatten().map(|&v| T::lit(v)).collect();
        Ok(g.constant(Tensor::new(vec![pts.len(), 3], data)?))
    }

    fn pos<T: Real>(&self, g: &mut Graph<'_, T>, centers: &[Point3]) -> Result<Var> {
        let x = Self::points_input(g, centers)?;
        let h = self.pos_mlp[0].forward(g, x)?;
        let h = g.relu(h);
        Ok(self.pos_mlp[1].forward(g, h)?)
    }

    /// Shared point MLP then max over each patch; `patches.len() = n * k`.
    fn embed<T: Real>(&self, g: &mut Graph<'_, T>, patches: &[Point3]) -> Result<Var> {
        let n = patches.len() / self.cfg.k;
        let x = Self::points_input(g, patches)?;
        let h = self.patch_embed[0].forward(g, x)?;
        let h = g.relu(h);
        let h = self.patch_embed[1].forward(g, h)?;
        let h = g.reshape(h, &[n, self.cfg.k, self.cfg.dim])?;
        Ok(g.max_axis(h, 1)?)
    }

    /// Tokens of the visible patches after the encoder blocks.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        patches: &[Point3],
        centers: &[Point3],
    ) -> Result<Var> {
        if centers.is_empty() || patches.len() != centers.len() * self.cfg.k {
            return Err(Error::invalid(format!(
                "encode: {} patch points for {} centers (k = {})",
                patches.len(),
                centers.len(),
                self.cfg.k
            )));
        }
        let f = self.embed(g, patches)?;
        let p = self.pos(g, centers)?;
        let mut x = g.add(f, p)?;
        for b in &self.encoder {
            x = b.forward(g, x)?.tokens;
        }
        Ok(self.encoder_norm.forward(g, x)?)
    }

    /// Predicted relative patches for the masked centers
    /// (`masked * k x 3`).
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        encoded: Var,
        visible_centers: &[Point3],
        masked_centers: &[Point3],
    ) -> Result<Var> {
        let (v, m) = (visible_centers.len(), masked_centers.len());
        if m == 0 {
            return Err(Error::invalid("decode: no masked patches"));
        }
        let token = g.param(self.mask_token);
        let tokens = g.gather_rows(token, &vec![0; m])?;
        let x = g.concat(&[encoded, tokens], 0)?;
        let all: Vec<Point3> = visible_centers.iter().chain(masked_centers).copied().collect();
        let p = self.pos(g, &all)?;
        let mut x = g.add(x, p)?;
        for b in &self.decoder {
            x = b.forward(g, x)?.tokens;
        }
        let x = self.decoder_norm.forward(g, x)?;
        let x = g.slice(x, 0, v, m)?;
        let y = self.head.forward(g, x)?;
        Ok(g.reshape(y, &[m * self.cfg.k, 3])?)
    }

    /// Mean patch Chamfer over the masked patches of one shape.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, ps: &PatchSet) -> Result<Var> {
        let (vis_c, vis_p) = ps.gather(&ps.visible());
        let (mask_c, mask_p) = ps.gather(&ps.masked());
        let te = self.encode(g, &vis_p, &vis_c)?;
        let pred = self.decode(g, te, &vis_c, &mask_c)?;
        patch_chamfer_loss(g, pred, &mask_p, ps.k)
    }

    /// Mean loss over a batch of patch sets, as one differentiable scalar.
    pub fn batch_loss<T: Real>(&self, g: &mut Graph<'_, T>, batch: &[PatchSet]) -> Result<Var> {
        let losses = batch
            .iter()
            .map(|ps| self.loss(g, ps))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&losses, 0)?;
        Ok(g.mean(stacked))
    }
}

/// Noisy sphere, cuboid and cylinder surfaces (cycled), randomly scaled and
/// rotated about z.
pub fn primitive_shapes(count: usize, points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|s| {
            let scale = rng.gen_range(0.6..1.0);
            let yaw: f64 = rng.gen_range(-PI..PI);
            let (sn, cs) = yaw.sin_cos();
            let pts = (0..points)
                .map(|_| {
                    let p = match s % 3 {
                        0 => sphere_point(&mut rng),
                        1 => cuboid_point(&mut rng, [1.0, 0.6, 0.4]),
                        _ => cylinder_point(&mut rng, 0.5, 1.0),
                    };
                    let n = [0; 3].map(|_: i32| rng.gen_range(-0.01..0.01));
                    let (x, y, z) = (p[0] * scale, p[1] * scale, p[2] * scale);
                    [cs * x - sn * y + n[0], sn * x + cs * y + n[1], z + n[2]]
                })
                .collect();
            PointCloud::new(pts)
        })
        .collect()
}

fn sphere_point<R: Rng>(rng: &mut R) -> Point3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let a: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * a.cos(), r * a.sin(), z]
}

/// Uniform over the surface of an axis-aligned box with half extents `e`.
fn cuboid_point<R: Rng>(rng: &mut R, e: Point3) -> Point3 {
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = i;
            break;
        }
        pick -= a;
    }
    let mut p = [0; 3].map(|_: i32| 0.0);
    for (c, v) in p.iter_mut().enumerate() {
        *v = rng.gen_range(-e[c]..e[c]);
    }
    p[axis] = if rng.gen_bool(0.5) { e[axis] } else { -e[axis] };
    p
}

fn cylinder_point<R: Rng>(rng: &mut R, radius: f64, half_h: f64) -> Point3 {
    let side = 2.0 * PI * radius * 2.0 * half_h;
    let cap = PI * radius * radius;
    let u = rng.gen_range(0.0..side + 2.0 * cap);
    let a: f64 = rng.gen_range(0.0..2.0 * PI);
    if u < side {
        [radius * a.cos(), radius * a.sin(), rng.gen_range(-half_h..half_h)]
    } else {
        let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
        let z = if u < side + cap { half_h } else { -half_h };
        [r * a.cos(), r * a.sin(), z]
    }
}

/// Full-batch Adam over fixed shapes; returns the loss before every step.
/// `on_step(step, loss)` runs after each step.
pub fn pretrain<T: Real>(
    store: &mut ParamStore<T>,
    model: &PretrainModel,
    shapes: &[PointCloud],
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let patch_all = |epoch: u64| -> Result<Vec<PatchSet>> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| patchify(s, cfg, mask_seed(seed, epoch, i as u64)))
            .collect()
    };
    let mut batch = patch_all(0)?;
    let mut adam = AdamState::new(store, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        if cfg.remask_each_epoch && step > 0 {
            batch = patch_all(step as u64)?;
        }
        let grads = {
            let mut g = Graph::new(&*store);
            let l = model.batch_loss(&mut g, &batch)?;
            let value = g.value(l).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            losses.push(value);
            g.backward(l)?
        };
        adam.step(store, &grads)?;
        on_step(step, losses[step]);
    }
    Ok(losses)
}

fn mask_seed(seed: u64, epoch: u64, shape: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ shape.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Copies `encoder.block{i}.*` onto `backbone.block{i}.*` for every backbone
/// block, bit-exactly. Nothing is written unless every pair matches.
pub fn transfer_weights<T: Real>(
    pretrained: &Checkpoint<T>,
    backbone: &mut ParamStore<T>,
    blocks: usize,
) -> Result<usize> {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for i in 0..blocks {
        for suffix in TransformerBlock::PARAM_SUFFIXES {
            let src = format!("encoder.block{i}.{suffix}");
            let dst = format!("backbone.block{i}.{suffix}");
            match (pretrained.get(&src), backbone.by_name(&dst)) {
                (Some(s), Some(d)) if s.shape() == d.shape() => pairs.push((dst, s.clone())),
                (Some(_), Some(_)) => mismatched.push(dst),
                (None, _) => missing.push(src),
                (_, None) => missing.push(dst),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Transfer {
            names: missing,
            msg: "missing parameters".into(),
        });
    }
    if !mismatched.is_empty() {
        return Err(Error::Transfer {
            names: mismatched,
            msg: "shape mismatch".into(),
        });
    }
    let n = pairs.len();
    for (name, t) in pairs {
        backbone.set(&name, t)?;
    }
    Ok(n)
}
