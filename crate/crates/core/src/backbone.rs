//! One-stream point transformer: per-point local embedding, joint
//! self-attention over `[template; search]` tokens and the optional center
//! points interaction (CPI) stage.

use std::fmt::Write as _;
use std::path::Path;

use onestream_tensor::nn::{LayerNorm, Linear};
use onestream_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ball_query, ball_query_all, squared_distance, Point3, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Template tokens.
    pub n1: usize,
    /// Search tokens.
    pub n2: usize,
    /// Ball-query radius of the local embedding (m).
    pub radius: f64,
    /// Neighbors per ball.
    pub k: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Widths of the local-embedding MLP; the last one must equal `dim`.
    pub mlp_widths: Vec<usize>,
    /// Template center points kept by CPI.
    pub n3: usize,
    pub cpi_blocks: usize,
    /// CPI ball radius; `None` derives it from the template box.
    pub cpi_radius: Option<f64>,
    /// Feed neighbor offsets `s_j - p_i` instead of absolute coordinates.
    pub relative_coords: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n1: 512,
            n2: 1024,
            radius: 0.3,
            k: 32,
            dim: 64,
            blocks: 3,
            heads: 4,
            mlp_widths: vec![16, 32, 64],
            n3: 128,
            cpi_blocks: 1,
            cpi_radius: None,
            relative_coords: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("backbone.{key}"),
                msg,
            })
        };
        for (key, v) in [
            ("n1", self.n1),
            ("n2", self.n2),
            ("k", self.k),
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("n3", self.n3),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if self.dim % self.heads != 0 {
            return bad(
                "heads",
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            );
        }
        if !(self.radius > 0.0) {
            return bad("radius", format!("must be positive, got {}", self.radius));
        }
        if self.mlp_widths.last() != Some(&self.dim) || self.mlp_widths.contains(&0) {
            return bad(
                "mlp_widths",
                format!("{:?} must be nonzero and end with dim {}", self.mlp_widths, self.dim),
            );
        }
        if let Some(r) = self.cpi_radius {
            if !(r > 0.0) {
                return bad("cpi_radius", format!("must be positive, got {r}"));
            }
        }
        Ok(())
    }

    /// CPI radius for a template box footprint.
    pub fn cpi_radius_for(&self, w: f64, l: f64) -> f64 {
        self.cpi_radius.unwrap_or(0.7 * w.min(l) / 2.0)
    }
}

/// Pre-norm transformer block: `x + proj(MHA(LN1 x))`, then
/// `+ fc2(relu(fc1(LN2 x)))` with hidden width `4 * dim`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub heads: usize,
}

/// Output of one block: the new tokens and one row-stochastic attention map
/// per head.
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "{prefix}: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), dim, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, 4 * dim, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), 4 * dim, dim, rng)?,
            dim,
            heads,
        })
    }

    /// Parameter suffixes in registration order.
    pub const PARAM_SUFFIXES: [&'static str; 12] = [
        "ln1.gamma",
        "ln1.beta",
        "qkv.weight",
        "qkv.bias",
        "proj.weight",
        "proj.bias",
        "ln2.gamma",
        "ln2.beta",
        "fc1.weight",
        "fc1.bias",
        "fc2.weight",
        "fc2.bias",
    ];

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<BlockOutput> {
        let dh = self.dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = g.slice(qkv, 1, i * dh, dh)?;
            let k = g.slice(qkv, 1, self.dim + i * dh, dh)?;
            let v = g.slice(qkv, 1, 2 * self.dim + i * dh, dh)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, v)?);
            attention.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let y = self.proj.forward(g, cat)?;
        let x = g.add(x, y)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        Ok(BlockOutput {
            tokens: g.add(x, h)?,
            attention,
        })
    }
}

/// Ball query + shared MLP (ReLU after every layer) + max over neighbors.
#[derive(Debug, Clone)]
pub struct LocalEmbed {
    pub layers: Vec<Linear>,
    pub radius: f64,
    pub k: usize,
    pub relative: bool,
}

impl LocalEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = 3;
        for (i, &w) in cfg.mlp_widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{prefix}.fc{i}"), prev, w, rng)?);
            prev = w;
        }
        Ok(LocalEmbed {
            layers,
            radius: cfg.radius,
            k: cfg.k,
            relative: cfg.relative_coords,
        })
    }

    /// `N x dim` features, one row per point of `pc`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, pc: &PointCloud) -> Result<Var> {
        let n = pc.len();
        let idx = ball_query_all(pc, pc, self.radius, self.k)?;
        let pts = pc.points();
        let mut data = Vec::with_capacity(idx.len() * 3);
        for (slot, &j) in idx.iter().enumerate() {
            let center = &pts[slot / self.k];
            for c in 0..3 {
                let v = if self.relative {
                    pts[j][c] - center[c]
                } else {
                    pts[j][c]
                };
                data.push(T::lit(v));
            }
        }
        let mut h = g.constant(Tensor::new(vec![n * self.k, 3], data)?);
        for layer in &self.layers {
            h = layer.forward(g, h)?;
            h = g.relu(h);
        }
        let width = self.layers.last().map_or(3, |l| l.out_dim);
        let h = g.reshape(h, &[n, self.k, width])?;
        Ok(g.max_axis(h, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: LocalEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub cpi: Vec<TransformerBlock>,
}

/// Result of the joint attention stage.
pub struct OneStream {
    /// `N1 x d`
    pub template: Var,
    /// `N2 x d`
    pub search: Var,
    /// Per block, per head `(N1+N2) x (N1+N2)` attention.
    pub attention: Vec<Vec<Var>>,
}

impl Backbone {
    /// Registers every parameter under `backbone.*`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = LocalEmbed::new(store, "backbone.embed", cfg, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                TransformerBlock::new(store, &format!("backbone.block{i}"), cfg.dim, cfg.heads, rng)
            })
            .collect::<Result<_>>()?;
        let cpi = (0..cfg.cpi_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("backbone.cpi.block{i}"),
                    cfg.dim,
                    cfg.heads,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Backbone {
            cfg: cfg.clone(),
            embed,
            blocks,
            cpi,
        })
    }

    pub fn local_embed<T: Real>(&self, g: &mut Graph<'_, T>, pc: &PointCloud) -> Result<Var> {
        self.embed.forward(g, pc)
    }

    /// Concatenates template and search rows, runs every block, splits back.
    pub fn one_stream<T: Real>(&self, g: &mut Graph<'_, T>, ft: Var, fs: Var) -> Result<OneStream> {
        let n1 = g.shape(ft)[0];
        let n2 = g.shape(fs)[0];
        let mut x = g.concat(&[ft, fs], 0)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = b.forward(g, x)?;
            x = out.tokens;
            attention.push(out.attention);
        }
        Ok(OneStream {
            template: g.slice(x, 0, 0, n1)?,
            search: g.slice(x, 0, n1, n2)?,
            attention,
        })
    }

    /// Secondary attention between the selected template rows `F^c` and the
    /// search rows; returns the refined search features (`N2 x d`).
    pub fn center_points_interaction<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ft: Var,
        fs: Var,
        selection: &CpiSelection,
    ) -> Result<Var> {
        let fc = g.gather_rows(ft, &selection.indices)?;
        let nc = selection.indices.len();
        let n2 = g.shape(fs)[0];
        let mut x = g.concat(&[fc, fs], 0)?;
        for b in &self.cpi {
            x = b.forward(g, x)?.tokens;
        }
        Ok(g.slice(x, 0, nc, n2)?)
    }
}

/// Template rows chosen for CPI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpiSelection {
    pub indices: Vec<usize>,
    /// No point inside the ball, or every template point identical.
    pub degenerate: bool,
}

/// Picks `n3` template points within `radius` of the template centroid.
/// More candidates than `n3` are subsampled (seeded, sorted); fewer are
/// cycled; an empty ball falls back to the point nearest the centroid.
pub fn cpi_select(pt: &PointCloud, radius: f64, n3: usize, seed: u64) -> Result<CpiSelection> {
    let o = pt.centroid().ok_or(Error::EmptyCloud("cpi_select"))?;
    let first = pt.points()[0];
    let identical = pt.points().iter().all(|p| *p == first);
    let r2 = radius * radius;
    let inside: Vec<usize> = (0..pt.len())
        .filter(|&i| squared_distance(&pt.points()[i], &o) <= r2)
        .collect();
    if inside.is_empty() {
        let nearest = ball_query(pt, &o, radius, 1)?[0];
        return Ok(CpiSelection {
            indices: vec![nearest; n3],
            degenerate: true,
        });
    }
    let indices = if inside.len() > n3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, inside.len(), n3)
            .into_iter()
            .map(|i| inside[i])
            .collect();
        picked.sort_unstable();
        picked
    } else {
        (0..n3).map(|i| inside[i % inside.len()]).collect()
    };
    Ok(CpiSelection {
        indices,
        degenerate: identical,
    })
}

/// Materialized attention of one block.
#[derive(Debug, Clone)]
pub struct AttentionMap<T> {
    pub block: usize,
    /// Number of template tokens leading each sequence.
    pub n1: usize,
    /// One `(N1+N2) x (N1+N2)` row-stochastic matrix per head.
    pub heads: Vec<Tensor<T>>,
}

impl<T: Real> AttentionMap<T> {
    pub fn from_graph(g: &Graph<'_, T>, block: usize, n1: usize, heads: &[Var]) -> Self {
        AttentionMap {
            block,
            n1,
            heads: heads.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    /// Attention mass received by each search token: the column sum over
    /// every query row, averaged over heads.
    pub fn search_mass(&self) -> Result<Vec<f64>> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::invalid("attention map has no heads"))?;
        let (rows, cols) = first.dims2()?;
        if rows != cols || self.n1 > cols {
            return Err(Error::invalid(format!(
                "attention map {rows}x{cols} with n1 = {}",
                self.n1
            )));
        }
        let mut mass = vec![0.0; cols - self.n1];
        for h in &self.heads {
            let d = h.data();
            for r in 0..rows {
                for (j, m) in mass.iter_mut().enumerate() {
                    *m += d[r * cols + self.n1 + j].as_f64();
                }
            }
        }
        let nh = self.heads.len() as f64;
        Ok(mass.into_iter().map(|m| m / nh).collect())
    }
}

/// Writes `x,y,z,mass` rows, one per search point.
pub fn export_attention<T: Real>(
    map: &AttentionMap<T>,
    search: &PointCloud,
    path: &Path,
) -> Result<()> {
    let mass = map.search_mass()?;
    if mass.len() != search.len() {
        return Err(Error::invalid(format!(
            "{} search tokens but {} search points",
            mass.len(),
            search.len()
        )));
    }
    let mut out = String::from("x,y,z,mass\n");
    for (p, m) in search.points().iter().zip(mass) {
        let _ = writeln!(out, "{},{},{},{}", p[0], p[1], p[2], m);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a file written by [`export_attention`].
pub fn read_attention_csv(path: &Path) -> Result<Vec<(Point3, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        let [x, y, z, m] = fields[..] else {
            return Err(parse_err(format!("expected 4 fields, got {}", fields.len())));
        };
        rows.push(([x, y, z], m));
    }
    Ok(rows)
}
