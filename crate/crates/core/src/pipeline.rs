//! Template and search construction, the tracker forward pass, training and
//! sequential tracking.

use std::fmt;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use onestream_tensor::checkpoint::Checkpoint;
use onestream_tensor::optim::{step_decay_lr, AdamState};
use onestream_tensor::{Gradients, Graph, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{cpi_select, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::geometry::{
    crop_and_sample, points_in_box, sample_points, wrap_angle, Box3D, PointCloud, RigidTransform,
};
use crate::localization::{
    assign_targets, compute_loss, decode, BevConfig, HeadOutputs, Localizer, LossWeights,
};

/// Which past boxes feed the template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateScheme {
    #[serde(rename = "first_gt")]
    FirstGt,
    #[serde(rename = "prev")]
    PreviousResult,
    #[serde(rename = "first+prev")]
    FirstGtPreviousResult,
    #[serde(rename = "all_prev")]
    AllPrevious,
}

impl TemplateScheme {
    pub const ALL: [TemplateScheme; 4] = [
        TemplateScheme::FirstGt,
        TemplateScheme::PreviousResult,
        TemplateScheme::FirstGtPreviousResult,
        TemplateScheme::AllPrevious,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateScheme::FirstGt => "first_gt",
            TemplateScheme::PreviousResult => "prev",
            TemplateScheme::FirstGtPreviousResult => "first+prev",
            TemplateScheme::AllPrevious => "all_prev",
        }
    }

    /// History indices used when `t` frames (`0..t`) are known. Duplicates
    /// are removed, so every scheme reduces to `[0]` at `t = 1`.
    pub fn sources(self, t: usize) -> Vec<usize> {
        assert!(t >= 1, "template needs at least one frame");
        let last = t - 1;
        match self {
            TemplateScheme::FirstGt => vec![0],
            TemplateScheme::PreviousResult => vec![last],
            TemplateScheme::FirstGtPreviousResult if last == 0 => vec![0],
            TemplateScheme::FirstGtPreviousResult => vec![0, last],
            TemplateScheme::AllPrevious => (0..t).collect(),
        }
    }
}

impl fmt::Display for TemplateScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateScheme::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown template scheme `{s}`")))
    }
}

/// How several template crops are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMerge {
    /// Each crop goes into its own box frame, then the crops are unioned.
    PerBox,
    /// Crops are unioned in world coordinates, then expressed in the frame of
    /// the most recent source box.
    World,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub backbone: BackboneConfig,
    pub bev: BevConfig,
    pub loss: LossWeights,
    pub pretrain: PretrainConfig,
    pub template_scheme: TemplateScheme,
    pub template_merge: TemplateMerge,
    /// Growth of each template box before cropping (m, every extent).
    pub template_enlarge: f64,
    /// Growth of the reference box before the search crop (m, every extent).
    pub search_enlarge: f64,
    /// Half-ranges of the uniform train-time shift, `[x, y, z]` in meters.
    pub train_shift: [f64; 3],
    /// Half-range of the train-time heading jitter, degrees.
    pub train_yaw_jitter_deg: f64,
    /// Train-time shift half-ranges for history boxes after the first,
    /// standing in for imperfect previous results.
    pub template_shift: [f64; 3],
    pub template_yaw_jitter_deg: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub cpi_enabled: bool,
    /// Rotate crops into the box heading; otherwise only translate.
    pub canonicalize: bool,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            backbone: BackboneConfig::default(),
            bev: BevConfig::default(),
            loss: LossWeights::default(),
            pretrain: PretrainConfig::default(),
            template_scheme: TemplateScheme::FirstGtPreviousResult,
            template_merge: TemplateMerge::PerBox,
            template_enlarge: 0.0,
            search_enlarge: 2.0,
            train_shift: [0.3, 0.3, 0.1],
            train_yaw_jitter_deg: 5.0,
            template_shift: [0.0; 3],
            template_yaw_jitter_deg: 0.0,
            epochs: 20,
            lr: 1e-3,
            lr_decay_every: 6,
            lr_decay_factor: 5.0,
            batch_size: 8,
            cpi_enabled: true,
            canonicalize: true,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    /// Reduced model sized for a single desktop CPU: 128/256 points,
    /// 32-wide tokens, a 16 x 24 grid with 0.2 m vertical cells, and a
    /// 20-epoch schedule decayed every 8.
    pub fn desk() -> Self {
        TrackerConfig {
            backbone: BackboneConfig {
                n1: 128,
                n2: 256,
                k: 16,
                dim: 32,
                mlp_widths: vec![16, 32],
                n3: 32,
                ..BackboneConfig::default()
            },
            bev: BevConfig {
                voxel_size: [0.3, 0.3, 0.2],
                grid_h: 16,
                grid_w: 24,
                grid_z: 12,
                channels: 64,
                head_channels: 32,
                min_radius: 2,
                ..BevConfig::default()
            },
            pretrain: PretrainConfig {
                dim: 32,
                ..PretrainConfig::default()
            },
            train_shift: [0.3, 0.3, 0.3],
            lr_decay_every: 8,
            ..TrackerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.bev.validate()?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: key.to_string(),
                msg,
            })
        };
        for (key, v) in [
            ("template_enlarge", self.template_enlarge),
            ("search_enlarge", self.search_enlarge),
            ("train_yaw_jitter_deg", self.train_yaw_jitter_deg),
            ("template_yaw_jitter_deg", self.template_yaw_jitter_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and non-negative, got {v}"));
            }
        }
        for (key, v) in [("train_shift", self.train_shift), ("template_shift", self.template_shift)] {
            if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return bad(key, format!("{v:?} must be non-negative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor", format!("must be positive, got {}", self.lr_decay_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay_lr(self.lr, epoch, self.lr_decay_every, self.lr_decay_factor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletFrame {
    pub index: usize,
    pub cloud: PointCloud,
    pub gt: Option<Box3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: String,
    pub category: String,
    pub frames: Vec<TrackletFrame>,
}

impl Tracklet {
    /// At least one frame, strictly increasing indices, gt on the first frame.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::invalid(format!("tracklet {}: no frames", self.id)))?;
        if first.gt.is_none() {
            return Err(Error::invalid(format!("tracklet {}: first frame has no gt", self.id)));
        }
        if self.frames.windows(2).any(|w| w[1].index <= w[0].index) {
            return Err(Error::invalid(format!(
                "tracklet {}: frame indices not increasing",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Mixes a base seed with a path of integers (splitmix64 steps).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Frame a crop is expressed in: the box center, rotated to its heading when
/// `canonicalize` is set.
pub fn reference_frame(b: &Box3D, canonicalize: bool) -> RigidTransform {
    RigidTransform {
        translation: b.center,
        yaw: if canonicalize { b.heading } else { 0.0 },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    /// `N1` points in the template frame.
    pub cloud: PointCloud,
    /// `[w, l, h]` copied into decoded boxes.
    pub size: [f64; 3],
    /// Merged point count before sampling.
    pub raw_count: usize,
    pub degenerate: bool,
}

/// Template from the known history: `clouds[i]` with box `boxes[i]` for
/// `i < t`. Box 0 is the first-frame gt; later boxes are predictions at test
/// time and gt at train time.
pub fn build_template(
    clouds: &[&PointCloud],
    boxes: &[Box3D],
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<Template> {
    if boxes.is_empty() || clouds.len() != boxes.len() {
        return Err(Error::invalid(format!(
            "build_template: {} clouds, {} boxes",
            clouds.len(),
            boxes.len()
        )));
    }
    let sources = cfg.template_scheme.sources(boxes.len());
    let mut merged = Vec::new();
    for &i in &sources {
        let b = &boxes[i];
        let inside = points_in_box(clouds[i], &b.enlarged(cfg.template_enlarge));
        let pts = clouds[i].points();
        match cfg.template_merge {
            TemplateMerge::PerBox => {
                let f = reference_frame(b, cfg.canonicalize);
                merged.extend(inside.iter().map(|&j| f.to_local(&pts[j])));
            }
            TemplateMerge::World => merged.extend(inside.iter().map(|&j| pts[j])),
        }
    }
    if cfg.template_merge == TemplateMerge::World {
        let f = reference_frame(&boxes[*sources.last().expect("non-empty")], cfg.canonicalize);
        merged.iter_mut().for_each(|p| *p = f.to_local(p));
    }
    let raw_count = merged.len();
    let crop = sample_points(&PointCloud::new(merged)?, cfg.backbone.n1, [0.0; 3], seed);
    let first = &boxes[0];
    Ok(Template {
        cloud: crop.cloud,
        size: [first.w, first.l, first.h],
        raw_count,
        degenerate: crop.degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Search {
    /// `N2` points in `frame`.
    pub cloud: PointCloud,
    /// Maps search coordinates back to the world.
    pub frame: RigidTransform,
    /// Reference box actually used (jittered when training).
    pub reference: Box3D,
    pub degenerate: bool,
}

/// Uniform shift and heading jitter within the configured half-ranges.
pub fn jitter_box<R: Rng + ?Sized>(b: &Box3D, cfg: &TrackerConfig, rng: &mut R) -> Box3D {
    perturb_box(b, cfg.train_shift, cfg.train_yaw_jitter_deg, rng)
}

pub fn perturb_box<R: Rng + ?Sized>(b: &Box3D, shift: [f64; 3], yaw_deg: f64, rng: &mut R) -> Box3D {
    let mut u = |half: f64| if half > 0.0 { rng.gen_range(-half..=half) } else { 0.0 };
    let d = [u(shift[0]), u(shift[1]), u(shift[2])];
    let yaw = u(yaw_deg.to_radians());
    Box3D {
        center: [b.center[0] + d[0], b.center[1] + d[1], b.center[2] + d[2]],
        heading: wrap_angle(b.heading + yaw),
        ..*b
    }
}

/// Crops `cloud` around `reference` grown by `search_enlarge`, samples `N2`
/// points and expresses them in the reference frame. With `train` the
/// reference is jittered first.
pub fn build_search(
    cloud: &PointCloud,
    reference: &Box3D,
    cfg: &TrackerConfig,
    train: bool,
    seed: u64,
) -> Result<Search> {
    let reference = if train {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        jitter_box(reference, cfg, &mut rng)
    } else {
        *reference
    };
    let crop = crop_and_sample(
        cloud,
        &reference,
        cfg.search_enlarge,
        cfg.backbone.n2,
        derive_seed(seed, &[2]),
    );
    let frame = reference_frame(&reference, cfg.canonicalize);
    Ok(Search {
        cloud: crop.cloud.map(|p| frame.to_local(p)),
        frame,
        reference,
        degenerate: crop.degenerate,
    })
}

/// Backbone plus localization head.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub backbone: Backbone,
    pub localizer: Localizer,
}

pub struct ForwardOutput {
    pub heads: HeadOutputs,
    /// Per block, per head joint attention.
    pub attention: Vec<Vec<Var>>,
    /// Search features handed to the localizer.
    pub search_features: Var,
    pub cpi_degenerate: bool,
}

impl Tracker {
    /// Registers all parameters (CPI included, even when disabled, so
    /// checkpoints are interchangeable).
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &TrackerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, &cfg.backbone, rng)?;
        let localizer = Localizer::new(store, &cfg.bev, cfg.backbone.dim, rng)?;
        Ok(Tracker {
            cfg: cfg.clone(),
            backbone,
            localizer,
        })
    }

    /// Seeded fresh parameter store and tracker.
    pub fn init<T: Real>(cfg: &TrackerConfig) -> Result<(ParamStore<T>, Tracker)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1417]));
        let tracker = Tracker::new(&mut store, cfg, &mut rng)?;
        Ok((store, tracker))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        template: &Template,
        search: &PointCloud,
        seed: u64,
    ) -> Result<ForwardOutput> {
        let ft = self.backbone.local_embed(g, &template.cloud)?;
        let fs = self.backbone.local_embed(g, search)?;
        let joint = self.backbone.one_stream(g, ft, fs)?;
        let mut search_features = joint.search;
        let mut cpi_degenerate = false;
        if self.cfg.cpi_enabled {
            let radius = self.cfg.backbone.cpi_radius_for(template.size[0], template.size[1]);
            let sel = cpi_select(&template.cloud, radius, self.cfg.backbone.n3, seed)?;
            cpi_degenerate = sel.degenerate;
            search_features =
                self.backbone
                    .center_points_interaction(g, joint.template, joint.search, &sel)?;
        }
        let heads = self.localizer.forward(g, search_features, search)?;
        Ok(ForwardOutput {
            heads,
            attention: joint.attention,
            search_features,
            cpi_degenerate,
        })
    }
}

/// One training example: frame `frame` of tracklet `tracklet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub tracklet: usize,
    pub frame: usize,
}

/// Every frame `t >= 1` whose gt, and every earlier gt, is known.
pub fn training_samples(data: &[Tracklet]) -> Vec<Sample> {
    let mut out = Vec::new();
    for (k, tr) in data.iter().enumerate() {
        for t in 1..tr.frames.len() {
            if tr.frames[..=t].iter().any(|f| f.gt.is_none()) {
                break;
            }
            out.push(Sample { tracklet: k, frame: t });
        }
    }
    out
}

/// Loss components of one sample or batch mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub offset: f64,
    pub theta: f64,
    pub z: f64,
}

impl StepLoss {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,total,cls,offset,theta,z";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.total, self.cls, self.offset, self.theta, self.z
        )
    }
}

/// Builds the graph for one sample and returns `(total loss var, parts)`.
pub fn sample_loss<T: Real>(
    g: &mut Graph<'_, T>,
    tracker: &Tracker,
    data: &[Tracklet],
    sample: Sample,
    seed: u64,
) -> Result<(Var, [f64; 4])> {
    let cfg = &tracker.cfg;
    let tr = &data[sample.tracklet];
    let t = sample.frame;
    let history = &tr.frames[..t];
    let clouds: Vec<&PointCloud> = history.iter().map(|f| &f.cloud).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[13]));
    let boxes: Vec<Box3D> = history
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let b = f.gt.expect("training gt");
            if i == 0 {
                b
            } else {
                perturb_box(&b, cfg.template_shift, cfg.template_yaw_jitter_deg, &mut rng)
            }
        })
        .collect();
    let template = build_template(&clouds, &boxes, cfg, derive_seed(seed, &[10]))?;
    let gt = tr.frames[t].gt.expect("training gt");
    let search = build_search(&tr.frames[t].cloud, &gt, cfg, true, derive_seed(seed, &[11]))?;
    let targets = assign_targets(&search.frame.box_to_local(&gt), &cfg.bev);
    let out = tracker.forward(g, &template, &search.cloud, derive_seed(seed, &[12]))?;
    let parts = compute_loss(g, &out.heads, &targets, &cfg.loss)?;
    Ok((parts.total, [parts.cls, parts.offset, parts.theta, parts.z]))
}

/// Progress that survives a checkpoint: next epoch, global step, optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub step: usize,
    pub adam: AdamState<T>,
}

const OPTIM_STATE: &str = "optim.state";

impl<T: Real> TrainState<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrackerConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            adam: AdamState::new(store, cfg.lr_at(0)),
        }
    }

    /// Parameters plus `optim.m.*`, `optim.v.*` and `optim.state`
    /// (`[epoch, step, adam step]`).
    pub fn to_checkpoint(&self, store: &ParamStore<T>) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_store(store);
        for (i, (_, p)) in store.iter().enumerate() {
            ck.push(format!("optim.m.{}", p.name), self.adam.first_moment[i].clone());
            ck.push(format!("optim.v.{}", p.name), self.adam.second_moment[i].clone());
        }
        let counters = [self.epoch as f64, self.step as f64, self.adam.step as f64];
        ck.push(
            OPTIM_STATE,
            Tensor::from_fn(vec![3], |i| T::lit(counters[i])),
        );
        ck
    }

    /// Loads every model parameter from `ck` (all must be present). Returns
    /// the optimizer state when the checkpoint carries one.
    pub fn restore(
        ck: &Checkpoint<T>,
        store: &mut ParamStore<T>,
        cfg: &TrackerConfig,
    ) -> Result<Option<Self>> {
        let missing: Vec<String> = store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| ck.get(n).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Transfer {
                names: missing,
                msg: "checkpoint lacks parameters".into(),
            });
        }
        ck.load_into(store, false)?;
        let Some(counters) = ck.get(OPTIM_STATE) else {
            return Ok(None);
        };
        let c = counters.to_f64_vec();
        if c.len() != 3 {
            return Err(Error::invalid("optim.state must hold 3 counters"));
        }
        let mut state = TrainState::new(store, cfg);
        state.epoch = c[0] as usize;
        state.step = c[1] as usize;
        state.adam.step = c[2] as u64;
        for (i, (_, p)) in store.iter().enumerate() {
            for (prefix, slot) in [
                ("optim.m", &mut state.adam.first_moment[i]),
                ("optim.v", &mut state.adam.second_moment[i]),
            ] {
                let name = format!("{prefix}.{}", p.name);
                let t = ck
                    .get(&name)
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::invalid(format!("`{name}` has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        state.adam.lr = cfg.lr_at(state.epoch);
        Ok(Some(state))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop before this epoch instead of `cfg.epochs`.
    pub until_epoch: Option<usize>,
}

/// Adam over batches of samples (mean gradient), shuffled per epoch with the
/// rate from [`TrackerConfig::lr_at`]. Sample randomness depends only on
/// `(seed, epoch, sample)`, so a resumed run replays the same steps.
pub fn train<T: Real>(
    tracker: &Tracker,
    store: &mut ParamStore<T>,
    data: &[Tracklet],
    state: &mut TrainState<T>,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<Vec<StepLoss>> {
    let cfg = &tracker.cfg;
    let samples = training_samples(data);
    if samples.is_empty() {
        return Err(Error::invalid("train: no samples with ground truth"));
    }
    let end = opts.until_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut log = Vec::new();
    while state.epoch < end {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        state.adam.lr = lr;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xe, epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::empty(store.len());
            let mut sums = [0.0; 5];
            for &i in batch {
                let s = samples[i];
                let seed = derive_seed(cfg.seed, &[epoch as u64, s.tracklet as u64, s.frame as u64]);
                let mut g = Graph::new(&*store);
                let (loss, parts) = sample_loss(&mut g, tracker, data, s, seed)?;
                let value = g.value(loss).item().as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { step: state.step });
                }
                sums[0] += value;
                for k in 0..4 {
                    sums[k + 1] += parts[k];
                }
                grads.accumulate(&g.backward(loss)?);
            }
            let n = batch.len() as f64;
            grads.scale(T::lit(1.0 / n));
            state.adam.step(store, &grads)?;
            let rec = StepLoss {
                step: state.step,
                epoch,
                lr,
                total: sums[0] / n,
                cls: sums[1] / n,
                offset: sums[2] / n,
                theta: sums[3] / n,
                z: sums[4] / n,
            };
            on_step(&rec);
            log.push(rec);
            state.step += 1;
        }
        state.epoch += 1;
    }
    Ok(log)
}

pub fn write_loss_csv(losses: &[StepLoss], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "{}", StepLoss::CSV_HEADER)?;
    for l in losses {
        writeln!(f, "{}", l.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Per-frame tracking output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
    /// Points inside the gt box (inside the prediction when gt is absent).
    pub n_points: usize,
    /// Empty search or template region on this frame.
    pub degenerate: bool,
}

impl FrameResult {
    pub fn bbox(&self) -> Result<Box3D> {
        Box3D::new([self.x, self.y, self.z], self.w, self.l, self.h, self.theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub tracklet: String,
    pub frames: Vec<FrameResult>,
    /// Wall-clock seconds spent per frame (not part of the CSV).
    pub seconds: Vec<f64>,
}

/// One-pass tracking: frame 0 is the given gt; every later frame searches
/// around the previous prediction. A frame with an empty search region keeps
/// the previous prediction.
pub fn track<T: Real>(
    tracker: &Tracker,
    store: &ParamStore<T>,
    tracklet: &Tracklet,
    seed: u64,
) -> Result<TrackResult> {
    tracklet.validate()?;
    let cfg = &tracker.cfg;
    let first = tracklet.frames[0].gt.expect("validated");
    let mut preds = vec![first];
    let mut frames = vec![frame_result(&tracklet.frames[0], &first, false)];
    let mut seconds = vec![0.0];
    for t in 1..tracklet.frames.len() {
        let start = Instant::now();
        let fseed = derive_seed(seed, &[t as u64]);
        let clouds: Vec<&PointCloud> = tracklet.frames[..t].iter().map(|f| &f.cloud).collect();
        let template = build_template(&clouds, &preds, cfg, derive_seed(fseed, &[10]))?;
        let search = build_search(
            &tracklet.frames[t].cloud,
            &preds[t - 1],
            cfg,
            false,
            derive_seed(fseed, &[11]),
        )?;
        let pred = if search.degenerate {
            preds[t - 1]
        } else {
            let mut g = Graph::new(store);
            let out = tracker.forward(&mut g, &template, &search.cloud, derive_seed(fseed, &[12]))?;
            let maps = out.heads.maps(&g);
            let local = decode(&maps, &cfg.bev, template.size)?;
            search.frame.box_to_world(&local.bbox)
        };
        preds.push(pred);
        frames.push(frame_result(
            &tracklet.frames[t],
            &pred,
            search.degenerate || template.degenerate,
        ));
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(TrackResult {
        tracklet: tracklet.id.clone(),
        frames,
        seconds,
    })
}

fn frame_result(f: &TrackletFrame, pred: &Box3D, degenerate: bool) -> FrameResult {
    let n_points = points_in_box(&f.cloud, f.gt.as_ref().unwrap_or(pred)).len();
    FrameResult {
        frame: f.index,
        x: pred.center[0],
        y: pred.center[1],
        z: pred.center[2],
        w: pred.w,
        l: pred.l,
        h: pred.h,
        theta: pred.heading,
        n_points,
        degenerate,
    }
}

/// Tracks every tracklet over shared weights on up to `jobs` threads.
/// Tracklet `i` uses seed `derive_seed(seed, [i])`, so results do not depend
/// on `jobs`.
pub fn track_all<T: Real>(
    tracker: &Tracker,
    store: &ParamStore<T>,
    tracklets: &[Tracklet],
    seed: u64,
    jobs: usize,
) -> Result<Vec<TrackResult>> {
    let jobs = jobs.clamp(1, tracklets.len().max(1));
    let run = |i: usize| track(tracker, store, &tracklets[i], derive_seed(seed, &[i as u64]));
    if jobs == 1 {
        return (0..tracklets.len()).map(run).collect();
    }
    let mut slots: Vec<Option<Result<TrackResult>>> = (0..tracklets.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let run = &run;
                s.spawn(move || {
                    (j..tracklets.len())
                        .step_by(jobs)
                        .map(|i| (i, run(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("tracking thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Writes `frame,x,y,z,w,l,h,theta,n_points,degenerate` rows. Floats use the
/// shortest representation that reads back to the same bits.
pub fn write_results_csv(frames: &[FrameResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in frames {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<FrameResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        out.push(rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
