//! KITTI tracking I/O, synthetic scenes and configuration files.
//!
//! Formats are documented in `docs/formats.md`.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, Box3D, Point3, PointCloud};
use crate::pipeline::{Tracklet, TrackletFrame, TrackerConfig};

const BYTES_PER_POINT: usize = 16;

/// Reads a velodyne scan: little-endian `f32` quadruples `x y z intensity`.
/// Intensity is dropped.
pub fn read_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    parse_velodyne(&bytes, &path.display().to_string())
}

pub fn parse_velodyne(bytes: &[u8], origin: &str) -> Result<PointCloud> {
    if bytes.len() % BYTES_PER_POINT != 0 {
        return Err(Error::Binary {
            path: origin.to_string(),
            offset: bytes.len() - bytes.len() % BYTES_PER_POINT,
            msg: format!("length {} is not a multiple of {BYTES_PER_POINT}", bytes.len()),
        });
    }
    let mut pts = Vec::with_capacity(bytes.len() / BYTES_PER_POINT);
    for (i, chunk) in bytes.chunks_exact(BYTES_PER_POINT).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let p = [f(0) as f64, f(1) as f64, f(2) as f64];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Binary {
                path: origin.to_string(),
                offset: i * BYTES_PER_POINT,
                msg: "non-finite coordinate".into(),
            });
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

/// Writes coordinates as `f32` with zero intensity.
pub fn write_velodyne(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(pc.len() * BYTES_PER_POINT);
    for p in pc.points() {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: &Point3) -> Point3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn inverse3(m: &Mat3) -> Option<Mat3> {
    let c = |r: usize, k: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    // inverse = adjugate / det, adjugate = cofactor transpose
    Some([0, 1, 2].map(|r| [0, 1, 2].map(|k| c(k, r) / det)))
}

/// Rectification and lidar-to-camera extrinsics of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Calib {
    pub r0_rect: Mat3,
    /// `[R | t]`, lidar to reference camera.
    pub tr_velo_cam: [[f64; 4]; 3],
}

impl Calib {
    pub fn identity() -> Self {
        Calib {
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_cam: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    /// Accepts both the tracking (`R_rect`, `Tr_velo_cam`) and the object
    /// (`R0_rect:`, `Tr_velo_to_cam:`) key spellings; other keys are ignored.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut r0 = None;
        let mut tr = None;
        for (ln, line) in text.lines().enumerate() {
            let mut words = line.split_whitespace();
            let Some(key) = words.next() else { continue };
            let key = key.trim_end_matches(':');
            let want = match key {
                "R_rect" | "R0_rect" => 9,
                "Tr_velo_cam" | "Tr_velo_to_cam" => 12,
                _ => continue,
            };
            let vals: Vec<f64> = words
                .map(|w| w.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(origin, ln, format!("{key}: {e}")))?;
            if vals.len() != want {
                return Err(parse_err(
                    origin,
                    ln,
                    format!("{key}: expected {want} numbers, got {}", vals.len()),
                ));
            }
            if want == 9 {
                r0 = Some([0, 1, 2].map(|r| [0, 1, 2].map(|k| vals[3 * r + k])));
            } else {
                tr = Some([0, 1, 2].map(|r| [0, 1, 2, 3].map(|k| vals[4 * r + k])));
            }
        }
        let missing = |k: &str| parse_err(origin, text.lines().count(), format!("missing {k}"));
        Ok(Calib {
            r0_rect: r0.ok_or_else(|| missing("R_rect"))?,
            tr_velo_cam: tr.ok_or_else(|| missing("Tr_velo_cam"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Calib::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let r: Vec<f64> = self.r0_rect.iter().flatten().copied().collect();
        let t: Vec<f64> = self.tr_velo_cam.iter().flatten().copied().collect();
        format!("R_rect {}\nTr_velo_cam {}\n", join(&r), join(&t))
    }

    fn rotation(&self) -> Mat3 {
        [0, 1, 2].map(|r| [0, 1, 2].map(|k| self.tr_velo_cam[r][k]))
    }

    /// Rectified camera coordinates to lidar.
    pub fn rect_to_velo(&self, q: &Point3) -> Result<Point3> {
        let r0i = inverse3(&self.r0_rect).ok_or_else(|| Error::invalid("singular R_rect"))?;
        let ri = inverse3(&self.rotation()).ok_or_else(|| Error::invalid("singular Tr_velo_cam"))?;
        let c = mat_vec(&r0i, q);
        let d = [0, 1, 2].map(|k| c[k] - self.tr_velo_cam[k][3]);
        Ok(mat_vec(&ri, &d))
    }

    /// Lidar coordinates to rectified camera.
    pub fn velo_to_rect(&self, p: &Point3) -> Point3 {
        let c = mat_vec(&self.rotation(), p);
        let c = [0, 1, 2].map(|k| c[k] + self.tr_velo_cam[k][3]);
        mat_vec(&self.r0_rect, &c)
    }
}

fn parse_err(origin: &str, line: usize, msg: String) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line: line + 1,
        msg,
    }
}

/// One line of a KITTI tracking label file (camera frame, bottom center).
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub frame: usize,
    /// `-1` for `DontCare`.
    pub track_id: i64,
    pub kind: String,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rotation_y: f64,
}

impl KittiLabel {
    /// Fields: frame, track id, type, truncated, occluded, alpha, 4 bbox
    /// values, h, w, l, x, y, z, rotation_y and an optional score.
    pub fn parse_line(line: &str, origin: &str, ln: usize) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 17 && f.len() != 18 {
            return Err(parse_err(origin, ln, format!("expected 17 or 18 fields, got {}", f.len())));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|e| parse_err(origin, ln, format!("field {i} ({name}): {e}")))
        };
        let frame = f[0]
            .parse::<usize>()
            .map_err(|e| parse_err(origin, ln, format!("field 0 (frame): {e}")))?;
        let track_id = f[1]
            .parse::<i64>()
            .map_err(|e| parse_err(origin, ln, format!("field 1 (track_id): {e}")))?;
        Ok(KittiLabel {
            frame,
            track_id,
            kind: f[2].to_string(),
            h: num(10, "h")?,
            w: num(11, "w")?,
            l: num(12, "l")?,
            x: num(13, "x")?,
            y: num(14, "y")?,
            z: num(15, "z")?,
            rotation_y: num(16, "rotation_y")?,
        })
    }

    /// Unknown fields (truncation, occlusion, alpha, 2-D box) are zero.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} 0 0 0 0 0 0 0 {} {} {} {} {} {} {}",
            self.frame,
            self.track_id,
            self.kind,
            self.h,
            self.w,
            self.l,
            self.x,
            self.y,
            self.z,
            self.rotation_y
        )
    }

    /// Box in the lidar frame: center lifted by `h / 2` from the bottom
    /// (camera y points down), heading `-rotation_y - pi/2`.
    pub fn to_lidar_box(&self, calib: &Calib) -> Result<Box3D> {
        let center = calib.rect_to_velo(&[self.x, self.y - self.h / 2.0, self.z])?;
        Box3D::new(center, self.w, self.l, self.h, -self.rotation_y - FRAC_PI_2)
    }

    /// Inverse of [`KittiLabel::to_lidar_box`].
    pub fn from_lidar_box(b: &Box3D, calib: &Calib, frame: usize, track_id: i64, kind: &str) -> Self {
        let c = calib.velo_to_rect(&b.center);
        let mut rot = -b.heading - FRAC_PI_2;
        if rot <= -PI {
            rot += 2.0 * PI;
        }
        KittiLabel {
            frame,
            track_id,
            kind: kind.to_string(),
            h: b.h,
            w: b.w,
            l: b.l,
            x: c[0],
            y: c[1] + b.h / 2.0,
            z: c[2],
            rotation_y: rot,
        }
    }
}

pub fn parse_labels(text: &str, origin: &str) -> Result<Vec<KittiLabel>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| KittiLabel::parse_line(l, origin, i))
        .collect()
}

pub fn load_labels(path: &Path) -> Result<Vec<KittiLabel>> {
    parse_labels(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Point cloud of a scan and the lidar-frame box of one label line.
pub fn load_kitti_frame(velodyne: &Path, label_line: &str, calib: &Calib) -> Result<(PointCloud, Box3D)> {
    let cloud = read_velodyne(velodyne)?;
    let label = KittiLabel::parse_line(label_line, "<label>", 0)?;
    Ok((cloud, label.to_lidar_box(calib)?))
}

/// Paths inside a KITTI tracking root.
pub fn velodyne_path(root: &Path, scene: usize, frame: usize) -> PathBuf {
    root.join("velodyne").join(format!("{scene:04}")).join(format!("{frame:06}.bin"))
}

pub fn label_path(root: &Path, scene: usize) -> PathBuf {
    root.join("label_02").join(format!("{scene:04}.txt"))
}

pub fn calib_path(root: &Path, scene: usize) -> PathBuf {
    root.join("calib").join(format!("{scene:04}.txt"))
}

/// One tracked object over a contiguous frame range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scene: usize,
    pub object: i64,
    pub first_frame: usize,
    pub last_frame: usize,
    pub category: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub tracklets: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Groups labels of `category` by track id; a gap in the frames of one
    /// object starts a new entry.
    pub fn from_labels(scene: usize, labels: &[KittiLabel], category: &str) -> Self {
        let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for l in labels.iter().filter(|l| l.kind == category && l.track_id >= 0) {
            by_id.entry(l.track_id).or_default().push(l.frame);
        }
        let mut tracklets = Vec::new();
        for (id, mut frames) in by_id {
            frames.sort_unstable();
            frames.dedup();
            let mut start = frames[0];
            for w in frames.windows(2) {
                if w[1] != w[0] + 1 {
                    tracklets.push(IndexEntry {
                        scene,
                        object: id,
                        first_frame: start,
                        last_frame: w[0],
                        category: category.to_string(),
                    });
                    start = w[1];
                }
            }
            tracklets.push(IndexEntry {
                scene,
                object: id,
                first_frame: start,
                last_frame: *frames.last().expect("non-empty"),
                category: category.to_string(),
            });
        }
        DatasetIndex { tracklets }
    }

    /// Scans the label files of `scenes` under `root`.
    pub fn scan(root: &Path, scenes: &[usize], category: &str) -> Result<Self> {
        let mut tracklets = Vec::new();
        for &s in scenes {
            let labels = load_labels(&label_path(root, s))?;
            tracklets.extend(DatasetIndex::from_labels(s, &labels, category).tracklets);
        }
        Ok(DatasetIndex { tracklets })
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tracklets {
            if t.last_frame < t.first_frame {
                return Err(Error::invalid(format!(
                    "scene {} object {}: frame range {}..{} is empty",
                    t.scene, t.object, t.first_frame, t.last_frame
                )));
            }
        }
        Ok(())
    }

    /// Reads every indexed tracklet (clouds in the lidar frame).
    pub fn load(&self, root: &Path) -> Result<Vec<Tracklet>> {
        self.validate()?;
        let mut cache: BTreeMap<usize, (Vec<KittiLabel>, Calib)> = BTreeMap::new();
        let mut out = Vec::new();
        for e in &self.tracklets {
            if !cache.contains_key(&e.scene) {
                let labels = load_labels(&label_path(root, e.scene))?;
                let calib = Calib::load(&calib_path(root, e.scene))?;
                cache.insert(e.scene, (labels, calib));
            }
            let (labels, calib) = &cache[&e.scene];
            let mut frames = Vec::new();
            for f in e.first_frame..=e.last_frame {
                let label = labels
                    .iter()
                    .find(|l| l.frame == f && l.track_id == e.object)
                    .ok_or_else(|| {
                        Error::invalid(format!("scene {} object {} frame {f}: no label", e.scene, e.object))
                    })?;
                frames.push(TrackletFrame {
                    index: f,
                    cloud: read_velodyne(&velodyne_path(root, e.scene, f))?,
                    gt: Some(label.to_lidar_box(calib)?),
                });
            }
            out.push(Tracklet {
                id: format!("{:04}-{}-{}", e.scene, e.object, e.first_frame),
                category: e.category.clone(),
                frames,
            });
        }
        Ok(out)
    }
}

/// Writes a tracklet as KITTI scene `scene` (object id 0, identity calib
/// unless given). Scan coordinates are stored as `f32`.
pub fn write_kitti_scene(root: &Path, scene: usize, tracklet: &Tracklet, calib: &Calib) -> Result<()> {
    fs::create_dir_all(root.join("velodyne").join(format!("{scene:04}")))?;
    fs::create_dir_all(root.join("label_02"))?;
    fs::create_dir_all(root.join("calib"))?;
    let mut labels = String::new();
    for f in &tracklet.frames {
        write_velodyne(&f.cloud, &velodyne_path(root, scene, f.index))?;
        if let Some(b) = &f.gt {
            labels.push_str(&KittiLabel::from_lidar_box(b, calib, f.index, 0, &tracklet.category).to_line());
            labels.push('\n');
        }
    }
    fs::write(label_path(root, scene), labels)?;
    fs::write(calib_path(root, scene), calib.to_text())?;
    Ok(())
}

/// Surface the target's points are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetShape {
    CuboidShell,
    CylinderShell,
    /// Rear wall plus one side wall, full height.
    LShape,
}

impl TargetShape {
    pub fn category(self) -> &'static str {
        match self {
            TargetShape::CuboidShell => "Car",
            TargetShape::CylinderShell => "Pedestrian",
            TargetShape::LShape => "Van",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: TargetShape,
    /// `[w, l, h]`.
    pub size: [f64; 3],
    /// Target pose per frame.
    pub trajectory: Vec<Pose>,
    pub target_points: usize,
    /// Same-shape objects moving alongside the target.
    pub distractors: usize,
    /// Distance range of distractor centers from the target center.
    pub distractor_range: [f64; 2],
    /// Static clutter boxes and the points on each.
    pub clutter: usize,
    pub clutter_points: usize,
    /// Per-frame probability of dropping each point.
    pub dropout: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Car-sized cuboid on a gently curving path: `frames` frames at
    /// about `speed` m per frame.
    pub fn car(frames: usize, speed: f64, distractors: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e);
        let mut heading = rng.gen_range(-PI..PI);
        let turn = rng.gen_range(-0.02..0.02);
        let (mut x, mut y) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let z = rng.gen_range(-0.9..-0.6);
        let mut trajectory = Vec::with_capacity(frames);
        for _ in 0..frames {
            trajectory.push(Pose { x, y, z, heading });
            let v = speed * rng.gen_range(0.8..1.2);
            x += v * heading.cos();
            y += v * heading.sin();
            heading += turn;
        }
        SceneSpec {
            shape: TargetShape::CuboidShell,
            size: [1.8, 4.0, 1.5],
            trajectory,
            target_points: 160,
            distractors,
            distractor_range: [2.2, 3.5],
            clutter: 8,
            clutter_points: 40,
            dropout: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("scene spec: {m}")));
        if self.trajectory.is_empty() {
            return bad("trajectory needs at least one pose".into());
        }
        if self.size.iter().any(|v| !(*v > 0.0)) {
            return bad(format!("size {:?} must be positive", self.size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let [a, b] = self.distractor_range;
        if !(a >= 0.0 && b >= a) {
            return bad(format!("distractor range {:?}", self.distractor_range));
        }
        Ok(())
    }

    fn box_at(&self, p: &Pose) -> Result<Box3D> {
        Box3D::new([p.x, p.y, p.z], self.size[0], self.size[1], self.size[2], p.heading)
    }
}

/// Points on the shell, in box-local coordinates, pulled in by a relative
/// 1e-3 so they stay strictly inside the box.
fn surface_points<R: Rng + ?Sized>(shape: TargetShape, size: [f64; 3], n: usize, rng: &mut R) -> Vec<Point3> {
    let [w, l, h] = size.map(|v| v * (1.0 - 1e-3));
    let (hw, hl, hh) = (w / 2.0, l / 2.0, h / 2.0);
    let mut u = |a: f64| rng.gen_range(-a..=a);
    (0..n)
        .map(|_| match shape {
            TargetShape::CuboidShell => {
                let areas = [w * h, w * h, l * h, l * h, w * l, w * l];
                let total: f64 = areas.iter().sum();
                let mut pick = (u(0.5) + 0.5) * total;
                let mut face = 0;
                while face < 5 && pick > areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                match face {
                    0 => [hl, u(hw), u(hh)],
                    1 => [-hl, u(hw), u(hh)],
                    2 => [u(hl), hw, u(hh)],
                    3 => [u(hl), -hw, u(hh)],
                    4 => [u(hl), u(hw), hh],
                    _ => [u(hl), u(hw), -hh],
                }
            }
            TargetShape::CylinderShell => {
                let a = u(PI);
                [hl * a.cos(), hw * a.sin(), u(hh)]
            }
            TargetShape::LShape => {
                let wall = u(0.5) + 0.5;
                if wall * (w + l) < w {
                    [-hl, u(hw), u(hh)]
                } else {
                    [u(hl), hw, u(hh)]
                }
            }
        })
        .collect()
}

fn place<'a>(b: &Box3D, local: &'a [Point3]) -> impl Iterator<Item = Point3> + 'a {
    let f = b.frame();
    local.iter().map(move |p| f.to_world(p))
}

/// Deterministic synthetic tracklet. Target points are a fixed surface
/// sample carried rigidly by the box; distractors keep a fixed offset in the
/// target frame; clutter is static and never overlaps any gt box.
pub fn generate_scene(spec: &SceneSpec) -> Result<Tracklet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target_local = surface_points(spec.shape, spec.size, spec.target_points, &mut rng);
    let gts: Vec<Box3D> = spec.trajectory.iter().map(|p| spec.box_at(p)).collect::<Result<_>>()?;

    // distractor offsets in the target frame, clear of the target and each other
    let mut offsets: Vec<Box3D> = Vec::new();
    let origin = Box3D::new([0.0; 3], spec.size[0], spec.size[1], spec.size[2], 0.0)?;
    for _ in 0..spec.distractors {
        for _attempt in 0..1000 {
            let r = rng.gen_range(spec.distractor_range[0]..=spec.distractor_range[1]);
            let a = rng.gen_range(-PI..PI);
            let cand = Box3D::new(
                [r * a.cos(), r * a.sin(), 0.0],
                spec.size[0],
                spec.size[1],
                spec.size[2],
                rng.gen_range(-0.3..0.3),
            )?;
            let grown = cand.enlarged(0.2);
            if iou3d(&grown, &origin.enlarged(0.2)) == 0.0
                && offsets.iter().all(|o| iou3d(&grown, &o.enlarged(0.2)) == 0.0)
            {
                offsets.push(cand);
                break;
            }
        }
    }
    let distractor_local: Vec<Vec<Point3>> = offsets
        .iter()
        .map(|_| surface_points(spec.shape, spec.size, spec.target_points, &mut rng))
        .collect();

    // static clutter around the path
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for g in &gts {
        for k in 0..2 {
            lo[k] = lo[k].min(g.center[k] - 6.0);
            hi[k] = hi[k].max(g.center[k] + 6.0);
        }
    }
    let z0 = gts[0].center[2] - spec.size[2] / 2.0;
    let mut clutter = Vec::new();
    for _ in 0..spec.clutter {
        for _attempt in 0..1000 {
            let s = [rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.2), rng.gen_range(0.5..1.5)];
            let cand = Box3D::new(
                [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), z0 + s[2] / 2.0],
                s[0],
                s[1],
                s[2],
                rng.gen_range(-PI..PI),
            )?;
            let clear_of = |b: &Box3D| iou3d(&cand.enlarged(0.3), &b.enlarged(0.3)) == 0.0;
            let hits_distractor = gts.iter().any(|g| {
                offsets.iter().any(|o| !clear_of(&g.frame().box_to_world(o)))
            });
            if gts.iter().all(clear_of) && !hits_distractor {
                let pts = surface_points(TargetShape::CuboidShell, s, spec.clutter_points, &mut rng);
                clutter.push((cand, pts));
                break;
            }
        }
    }

    let mut frames = Vec::with_capacity(gts.len());
    for (t, gt) in gts.iter().enumerate() {
        let mut pts: Vec<Point3> = place(gt, &target_local).collect();
        for (o, local) in offsets.iter().zip(&distractor_local) {
            pts.extend(place(&gt.frame().box_to_world(o), local));
        }
        for (b, local) in &clutter {
            pts.extend(place(b, local));
        }
        if spec.dropout > 0.0 {
            pts.retain(|_| rng.gen::<f64>() >= spec.dropout);
        }
        frames.push(TrackletFrame {
            index: t,
            cloud: PointCloud::new(pts)?,
            gt: Some(*gt),
        });
    }
    Ok(Tracklet {
        id: format!("synthetic-{}", spec.seed),
        category: spec.shape.category().to_string(),
        frames,
    })
}

/// Parses a TOML config. Absent keys keep their defaults; unknown keys and
/// type mismatches name the offending key path.
pub fn parse_config(text: &str) -> Result<TrackerConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: TrackerConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        key: e.path().to_string(),
        msg: e.inner().message().trim().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrackerConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// SHA-256 of the config's JSON serialization (fixed field order, so the
/// hash ignores key order in the source file).
pub fn config_hash(cfg: &TrackerConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}
