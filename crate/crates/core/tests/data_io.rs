mod common;

use std::f64::consts::PI;

use common::rng;
use onestream::data_io::*;
use onestream::geometry::{points_in_box, Box3D, PointCloud};
use onestream::pipeline::{TemplateScheme, TrackerConfig};
use onestream::Error;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn one_point_scan() {
    let mut bytes = Vec::new();
    for v in [1.5f32, -2.25, 0.125, 0.7] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let pc = parse_velodyne(&bytes, "x.bin").unwrap();
    assert_eq!(pc.points(), &[[1.5, -2.25, 0.125]]);
}

#[test]
fn truncated_scan_reports_the_byte_offset() {
    let err = parse_velodyne(&[0u8; 37], "x.bin").unwrap_err();
    match err {
        Error::Binary { offset, path, .. } => {
            assert_eq!(offset, 32);
            assert_eq!(path, "x.bin");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn scans_round_trip_bit_exactly() {
    let mut r = rng(1);
    let pts: Vec<[f64; 3]> = (0..500)
        .map(|_| [0, 1, 2].map(|_| r.gen_range(-80.0f32..80.0) as f64))
        .collect();
    let pc = PointCloud::new(pts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("000000.bin");
    write_velodyne(&pc, &p).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 500 * 16);
    assert_eq!(read_velodyne(&p).unwrap(), pc);
}

const TRACKING_CALIB: &str = "P0: 7.215377e+02 0 6.095593e+02 0 0 7.215377e+02 1.728540e+02 0 0 0 1 0
R_rect 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_cam 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
Tr_imu_velo 1 0 0 0 0 1 0 0 0 0 1 0
";

#[test]
fn calib_accepts_both_key_spellings() {
    let a = Calib::parse(TRACKING_CALIB, "a").unwrap();
    let object = TRACKING_CALIB
        .replace("R_rect", "R0_rect:")
        .replace("Tr_velo_cam", "Tr_velo_to_cam:");
    assert_eq!(Calib::parse(&object, "b").unwrap(), a);
    assert_eq!(Calib::parse(&a.to_text(), "c").unwrap(), a);
}

#[test]
fn calib_errors_are_located() {
    let bad = TRACKING_CALIB.replace("9.999421e-01", "oops");
    match Calib::parse(&bad, "calib.txt").unwrap_err() {
        Error::Parse { line, path, .. } => {
            assert_eq!(line, 2);
            assert_eq!(path, "calib.txt");
        }
        e => panic!("unexpected {e}"),
    }
    assert!(Calib::parse("P0: 1 2 3\n", "x").is_err());
}

#[test]
fn camera_points_map_to_lidar_through_the_inverse_extrinsics() {
    // oracle: velo_to_rect is a plain affine map; rect_to_velo must invert it
    let c = Calib::parse(TRACKING_CALIB, "a").unwrap();
    let mut r = rng(2);
    for _ in 0..100 {
        let p = [r.gen_range(-40.0..40.0), r.gen_range(-40.0..40.0), r.gen_range(-3.0..3.0)];
        let back = c.rect_to_velo(&c.velo_to_rect(&p)).unwrap();
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-9);
        }
    }
    // the lidar x axis (forward) is the camera z axis
    let fwd = c.velo_to_rect(&[10.0, 0.0, 0.0]);
    let origin = c.velo_to_rect(&[0.0, 0.0, 0.0]);
    assert!((fwd[2] - origin[2] - 10.0).abs() < 0.01);
}

#[test]
fn label_heading_and_center_conventions() {
    let c = Calib::identity();
    let line = "3 7 Car 0 0 -1.5 100 120 200 220 1.5 1.6 3.9 2.0 1.7 15.0 0.3";
    let l = KittiLabel::parse_line(line, "l", 0).unwrap();
    assert_eq!((l.frame, l.track_id, l.kind.as_str()), (3, 7, "Car"));
    let b = l.to_lidar_box(&c).unwrap();
    // bottom center y = 1.7 (camera y down) lifted by h/2
    assert!((b.center[1] - (1.7 - 0.75)).abs() < 1e-12);
    assert!((b.heading - (-0.3 - PI / 2.0)).abs() < 1e-12);
    assert_eq!((b.w, b.l, b.h), (1.6, 3.9, 1.5));
    let with_score = format!("{line} 0.9");
    assert!(KittiLabel::parse_line(&with_score, "l", 0).is_ok());
}

#[test]
fn malformed_labels_name_the_line() {
    let text = "0 1 Car 0 0 0 0 0 0 0 1 1 1 0 0 0 0\n\n0 2 Car 0 0 0 0 0 0 0 1 x 1 0 0 0 0\n";
    match parse_labels(text, "0001.txt").unwrap_err() {
        Error::Parse { line, msg, .. } => {
            assert_eq!(line, 3);
            assert!(msg.contains("field 11"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
    assert!(parse_labels("0 1 Car\n", "x").is_err());
}

proptest! {
    #[test]
    fn lidar_boxes_survive_the_label_round_trip(
        x in -40.0f64..40.0, y in -40.0f64..40.0, z in -2.0f64..1.0,
        heading in -3.1f64..3.1, w in 0.5f64..3.0, l in 0.5f64..6.0, h in 0.5f64..3.0,
    ) {
        let c = Calib::parse(TRACKING_CALIB, "a").unwrap();
        let b = Box3D::new([x, y, z], w, l, h, heading).unwrap();
        let label = KittiLabel::from_lidar_box(&b, &c, 0, 1, "Car");
        let parsed = KittiLabel::parse_line(&label.to_line(), "l", 0).unwrap();
        prop_assert_eq!(&parsed, &label);
        let back = parsed.to_lidar_box(&c).unwrap();
        for k in 0..3 {
            prop_assert!((back.center[k] - b.center[k]).abs() < 1e-9);
        }
        prop_assert!(onestream::geometry::wrap_angle(back.heading - b.heading).abs() < 1e-12);
    }
}

fn tiny_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        clutter: 0,
        distractors: 0,
        dropout: 0.0,
        ..SceneSpec::car(8, 0.3, 0, seed)
    }
}

#[test]
fn clean_scenes_put_every_target_point_in_the_box() {
    for shape in [TargetShape::CuboidShell, TargetShape::CylinderShell, TargetShape::LShape] {
        let spec = SceneSpec {
            shape,
            ..tiny_spec(3)
        };
        let tr = generate_scene(&spec).unwrap();
        assert_eq!(tr.frames.len(), 8);
        for f in &tr.frames {
            let gt = f.gt.unwrap();
            assert_eq!(f.cloud.len(), spec.target_points);
            assert_eq!(points_in_box(&f.cloud, &gt).len(), spec.target_points, "{shape:?}");
        }
    }
}

#[test]
fn cluttered_scene_keeps_target_points_and_excludes_others() {
    let spec = SceneSpec {
        dropout: 0.0,
        ..SceneSpec::car(10, 0.2, 3, 4)
    };
    let tr = generate_scene(&spec).unwrap();
    for f in &tr.frames {
        let gt = f.gt.unwrap();
        assert_eq!(points_in_box(&f.cloud, &gt).len(), spec.target_points);
        assert!(f.cloud.len() > spec.target_points * 2);
    }
}

#[test]
fn scenes_are_deterministic_per_seed() {
    let spec = SceneSpec::car(6, 0.2, 1, 9);
    assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    let other = SceneSpec::car(6, 0.2, 1, 10);
    assert_ne!(generate_scene(&spec).unwrap(), generate_scene(&other).unwrap());
}

#[test]
fn target_points_move_rigidly_with_the_box() {
    let tr = generate_scene(&tiny_spec(5)).unwrap();
    let f0 = &tr.frames[0];
    let g0 = f0.gt.unwrap().frame();
    for f in &tr.frames[1..] {
        let g = f.gt.unwrap().frame();
        for (p, q) in f0.cloud.points().iter().zip(f.cloud.points()) {
            let (a, b) = (g0.to_local(p), g.to_local(q));
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = tiny_spec(1);
    s.trajectory.clear();
    assert!(generate_scene(&s).is_err());
    let s = SceneSpec {
        dropout: 1.0,
        ..tiny_spec(1)
    };
    assert!(generate_scene(&s).is_err());
}

#[test]
fn kitti_layout_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let calib = Calib::parse(TRACKING_CALIB, "a").unwrap();
    let mut tr = generate_scene(&tiny_spec(6)).unwrap();
    // store-exact coordinates so the comparison can be bit-exact
    for f in &mut tr.frames {
        f.cloud = f.cloud.map(|p| p.map(|v| v as f32 as f64));
    }
    write_kitti_scene(dir.path(), 3, &tr, &calib).unwrap();
    let index = DatasetIndex::scan(dir.path(), &[3], "Car").unwrap();
    assert_eq!(index.tracklets.len(), 1);
    assert_eq!(
        (index.tracklets[0].first_frame, index.tracklets[0].last_frame),
        (0, 7)
    );
    let loaded = index.load(dir.path()).unwrap();
    assert_eq!(loaded[0].frames.len(), 8);
    for (a, b) in loaded[0].frames.iter().zip(&tr.frames) {
        assert_eq!(a.cloud, b.cloud);
        let (ga, gb) = (a.gt.unwrap(), b.gt.unwrap());
        for k in 0..3 {
            assert!((ga.center[k] - gb.center[k]).abs() < 1e-9);
        }
    }
    let label = std::fs::read_to_string(label_path(dir.path(), 3)).unwrap();
    let (pc, b) = load_kitti_frame(
        &velodyne_path(dir.path(), 3, 0),
        label.lines().next().unwrap(),
        &calib,
    )
    .unwrap();
    assert_eq!(pc, tr.frames[0].cloud);
    assert!((b.center[0] - tr.frames[0].gt.unwrap().center[0]).abs() < 1e-9);
}

#[test]
fn index_splits_gaps_and_filters_categories() {
    let mk = |frame: usize, id: i64, kind: &str| KittiLabel {
        frame,
        track_id: id,
        kind: kind.into(),
        h: 1.0,
        w: 1.0,
        l: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
        rotation_y: 0.0,
    };
    let labels = vec![
        mk(0, 1, "Car"),
        mk(1, 1, "Car"),
        mk(3, 1, "Car"),
        mk(0, 2, "Pedestrian"),
        mk(0, -1, "DontCare"),
    ];
    let idx = DatasetIndex::from_labels(4, &labels, "Car");
    let ranges: Vec<_> = idx.tracklets.iter().map(|t| (t.first_frame, t.last_frame)).collect();
    assert_eq!(ranges, vec![(0, 1), (3, 3)]);
    assert!(idx.validate().is_ok());
}

#[test]
fn empty_config_gives_the_reference_defaults() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg, TrackerConfig::default());
    let b = &cfg.backbone;
    assert_eq!((b.n1, b.n2, b.k, b.dim, b.blocks, b.heads, b.n3), (512, 1024, 32, 64, 3, 4, 128));
    assert_eq!(b.radius, 0.3);
    assert_eq!(cfg.bev.voxel_size, [0.3; 3]);
    let l = &cfg.loss;
    assert_eq!((l.cls, l.offset, l.theta, l.z), (1.0, 1.0, 1.0, 2.0));
    assert_eq!(cfg.search_enlarge, 2.0);
    assert_eq!(cfg.epochs, 20);
    assert_eq!(cfg.template_scheme, TemplateScheme::FirstGtPreviousResult);
}

#[test]
fn overrides_reach_every_field() {
    let cfg = parse_config(
        "template_scheme = \"all_prev\"\ncpi_enabled = false\n[backbone]\nn2 = 256\n[bev]\nalpha_order = \"relu_conv\"\n",
    )
    .unwrap();
    assert_eq!(cfg.backbone.n2, 256);
    assert_eq!(cfg.backbone.n1, 512);
    assert_eq!(cfg.template_scheme, TemplateScheme::AllPrevious);
    assert!(!cfg.cpi_enabled);
}

#[test]
fn unknown_keys_and_bad_types_name_the_key() {
    match parse_config("[backbone]\nn22 = 3\n").unwrap_err() {
        Error::Config { key, msg } => {
            assert!(key.contains("backbone"), "{key}");
            assert!(msg.contains("n22"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
    match parse_config("[bev]\ngrid_h = \"tall\"\n").unwrap_err() {
        Error::Config { key, .. } => assert_eq!(key, "bev.grid_h"),
        e => panic!("unexpected {e}"),
    }
    match parse_config("[backbone]\nheads = 5\n").unwrap_err() {
        Error::Config { key, .. } => assert_eq!(key, "backbone.heads"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn config_hash_ignores_key_order() {
    let a = parse_config("epochs = 3\nlr = 0.01\n[backbone]\nk = 8\ndim = 32\nmlp_widths = [32]\n").unwrap();
    let b = parse_config("lr = 0.01\n[backbone]\nmlp_widths = [32]\ndim = 32\nk = 8\n[bev]\n").unwrap();
    let b = TrackerConfig { epochs: 3, ..b };
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_ne!(config_hash(&a), config_hash(&TrackerConfig::default()));
    assert_eq!(config_hash(&a).len(), 64);
}

#[test]
fn load_config_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "seed = 4\n").unwrap();
    assert_eq!(load_config(&p).unwrap().seed, 4);
    assert!(load_config(&dir.path().join("missing.toml")).is_err());
}

#[test]
fn shipped_desk_config_matches_the_builtin() {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    assert_eq!(load_config(&p).unwrap(), TrackerConfig::desk());
}
