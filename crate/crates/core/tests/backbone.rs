mod common;

use common::dense::{self, from_tensor, max_abs_diff};
use common::*;
use onestream::backbone::*;
use onestream::geometry::PointCloud;
use onestream::Error;
use onestream_tensor::gradcheck::{check_params, DEFAULT_STEP};
use onestream_tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn micro_cfg(dim: usize, heads: usize) -> BackboneConfig {
    BackboneConfig {
        n1: 8,
        n2: 8,
        radius: 0.4,
        k: 6,
        dim,
        blocks: 2,
        heads,
        mlp_widths: vec![5, 7, dim],
        n3: 4,
        cpi_blocks: 1,
        cpi_radius: None,
        relative_coords: false,
    }
}

fn build(cfg: &BackboneConfig, seed: u64) -> (ParamStore<f64>, Backbone) {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, bb)
}

fn rand_mat(r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, d], |_| r.gen_range(-1.0..1.0))
}

fn mlp_oracle(store: &ParamStore<f64>, cfg: &BackboneConfig, x: &[f64; 3]) -> Vec<f64> {
    let mut h: Mat = vec![x.to_vec()];
    for i in 0..cfg.mlp_widths.len() {
        h = dense::relu(&dense::linear(store, &format!("backbone.embed.fc{i}"), &h));
    }
    h.remove(0)
}

#[test]
fn config_validation_names_key() {
    let mut cfg = BackboneConfig::default();
    cfg.validate().unwrap();
    cfg.heads = 5;
    let err = cfg.validate().unwrap_err();
    assert!(matches!(err, Error::Config { ref key, .. } if key == "backbone.heads"), "{err}");
    let cfg = BackboneConfig {
        mlp_widths: vec![16, 32],
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn local_embed_single_point_is_mlp() {
    let cfg = micro_cfg(8, 2);
    let (store, bb) = build(&cfg, 1);
    let p = [0.3, -0.2, 0.7];
    let pc = PointCloud::new(vec![p]).unwrap();
    let mut g = Graph::new(&store);
    let f = bb.local_embed(&mut g, &pc).unwrap();
    assert_eq!(g.shape(f), &[1, 8]);
    assert_eq!(g.value(f).data(), &mlp_oracle(&store, &cfg, &p)[..]);
}

#[test]
fn local_embed_matches_scan_oracle() {
    for relative in [false, true] {
        let cfg = BackboneConfig {
            relative_coords: relative,
            ..micro_cfg(8, 2)
        };
        let (store, bb) = build(&cfg, 2);
        let pc = random_cloud(&mut rng(9), 60, 0.6);
        let mut g = Graph::new(&store);
        let f = bb.local_embed(&mut g, &pc).unwrap();
        let f = from_tensor(g.value(f));
        let pts = pc.points();
        for (i, p) in pts.iter().enumerate() {
            let members: Vec<usize> = (0..pts.len())
                .filter(|&j| dist2(&pts[j], p) <= cfg.radius * cfg.radius)
                .take(cfg.k)
                .collect();
            let mut want = vec![f64::NEG_INFINITY; cfg.dim];
            for j in members {
                let x = if relative {
                    [0, 1, 2].map(|c| pts[j][c] - p[c])
                } else {
                    pts[j]
                };
                for (w, v) in want.iter_mut().zip(mlp_oracle(&store, &cfg, &x)) {
                    *w = w.max(v);
                }
            }
            for (a, b) in f[i].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn local_embed_rows_follow_points_under_reordering() {
    // k covers the whole cloud so no ball is truncated.
    let cfg = BackboneConfig {
        k: 40,
        ..micro_cfg(8, 2)
    };
    let (store, bb) = build(&cfg, 3);
    let mut r = rng(4);
    let pc = random_cloud(&mut r, 40, 0.5);
    let mut perm: Vec<usize> = (0..40).collect();
    perm.shuffle(&mut r);
    let shuffled = pc.select(&perm);
    let mut g = Graph::new(&store);
    let a = bb.local_embed(&mut g, &pc).unwrap();
    let b = bb.local_embed(&mut g, &shuffled).unwrap();
    let (a, b) = (from_tensor(g.value(a)), from_tensor(g.value(b)));
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(b[new], a[old]);
    }
}

#[test]
fn zero_input_with_zero_output_projections_stays_zero() {
    let cfg = micro_cfg(8, 2);
    let (mut store, bb) = build(&cfg, 5);
    for i in 0..cfg.blocks {
        for name in ["proj.weight", "proj.bias", "fc2.weight", "fc2.bias"] {
            let key = format!("backbone.block{i}.{name}");
            let shape = store.by_name(&key).unwrap().shape().to_vec();
            store.set(&key, Tensor::zeros(shape)).unwrap();
        }
    }
    let mut g = Graph::new(&store);
    let ft = g.constant(Tensor::zeros(vec![8, 8]));
    let fs = g.constant(Tensor::zeros(vec![8, 8]));
    let out = bb.one_stream(&mut g, ft, fs).unwrap();
    assert!(g.value(out.template).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.search).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_are_stochastic_and_match_dense_blocks() {
    let cfg = micro_cfg(8, 4);
    let (store, bb) = build(&cfg, 6);
    let mut r = rng(7);
    let (ft, fs) = (rand_mat(&mut r, 8, 8), rand_mat(&mut r, 8, 8));
    let mut g = Graph::new(&store);
    let (vt, vs) = (g.constant(ft.clone()), g.constant(fs.clone()));
    let out = bb.one_stream(&mut g, vt, vs).unwrap();
    assert_eq!(out.attention.len(), 2);
    let mut x = from_tensor(&ft);
    x.extend(from_tensor(&fs));
    for (b, heads) in out.attention.iter().enumerate() {
        let (next, maps) = dense::block(&store, &format!("backbone.block{b}"), &x, 4);
        assert_eq!(heads.len(), 4);
        for (h, &a) in heads.iter().enumerate() {
            let a = from_tensor(g.value(a));
            for row in &a {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert!(max_abs_diff(&a, &maps[h]) < 1e-12);
        }
        x = next;
    }
    assert!(max_abs_diff(&from_tensor(g.value(out.search)), &dense::rows(&x, 8, 8)) < 1e-12);
    assert!(max_abs_diff(&from_tensor(g.value(out.template)), &dense::rows(&x, 0, 8)) < 1e-12);
}

/// Attention on the concatenated sequence against the four sub-blocks
/// computed from split template/search projections.
#[test]
fn joint_attention_equals_block_assembly() {
    let cfg = BackboneConfig {
        n1: 4,
        n2: 4,
        blocks: 1,
        heads: 1,
        dim: 4,
        mlp_widths: vec![4, 4, 4],
        ..micro_cfg(4, 1)
    };
    for seed in 0..5 {
        let (store, bb) = build(&cfg, 10 + seed);
        let mut r = rng(20 + seed);
        let (ft, fs) = (rand_mat(&mut r, 4, 4), rand_mat(&mut r, 4, 4));
        let mut g = Graph::new(&store);
        let (vt, vs) = (g.constant(ft.clone()), g.constant(fs.clone()));
        let out = bb.one_stream(&mut g, vt, vs).unwrap();
        let joint = from_tensor(g.value(out.attention[0][0]));

        let p = "backbone.block0";
        let split = |f: &Mat| {
            let h = dense::layer_norm(&store, &format!("{p}.ln1"), f);
            let qkv = dense::linear(&store, &format!("{p}.qkv"), &h);
            (dense::cols(&qkv, 0, 4), dense::cols(&qkv, 4, 4), dense::cols(&qkv, 8, 4))
        };
        let (xt, xs) = (from_tensor(&ft), from_tensor(&fs));
        let (qt, kt, vt_) = split(&xt);
        let (qs, ks, vs_) = split(&xs);
        let e = |q: &Mat, k: &Mat| -> Mat {
            dense::matmul(q, &dense::transpose(k))
                .into_iter()
                .map(|r| r.into_iter().map(|v| (v / 2.0).exp()).collect())
                .collect()
        };
        let (ett, ets, est, ess) = (e(&qt, &kt), e(&qt, &ks), e(&qs, &kt), e(&qs, &ks));
        let norm = |a: &Mat, b: &Mat, row: usize| -> f64 {
            a[row].iter().sum::<f64>() + b[row].iter().sum::<f64>()
        };
        let div = |m: &Mat, a: &Mat, b: &Mat| -> Mat {
            m.iter()
                .enumerate()
                .map(|(i, r)| r.iter().map(|v| v / norm(a, b, i)).collect())
                .collect()
        };
        let (ltt, lts) = (div(&ett, &ett, &ets), div(&ets, &ett, &ets));
        let (lst, lss) = (div(&est, &est, &ess), div(&ess, &est, &ess));
        for i in 0..4 {
            for j in 0..4 {
                assert!((joint[i][j] - ltt[i][j]).abs() < 1e-10);
                assert!((joint[i][4 + j] - lts[i][j]).abs() < 1e-10);
                assert!((joint[4 + i][j] - lst[i][j]).abs() < 1e-10);
                assert!((joint[4 + i][4 + j] - lss[i][j]).abs() < 1e-10);
            }
        }
        // Search output: lambda_st V_t + lambda_ss V_s, then projection,
        // residual and MLP.
        let attn_s = dense::add(&dense::matmul(&lst, &vt_), &dense::matmul(&lss, &vs_));
        let x1 = dense::add(&xs, &dense::linear(&store, &format!("{p}.proj"), &attn_s));
        let h = dense::layer_norm(&store, &format!("{p}.ln2"), &x1);
        let h = dense::relu(&dense::linear(&store, &format!("{p}.fc1"), &h));
        let want = dense::add(&x1, &dense::linear(&store, &format!("{p}.fc2"), &h));
        assert!(max_abs_diff(&from_tensor(g.value(out.search)), &want) < 1e-10);
    }
}

#[test]
fn search_permutation_is_equivariant() {
    let cfg = micro_cfg(8, 2);
    let (store, bb) = build(&cfg, 11);
    let mut r = rng(12);
    let (ft, fs) = (rand_mat(&mut r, 8, 8), rand_mat(&mut r, 8, 8));
    let mut perm: Vec<usize> = (0..8).collect();
    perm.shuffle(&mut r);
    let fs_perm = Tensor::new(
        vec![8, 8],
        perm.iter().flat_map(|&i| fs.row(i).to_vec()).collect(),
    )
    .unwrap();
    let mut g = Graph::new(&store);
    let (a, b, c) = (g.constant(ft), g.constant(fs), g.constant(fs_perm));
    let base = bb.one_stream(&mut g, a, b).unwrap();
    let permuted = bb.one_stream(&mut g, a, c).unwrap();
    let (s0, s1) = (from_tensor(g.value(base.search)), from_tensor(g.value(permuted.search)));
    for (new, &old) in perm.iter().enumerate() {
        for (x, y) in s1[new].iter().zip(&s0[old]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let (t0, t1) = (from_tensor(g.value(base.template)), from_tensor(g.value(permuted.template)));
    assert!(max_abs_diff(&t0, &t1) < 1e-12);
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let cfg = micro_cfg(8, 2);
    let (mut store, bb) = build(&cfg, 13);
    let mut r = rng(14);
    let pt = random_cloud(&mut r, 8, 0.5);
    let ps = random_cloud(&mut r, 8, 0.5);
    let w = rand_mat(&mut r, 8, 8);
    let report = check_params(
        &mut store,
        |g| -> onestream::Result<_> {
            let ft = bb.local_embed(g, &pt)?;
            let fs = bb.local_embed(g, &ps)?;
            let out = bb.one_stream(g, ft, fs)?;
            let sel = cpi_select(&pt, 0.3, cfg.n3, 1)?;
            let ff = bb.center_points_interaction(g, out.template, out.search, &sel)?;
            let w = g.constant(w.clone());
            let y = g.mul(ff, w)?;
            Ok(g.mean(y))
        },
        DEFAULT_STEP,
        12,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert!(report.checked > 200);
}

#[test]
fn cpi_selection_rules() {
    // Exactly n3 inside: no randomness.
    let mut pts = vec![[0.0, 0.0, 0.0]; 0];
    for i in 0..4 {
        pts.push([0.01 * i as f64, 0.0, 0.0]);
    }
    pts.push([5.0, 0.0, 0.0]);
    pts.push([-5.0, 0.0, 0.0]);
    let pc = PointCloud::new(pts).unwrap();
    let sel = cpi_select(&pc, 0.5, 4, 99).unwrap();
    assert_eq!(sel.indices, vec![0, 1, 2, 3]);
    assert!(!sel.degenerate);
    assert_eq!(sel, cpi_select(&pc, 0.5, 4, 1234).unwrap());

    // One point inside: repeated.
    let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]]).unwrap();
    assert_eq!(cpi_select(&pc, 0.5, 5, 0).unwrap().indices, vec![0; 5]);

    // Many candidates: seeded and reproducible, distinct and sorted.
    let pc = random_cloud(&mut rng(15), 300, 0.5);
    let a = cpi_select(&pc, 0.6, 16, 7).unwrap();
    assert_eq!(a, cpi_select(&pc, 0.6, 16, 7).unwrap());
    assert_ne!(a, cpi_select(&pc, 0.6, 16, 8).unwrap());
    assert!(a.indices.windows(2).all(|w| w[0] < w[1]));

    // Identical points proceed but are flagged.
    let pc = PointCloud::new(vec![[1.0, 1.0, 1.0]; 6]).unwrap();
    let s = cpi_select(&pc, 0.5, 3, 0).unwrap();
    assert!(s.degenerate);
    assert_eq!(s.indices.len(), 3);
}

#[test]
fn cpi_features_are_selected_template_rows() {
    let cfg = micro_cfg(8, 2);
    let (store, bb) = build(&cfg, 16);
    let mut r = rng(17);
    let (ft, fs) = (rand_mat(&mut r, 8, 8), rand_mat(&mut r, 8, 8));
    let sel = CpiSelection {
        indices: vec![3, 3, 3, 3],
        degenerate: false,
    };
    let mut g = Graph::new(&store);
    let (a, b) = (g.constant(ft.clone()), g.constant(fs.clone()));
    let ff = bb.center_points_interaction(&mut g, a, b, &sel).unwrap();
    let mut x: Mat = vec![ft.row(3).to_vec(); 4];
    x.extend(from_tensor(&fs));
    let (want, _) = dense::block(&store, "backbone.cpi.block0", &x, 2);
    assert!(max_abs_diff(&from_tensor(g.value(ff)), &dense::rows(&want, 4, 8)) < 1e-12);
}

#[test]
fn attention_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let search = random_cloud(&mut rng(18), 5, 1.0);
    let n = 3 + 5;
    let uniform = AttentionMap {
        block: 0,
        n1: 3,
        heads: vec![Tensor::<f64>::full(vec![n, n], 1.0 / n as f64); 2],
    };
    let path = dir.path().join("attn.csv");
    export_attention(&uniform, &search, &path).unwrap();
    let rows = read_attention_csv(&path).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| (r.1 - rows[0].1).abs() < 1e-15));

    let cfg = micro_cfg(8, 2);
    let (store, bb) = build(&cfg, 19);
    let mut r = rng(20);
    let pt = random_cloud(&mut r, 8, 0.5);
    let ps = random_cloud(&mut r, 8, 0.5);
    let mut g = Graph::new(&store);
    let ft = bb.local_embed(&mut g, &pt).unwrap();
    let fs = bb.local_embed(&mut g, &ps).unwrap();
    let out = bb.one_stream(&mut g, ft, fs).unwrap();
    let map = AttentionMap::from_graph(&g, 1, 8, &out.attention[1]);
    export_attention(&map, &ps, &path).unwrap();
    let rows = read_attention_csv(&path).unwrap();
    let mass = map.search_mass().unwrap();
    assert_eq!(rows.len(), cfg.n2);
    for ((p, m), (q, want)) in rows.iter().zip(ps.points().iter().zip(&mass)) {
        assert_eq!(p, q);
        assert_eq!(m, want);
    }
    // Total mass over all columns equals the row count.
    let total: f64 = mass.iter().sum::<f64>();
    assert!(total > 0.0 && total < 16.0);
}
