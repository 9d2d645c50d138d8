use std::sync::Arc;

use super::*;
use crate::geometry::{BevGridSpec, CameraCalibration, SamplingGrid};
use crate::scenegen::{place_cameras, SceneSpec};

fn tiny_config(c: usize) -> NetworkConfig {
    NetworkConfig {
        backbone: BackboneConfig::tiny(),
        channels: c,
        ..NetworkConfig::default()
    }
}

fn scene(h: usize, w: usize, n: usize) -> (Vec<CameraCalibration>, BevGridSpec) {
    let spec = SceneSpec {
        region: (4.0, 4.0),
        n_cameras: n,
        image_size: (h, w),
        cell_size: 0.125,
        ..SceneSpec::default()
    };
    (place_cameras(&spec).unwrap(), spec.grid())
}

fn pseudo_images(n: usize, h: usize, w: usize, seed: f32) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|v| {
            let data = (0..3 * h * w)
                .map(|i| ((i as f32 * 0.731 + v as f32 * 3.1 + seed) * 1.37).sin() * 0.5 + 0.5)
                .collect();
            Tensor::from_vec(&[3, h, w], data)
        })
        .collect()
}

fn run<F: Float>(model: &Model, store: &ParamStore<F>, imgs: &Tensor<F>, tables: &ProjectionTables<F>) -> (Graph<F>, ForwardOutput) {
    let mut g = Graph::new();
    let out = {
        let mut cx = Ctx::new(&mut g, store);
        let x = cx.g.input(imgs.clone(), false);
        model.forward(&mut cx, x, tables).unwrap()
    };
    (g, out)
}

fn shape_of(out: &ForwardOutput, name: &str) -> [usize; 4] {
    out.shapes.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no {name}")).1
}

#[test]
fn small_backbone_stage_shapes() {
    let cfg = NetworkConfig { backbone: BackboneConfig::small(), ..tiny_config(8) };
    let (model, store) = Model::new::<f32>(&cfg).unwrap();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store);
    let x = cx.g.input(Tensor::zeros(&[1, 3, 256, 256]), false);
    let feats = model.backbone.forward(&mut cx, x).unwrap();
    let shapes: Vec<[usize; 4]> = feats.iter().map(|&v| cx.shape(v)).collect();
    assert_eq!(shapes, vec![[1, 32, 32, 32], [1, 64, 16, 16], [1, 128, 8, 8]]);
}

#[test]
fn backbone_rejects_bad_input_sizes() {
    let (model, store) = Model::new::<f32>(&tiny_config(4)).unwrap();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store);
    let x = cx.g.input(Tensor::zeros(&[1, 3, 30, 32]), false);
    assert!(matches!(model.backbone.forward(&mut cx, x), Err(Error::Config(_))));
}

#[test]
fn batch_items_are_independent() {
    let (model, store) = Model::new::<f32>(&tiny_config(4)).unwrap();
    let img = pseudo_images(1, 64, 64, 0.0).remove(0);
    let batch = Model::prepare_images::<f32>(&[img.clone(), img]);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store);
    let x = cx.g.input(batch, false);
    let feats = model.backbone.forward(&mut cx, x).unwrap();
    for f in feats {
        let t = cx.g.value(f);
        assert_eq!(t.item(0).data(), t.item(1).data());
    }
}

#[test]
fn default_config_width_and_layout() {
    let cfg = NetworkConfig::default();
    assert_eq!(cfg.channels, 256);
    assert_eq!(cfg.backbone.out_channels(), [128, 256, 512]);
    assert_eq!(cfg.projection_pairs(), vec![(3, 3), (4, 4), (5, 5)]);
    let shared = NetworkConfig { shared_bev_resolution: true, ..cfg.clone() };
    assert_eq!(shared.projection_pairs(), vec![(3, 3), (4, 3), (5, 3)]);
    let base = NetworkConfig { mode: Mode::Baseline, ..cfg };
    assert_eq!(base.projection_pairs(), vec![(5, 3)]);
    assert_eq!(base.output_levels(), vec![(3, 3)]);
}

#[test]
fn full_forward_shapes_follow_the_level_contract() {
    let (h, w) = (96, 128);
    let (calibs, grid) = scene(h, w, 2);
    let cfg = tiny_config(8);
    let (model, store) = Model::new::<f32>(&cfg).unwrap();
    let tables = ProjectionTables::build(&calibs, &grid, &cfg.projection_pairs()).unwrap();
    let imgs = Model::prepare_images::<f32>(&pseudo_images(2, h, w, 0.0));
    let (_, out) = run(&model, &store, &imgs, &tables);
    for l in [3, 4, 5] {
        let s = 1 << l;
        let (fh, fw) = (h.div_ceil(s), w.div_ceil(s));
        let (bx, by) = grid.level_shape(l);
        assert_eq!(shape_of(&out, &format!("image_fpn.F{l}")), [2, 8, fh, fw]);
        assert_eq!(shape_of(&out, &format!("msp.P{l}")), [2, 8, bx, by]);
        assert_eq!(shape_of(&out, &format!("pool.B{l}")), [1, 8, bx, by]);
        assert_eq!(shape_of(&out, &format!("bev_fpn.B{l}")), [1, 8, bx, by]);
        assert_eq!(shape_of(&out, &format!("head.M{l}")), [1, 1, bx, by]);
        assert_eq!(shape_of(&out, &format!("head.O{l}")), [1, 2, bx, by]);
    }
}

#[test]
fn initial_occupancy_matches_the_prior() {
    let (calibs, grid) = scene(64, 64, 2);
    let cfg = tiny_config(8);
    let (model, store) = Model::new::<f32>(&cfg).unwrap();
    let tables = ProjectionTables::build(&calibs, &grid, &cfg.projection_pairs()).unwrap();
    let out = model.predict(&store, &pseudo_images(2, 64, 64, 1.0), &tables).unwrap();
    let bias = store.get(store.id_of("head.occupancy.out.bias").unwrap()).value.data()[0];
    assert!((bias as f64 - OCCUPANCY_PRIOR_BIAS).abs() < 1e-6);
    assert!((1.0 / (1.0 + 4.59f64.exp()) - 0.01).abs() < 1e-4);
    for k in 0..3 {
        let p = out.probabilities(k);
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean - 0.01).abs() < 0.01, "level {k}: mean probability {mean}");
        assert_eq!(out.offset[k].shape()[1], 2);
    }
}

/// 3x3 convolution weights copying the first `c` input channels.
fn pass_through(store: &mut ParamStore<f64>, conv: &Conv, c: usize) {
    let w = &mut store.get_mut(conv.weight).value;
    let [cout, cin, k, _] = w.dims4();
    w.fill(0.0);
    for o in 0..cout.min(c) {
        let idx = ((o * cin + o) * k + k / 2) * k + k / 2;
        w.data_mut()[idx] = 1.0;
    }
    if let Some(b) = conv.bias {
        store.get_mut(b).value.fill(0.0);
    }
}

fn positive_input(shape: &[usize], seed: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| 0.1 + ((i as f64 * 0.37 + seed).sin()).abs()).collect())
}

#[test]
fn fusion_pass_through_reproduces_lateral_projections() {
    let c = 4;
    for bottom_up in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fpn = Fpn::new(&mut store, "fpn", [3, 5, 6], c, bottom_up, false, &mut rng);
        for conv in fpn.fusion_convs() {
            pass_through(&mut store, conv, c);
        }
        for conv in fpn.lateral_convs() {
            let w = &mut store.get_mut(conv.weight).value;
            let abs = w.map(f64::abs);
            *w = abs;
        }
        let inputs = [
            positive_input(&[1, 3, 12, 10], 0.0),
            positive_input(&[1, 5, 6, 5], 1.0),
            positive_input(&[1, 6, 3, 3], 2.0),
        ];
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store);
        let xs = inputs.clone().map(|t| cx.g.input(t, false));
        let out = fpn.forward(&mut cx, xs);
        for i in 0..3 {
            let lat = fpn.lateral_convs()[i].forward(&mut cx, xs[i]);
            assert_eq!(cx.shape(out[i]), cx.shape(lat));
            let (a, b) = (cx.g.value(out[i]).data().to_vec(), cx.g.value(lat).data().to_vec());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "level {} bottom_up={bottom_up}", i + 3);
            }
        }
    }
}

#[test]
fn bev_pyramid_information_flow() {
    let c = 4;
    let shapes = [[1, c, 16, 12], [1, c, 8, 6], [1, c, 4, 3]];
    for bottom_up in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fpn = Fpn::new(&mut store, "bev", [c; 3], c, bottom_up, true, &mut rng);
        let eval = |perturb: Option<usize>| {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &store);
            let xs: Vec<Var> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut t = positive_input(s, i as f64);
                    if perturb == Some(i) {
                        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
                    }
                    cx.g.input(t, false)
                })
                .collect();
            let out = fpn.forward(&mut cx, [xs[0], xs[1], xs[2]]);
            out.map(|v| cx.g.value(v).clone())
        };
        let base = eval(None);
        let from5 = eval(Some(2));
        let from3 = eval(Some(0));
        let differs = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9);
        assert!(differs(&base[0], &from5[0]), "top-down path must carry level 5 into level 3");
        assert_eq!(differs(&base[2], &from3[2]), bottom_up, "bottom-up path flag");
    }
}

fn grid_with(coords: Vec<[f64; 2]>, valid: Vec<bool>, rows: usize, cols: usize, extent: (usize, usize)) -> SamplingGrid {
    SamplingGrid { level: 3, bev_level: 3, height_index: 0, rows, cols, coords, valid, feature_extent: extent }
}

#[test]
fn sampling_constants_and_deltas() {
    let extent = (5, 6);
    let coords = vec![[0.0, 0.0], [2.5, 1.25], [5.0, 4.0], [3.0, 2.0], [2.0, 1.0], [3.9, 2.9]];
    let g = grid_with(coords, vec![true; 6], 2, 3, extent);
    let table = Arc::new(sample_table_from_grids::<f64>(&[vec![g.clone()]]).unwrap());

    let mut graph = Graph::<f64>::new();
    let x = graph.input(Tensor::full(&[1, 2, 5, 6], 0.7), false);
    let s = graph.sample(x, Arc::clone(&table));
    assert!(graph.value(s).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let mut delta = Tensor::zeros(&[1, 1, 5, 6]);
    delta.set4(0, 0, 2, 3, 1.0);
    let x = graph.input(delta, false);
    let s = graph.sample(x, table);
    let out = graph.value(s).data().to_vec();
    // Hand-computed weight of feature (x=3, y=2) at each sample point.
    let expect = [0.0, 0.5 * 0.25, 0.0, 1.0, 0.0, 0.1 * 0.1];
    for (o, e) in out.iter().zip(expect) {
        assert!((o - e).abs() < 1e-12, "{out:?}");
    }
}

#[test]
fn invalid_cells_give_the_fusion_bias() {
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let msp = Msp::new(&mut store, &[3], c, 2, &mut rng);
    let bias_id = store.id_of("msp.fuse3.bias").unwrap();
    store.get_mut(bias_id).value = Tensor::from_vec(&[c], vec![0.1, -0.2, 0.3]);
    let g0 = grid_with(vec![[1.0, 1.0]; 4], vec![false; 4], 2, 2, (4, 4));
    let table = LevelTable {
        feature_level: 3,
        bev_level: 3,
        table: Arc::new(sample_table_from_grids::<f64>(&[vec![g0.clone(), g0]]).unwrap()),
    };
    let mut graph = Graph::new();
    let mut cx = Ctx::new(&mut graph, &store);
    let x = cx.g.input(positive_input(&[1, c, 4, 4], 0.0), false);
    let p = msp.project(&mut cx, 0, x, &table).unwrap();
    let v = cx.g.value(p);
    for ch in 0..c {
        for i in 0..4 {
            assert!((v.data()[ch * 4 + i] - [0.1, -0.2, 0.3][ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn msp_is_linear_before_bias() {
    let (calibs, grid) = scene(64, 64, 2);
    let tables = ProjectionTables::<f64>::build(&calibs, &grid, &[(4, 4)]).unwrap();
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let msp = Msp::new(&mut store, &[4], c, grid.heights.len(), &mut rng);
    let bias_id = store.id_of("msp.fuse4.bias").unwrap();
    store.get_mut(bias_id).value.fill(0.0);
    let f = positive_input(&[2, c, 4, 4], 0.3);
    let gm = positive_input(&[2, c, 4, 4], 1.9);
    let (a, b) = (0.7, -1.3);
    let combo = Tensor::from_vec(&[2, c, 4, 4], f.data().iter().zip(gm.data()).map(|(x, y)| a * x + b * y).collect());
    let mut graph = Graph::new();
    let mut cx = Ctx::new(&mut graph, &store);
    let mut eval = |t: Tensor<f64>| {
        let x = cx.g.input(t, false);
        let p = msp.project(&mut cx, 0, x, &tables.levels[0]).unwrap();
        cx.g.value(p).clone()
    };
    let (pf, pg, pc) = (eval(f), eval(gm), eval(combo));
    for i in 0..pc.len() {
        assert!((pc.data()[i] - (a * pf.data()[i] + b * pg.data()[i])).abs() < 1e-10);
    }
}

#[test]
fn view_pooling_semantics() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(&[2, 1, 1, 1], vec![0.2, 0.7]), false);
    let m = g.view_max(x);
    let a = g.view_mean(x);
    assert_eq!(g.value(m).data(), &[0.7]);
    assert!((g.value(a).data()[0] - 0.45).abs() < 1e-15);
    let single = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![0.3, -0.1]), false);
    let sm = g.view_max(single);
    assert_eq!(g.value(sm).data(), &[0.3, -0.1]);
}

#[test]
fn full_forward_is_invariant_to_view_order() {
    let (h, w) = (64, 64);
    let (calibs, grid) = scene(h, w, 3);
    for pooling in [Pooling::Max, Pooling::Mean] {
        let cfg = NetworkConfig { pooling, ..tiny_config(4) };
        let (model, store) = Model::new::<f64>(&cfg).unwrap();
        let imgs = pseudo_images(3, h, w, 0.5);
        let order = [2usize, 0, 1];
        let permuted_calibs: Vec<CameraCalibration> = order.iter().map(|&i| calibs[i].clone()).collect();
        let permuted_imgs: Vec<Tensor<f32>> = order.iter().map(|&i| imgs[i].clone()).collect();
        let t1 = ProjectionTables::build(&calibs, &grid, &cfg.projection_pairs()).unwrap();
        let t2 = ProjectionTables::build(&permuted_calibs, &grid, &cfg.projection_pairs()).unwrap();
        let (g1, o1) = run(&model, &store, &Model::prepare_images(&imgs), &t1);
        let (g2, o2) = run(&model, &store, &Model::prepare_images(&permuted_imgs), &t2);
        for k in 0..3 {
            for (a, b) in g1.value(o1.occupancy[k]).data().iter().zip(g2.value(o2.occupancy[k]).data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn ablation_modes_build_and_run() {
    let (h, w) = (64, 64);
    let (calibs, grid) = scene(h, w, 2);
    let variants = [
        NetworkConfig { mode: Mode::Baseline, ..tiny_config(4) },
        NetworkConfig { mode: Mode::MspOnly, ..tiny_config(4) },
        NetworkConfig { shared_bev_resolution: true, ..tiny_config(4) },
        NetworkConfig { share_heads: false, bev_fpn_bottom_up: false, image_fpn_bottom_up: false, ..tiny_config(4) },
    ];
    for cfg in variants {
        let (model, store) = Model::new::<f32>(&cfg).unwrap();
        let tables = ProjectionTables::build(&calibs, &grid, &cfg.projection_pairs()).unwrap();
        let out = model.predict(&store, &pseudo_images(2, h, w, 0.0), &tables).unwrap();
        assert_eq!(out.levels, cfg.output_levels());
        for (k, &(_, bl)) in out.levels.iter().enumerate() {
            let (r, c) = grid.level_shape(bl);
            assert_eq!(out.occupancy_logits[k].shape(), &[1, 1, r, c]);
        }
    }
    assert!("bogus".parse::<Mode>().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config(4);
    let (_, mut store) = Model::new::<f32>(&cfg).unwrap();
    store.iter_mut().for_each(|p| p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += i as f32 * 1e-3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &store).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model.config, cfg);
    for (a, b) in store.iter().zip(ck.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    std::fs::write(&path, b"MSMVDCKP\x09\x00\x00\x00").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
}
