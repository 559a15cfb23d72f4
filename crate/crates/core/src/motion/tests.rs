use super::*;
use crate::gradcheck::{compare_gradients_floored, kink_aware_partial, random_raster_scene};
use crate::nn::{ParamStore, Tape, Tensor};
use crate::raster::{RasterConfig, Rasterizer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> MotionConfig {
    MotionConfig {
        hash: HashGridConfig {
            levels: 2,
            table_size: 1 << 8,
            base_res: 4,
            ..HashGridConfig::default()
        },
        audio_dim: 5,
        hidden: 8,
        hidden_layers: 2,
    }
}

fn tagged_scene(seed: u64, n: usize) -> (GaussianCloud, CameraPose) {
    let (mut cloud, cam) = random_raster_scene(seed, n, 3, 32);
    for i in n / 2..n {
        cloud.tags[i] = Branch::Occluded;
    }
    (cloud, cam)
}

fn fields(seed: u64, with_fine: bool) -> (ParamStore, MotionFields) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f = MotionFields::new(&mut store, &small_config(), with_fine, &mut rng).unwrap();
    (store, f)
}

/// Replaces every parameter of `field` (including the zeroed last layer) with
/// values large enough that the deltas are clearly nonzero.
fn randomize(store: &mut ParamStore, field: &MotionFieldParams, rng: &mut impl Rng) {
    for id in field.param_ids() {
        let amp = if id == field.tables { 0.5 } else { 0.4 };
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-amp..amp));
    }
}

fn audio(seed: u64, n: usize, d: usize) -> AudioFeatureTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioFeatureTrack::new(d, 25, 1, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_initialised_fields_are_the_identity() {
    let (cloud, cam) = tagged_scene(3, 12);
    let (store, f) = fields(1, true);
    let track = audio(2, 3, 5);
    let rast = Rasterizer::new(RasterConfig::default());
    let base = rast.render(&cloud, &cam).unwrap();
    for t in 0..track.len() {
        let d = dual_branch_animate(&cloud, track.frame(t), &f, &store).unwrap();
        assert_eq!(d, cloud);
    }
    for img in animate_sequence(&cloud, &track, &f, &store, &rast, &cam).unwrap() {
        assert_eq!(img.data, base.data);
    }
}

#[test]
fn zero_delta_leaves_cloud_bitwise_equal() {
    let (mut cloud, _) = tagged_scene(4, 6);
    cloud.mu_flat_mut()[0] = -0.0;
    let out = apply_deformation(&cloud, &DeformationDelta::zeros(6)).unwrap();
    assert_eq!(out.mu_flat()[0].to_bits(), (-0.0f64).to_bits());
    assert_eq!(out, cloud);
}

#[test]
fn render_changes_iff_delta_nonzero() {
    let (cloud, cam) = tagged_scene(5, 10);
    let rast = Rasterizer::new(RasterConfig::default());
    let base = rast.render(&cloud, &cam).unwrap();
    let mut delta = DeformationDelta::zeros(cloud.len());
    let same = rast.render(&apply_deformation(&cloud, &delta).unwrap(), &cam).unwrap();
    assert_eq!(same.data, base.data);
    delta.d_mu[0] = 0.05;
    let moved = rast.render(&apply_deformation(&cloud, &delta).unwrap(), &cam).unwrap();
    assert_ne!(moved.data, base.data);
}

#[test]
fn branches_only_move_their_own_primitives() {
    let (cloud, _) = tagged_scene(6, 16);
    let track = audio(7, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let (mut store, f) = fields(9, true);
    randomize(&mut store, &f.coarse, &mut rng);
    let out = dual_branch_animate(&cloud, track.frame(0), &f, &store).unwrap();
    for i in 0..cloud.len() {
        let moved = out.get(i) != cloud.get(i);
        assert_eq!(moved, cloud.tag(i) == Branch::Visible, "coarse field, primitive {i}");
    }

    let (mut store, f) = fields(9, true);
    randomize(&mut store, f.fine.as_ref().unwrap(), &mut rng);
    let out = dual_branch_animate(&cloud, track.frame(0), &f, &store).unwrap();
    for i in 0..cloud.len() {
        let moved = out.get(i) != cloud.get(i);
        assert_eq!(moved, cloud.tag(i) == Branch::Occluded, "fine field, primitive {i}");
        assert_eq!(out.get(i).feat, cloud.get(i).feat);
    }
}

#[test]
fn without_fine_field_coarse_drives_everything() {
    let (cloud, _) = tagged_scene(10, 8);
    let (mut store, f) = fields(11, false);
    assert!(f.fine.is_none());
    assert!(store.ids_with_prefix(&["motion.fine"]).is_empty());
    randomize(&mut store, &f.coarse, &mut ChaCha8Rng::seed_from_u64(12));
    let out = dual_branch_animate(&cloud, audio(13, 1, 5).frame(0), &f, &store).unwrap();
    for i in 0..cloud.len() {
        assert_ne!(out.get(i).mu, cloud.get(i).mu);
    }
}

#[test]
fn tape_path_matches_value_path() {
    let (cloud, _) = tagged_scene(14, 10);
    let (mut store, f) = fields(15, true);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    randomize(&mut store, &f.coarse, &mut rng);
    randomize(&mut store, f.fine.as_ref().unwrap(), &mut rng);
    let a = audio(17, 1, 5);
    let expected = dual_branch_animate(&cloud, a.frame(0), &f, &store).unwrap();

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let vars = CloudVars::constant(&mut tape, &cloud);
    let delta = dual_branch_on_tape(&mut tape, &bound, &f, &cloud, a.frame(0)).unwrap();
    let out = apply_on_tape(&mut tape, &vars, delta).unwrap();
    let got = out.to_cloud(&tape, cloud.tags()).unwrap();
    for (x, y) in got.mu_flat().iter().zip(expected.mu_flat()) {
        assert!((x - y).abs() < 1e-14);
    }
    for (x, y) in got.rot_flat().iter().zip(expected.rot_flat()) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn tape_path_requires_visible_prefix() {
    let (mut cloud, _) = tagged_scene(18, 6);
    cloud.tags[0] = Branch::Occluded;
    let (store, f) = fields(19, true);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    assert!(dual_branch_on_tape(&mut tape, &bound, &f, &cloud, &[0.0; 5]).is_err());
}

#[test]
fn wrong_audio_dimension_is_rejected() {
    let (cloud, _) = tagged_scene(20, 4);
    let (store, f) = fields(21, true);
    assert!(matches!(
        dual_branch_animate(&cloud, &[0.0; 4], &f, &store),
        Err(Error::Dimension { .. })
    ));
}

fn field_loss(store: &ParamStore, f: &MotionFields, cloud: &GaussianCloud, a: &[f64], w: &[f64]) -> (f64, Tape, Bound) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let y = dual_branch_on_tape(&mut tape, &bound, f, cloud, a).unwrap();
    let wv = Tensor::new(tape.value(y).shape().to_vec(), w.to_vec()).unwrap();
    let prod = tape.mul_const(y, &wv).unwrap();
    let loss = tape.sum(prod);
    let v = tape.value(loss).item();
    tape.backward(loss).unwrap();
    (v, tape, bound)
}

#[test]
fn field_gradients_match_finite_differences() {
    let (cloud, _) = tagged_scene(22, 12);
    let (mut store, f) = fields(23, true);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    randomize(&mut store, &f.coarse, &mut rng);
    randomize(&mut store, f.fine.as_ref().unwrap(), &mut rng);
    // keep the relu pre-activations away from zero on average
    for id in f.param_ids() {
        if store.name(id).ends_with(".bias") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
    }
    let a = audio(25, 1, 5);
    let w: Vec<f64> = (0..cloud.len() * DELTA_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, tape, bound) = field_loss(&store, &f, &cloud, a.frame(0), &w);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in f.param_ids() {
        let g = tape.grad(bound.var(id)).unwrap().to_vec();
        let n = g.len();
        // tables are sparse: prefer entries that are actually touched
        let mut picks: Vec<usize> = (0..n).filter(|&k| g[k] != 0.0).take(15).collect();
        picks.extend((0..5).map(|_| rng.gen_range(0..n)));
        for k in picks {
            let x0 = store.get(id).data()[k];
            let mut probe = store.clone();
            let (est, floor) = kink_aware_partial(
                |x| {
                    probe.get_mut(id).data_mut()[k] = x;
                    field_loss(&probe, &f, &cloud, a.frame(0), &w).0
                },
                x0,
                1e-5,
            );
            analytic.push(g[k]);
            numeric.push((est, floor));
        }
    }
    assert!(analytic.len() >= 20);
    let rep = compare_gradients_floored(&analytic, &numeric, 1e-4, 1e-9);
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn audio_track_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.aud");
    let t = audio(26, 7, 4);
    t.write(&p).unwrap();
    assert_eq!(AudioFeatureTrack::read(&p).unwrap(), t);

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[3] = 9;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(AudioFeatureTrack::read(&p), Err(Error::Version { .. })));
    bytes[3] = 1;
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(AudioFeatureTrack::read(&p), Err(Error::Format { .. })));
}

#[test]
fn synthetic_audio_is_deterministic_and_bounded() {
    let curve: Vec<f64> = (0..20).map(|t| (t as f64 * 0.3).sin()).collect();
    let a = synthetic_audio(&curve, 8, 3, 25).unwrap();
    assert_eq!(a, synthetic_audio(&curve, 8, 3, 25).unwrap());
    assert_eq!(a.len(), 20);
    assert!(a.data.iter().all(|v| v.abs() < 1.0));
    assert_ne!(a.frame(0), a.frame(5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn animation_is_stateless_across_frame_order(seed in 0u64..1000, rot in 0usize..5) {
        let (cloud, _) = tagged_scene(seed, 8);
        let (mut store, f) = fields(seed + 1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        randomize(&mut store, &f.coarse, &mut rng);
        randomize(&mut store, f.fine.as_ref().unwrap(), &mut rng);
        let track = audio(seed + 3, 5, 5);
        let forward: Vec<_> = (0..5)
            .map(|t| dual_branch_animate(&cloud, track.frame(t), &f, &store).unwrap())
            .collect();
        let mut order: Vec<usize> = (0..5).collect();
        order.rotate_left(rot);
        order.reverse();
        for &t in &order {
            let again = dual_branch_animate(&cloud, track.frame(t), &f, &store).unwrap();
            prop_assert_eq!(&again, &forward[t]);
        }
    }

    #[test]
    fn per_primitive_deltas_ignore_the_rest_of_the_cloud(seed in 0u64..1000) {
        let (cloud, _) = tagged_scene(seed, 10);
        let (mut store, f) = fields(seed + 5, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 6);
        randomize(&mut store, &f.coarse, &mut rng);
        randomize(&mut store, f.fine.as_ref().unwrap(), &mut rng);
        let a = audio(seed + 7, 1, 5);
        let full = dual_branch_animate(&cloud, a.frame(0), &f, &store).unwrap();
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.reverse();
        let shuffled = cloud.select(&perm);
        let out = dual_branch_animate(&shuffled, a.frame(0), &f, &store).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(out.get(k), full.get(i));
        }
    }
}
