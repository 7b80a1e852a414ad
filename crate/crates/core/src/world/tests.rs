use super::*;
use crate::bev::linear_cka;

fn grid() -> Grid {
    Grid { channels: 16, ..Grid::default() }
}

#[test]
fn scenes_are_deterministic() {
    let p = WorldProfile::default();
    for seed in 0..20 {
        let a = generate_scene(seed, &p).unwrap();
        let b = generate_scene(seed, &p).unwrap();
        assert_eq!(a, b);
        let fa = render_canonical(&a, 1, &grid()).unwrap();
        let fb = render_canonical(&b, 1, &grid()).unwrap();
        assert_eq!(fa, fb);
    }
    assert_ne!(generate_scene(1, &p).unwrap(), generate_scene(2, &p).unwrap());
}

#[test]
fn categories_match_visibility() {
    let p = WorldProfile::default();
    for seed in 0..50 {
        let s = generate_scene(seed, &p).unwrap();
        assert!(s.boxes.len() >= 1);
        for (i, (b, c)) in s.boxes.iter().zip(&s.categories).enumerate() {
            assert!(b.x.abs() <= p.extent && b.y.abs() <= p.extent);
            let (te, tn) = c.target();
            assert_eq!(s.visibility[0][i], te as f64 / 9.0, "seed {seed} box {i} {c:?}");
            assert_eq!(s.visibility[1][i], tn as f64 / 9.0, "seed {seed} box {i} {c:?}");
            assert!(s.visibility.iter().any(|v| v[i] > 0.0));
        }
    }
}

#[test]
fn zero_blind_profile_keeps_every_box_ego_visible() {
    let p = WorldProfile { ego_blind: 0.0, ..WorldProfile::default() };
    for seed in 0..50 {
        let s = generate_scene(seed, &p).unwrap();
        assert!(s.visibility[0].iter().all(|&v| v > 0.0));
    }
}

#[test]
fn neighbor_only_fraction_tracks_profile() {
    let p = WorldProfile { ego_blind: 0.3, ..WorldProfile::default() };
    let (mut blind, mut total) = (0usize, 0usize);
    for seed in 0..1000 {
        let s = generate_scene(seed, &p).unwrap();
        total += s.boxes.len();
        blind += s.visibility[0].iter().zip(&s.visibility[1]).filter(|(&e, &n)| e == 0.0 && n > 0.0).count();
    }
    let frac = blind as f64 / total as f64;
    assert!((frac - 0.3).abs() <= 0.05, "fraction {frac}");
}

#[test]
fn empty_scene_renders_background() {
    let s = Scene::open(3, Vec::new(), vec![]);
    let f = render_canonical(&s, 0, &grid()).unwrap();
    for ch in 0..GEOMETRY_CHANNELS {
        assert!(f.plane(ch).iter().all(|&v| v == 0.0));
    }
    assert!(f.plane(GEOMETRY_CHANNELS).iter().any(|&v| v > 0.0));
}

#[test]
fn single_box_peaks_at_its_cell() {
    let g = grid();
    let b = OrientedBox::new(0.5, 0.5, 2.0, 4.5, 0.3).unwrap();
    let s = Scene::open(0, vec![b], vec![]);
    let f = render_canonical(&s, 0, &g).unwrap();
    let occ = f.plane(0);
    let arg = (0..occ.len()).max_by(|&a, &b| occ[a].total_cmp(&occ[b])).unwrap();
    assert_eq!(arg, g.cell_of(0.5, 0.5).unwrap());
    assert!((occ[arg] - 1.0).abs() < 1e-12);
}

#[test]
fn grid_errors() {
    let s = Scene::open(0, vec![OrientedBox::new(30.0, 0.0, 2.0, 4.0, 0.0).unwrap()], vec![]);
    assert!(matches!(render_canonical(&s, 0, &grid()), Err(Error::Config(_))));
    let small = Grid { channels: 5, ..Grid::default() };
    assert!(matches!(render_canonical(&Scene::open(0, vec![], vec![]), 0, &small), Err(Error::Config(_))));
}

#[test]
fn fully_visible_renders_agree_across_agents() {
    let p = WorldProfile { ego_blind: 0.0, ego_partial: 0.0, ego_only: 0.0, extra_occluders: 0, ..WorldProfile::default() };
    for seed in 0..10 {
        let s = generate_scene(seed, &p).unwrap();
        let e = render_canonical(&s, 0, &grid()).unwrap();
        let n = render_canonical(&s, 1, &grid()).unwrap();
        assert!(linear_cka(&e, &n).unwrap().value >= 0.99);
    }
}

fn sample_field() -> FeatureField {
    let s = generate_scene(5, &WorldProfile::default()).unwrap();
    render_canonical(&s, 1, &grid()).unwrap()
}

#[test]
fn none_is_identity() {
    let f = sample_field();
    assert_eq!(apply_distortion(&f, &DistortionSpec::None, 0).unwrap(), f);
}

#[test]
fn affine_inverse_restores_field() {
    let f = sample_field();
    let c = f.channels();
    let fwd = DistortionSpec::ChannelAffine { gain: vec![2.0; c], offset: vec![1.0; c] };
    let inv = DistortionSpec::ChannelAffine { gain: vec![0.5; c], offset: vec![-0.5; c] };
    let back = apply_distortion(&apply_distortion(&f, &fwd, 0).unwrap(), &inv, 0).unwrap();
    assert!(back.values.max_abs_diff(&f.values).unwrap() <= 1e-12);
}

#[test]
fn orthogonal_mix_inverts_with_transpose() {
    let f = sample_field();
    let c = f.channels();
    let spec = DistortionRecipe::Orthogonal { seed: 9 }.resolve(c).unwrap();
    let DistortionSpec::ChannelMix { matrix } = &spec else { panic!() };
    assert!((condition_number(matrix) - 1.0).abs() < 1e-9);
    let mt: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| matrix[j][i]).collect()).collect();
    let back = apply_distortion(
        &apply_distortion(&f, &spec, 0).unwrap(),
        &DistortionSpec::ChannelMix { matrix: mt },
        0,
    )
    .unwrap();
    assert!(back.values.max_abs_diff(&f.values).unwrap() <= 1e-9);
}

#[test]
fn ill_conditioned_mix_is_rejected() {
    let mut m = vec![vec![0.0; 3]; 3];
    m[0][0] = 1.0;
    m[1][1] = 1.0;
    assert!(matches!(DistortionSpec::ChannelMix { matrix: m.clone() }.validate(3), Err(Error::Config(_))));
    m[2][2] = 0.01;
    assert!(DistortionSpec::ChannelMix { matrix: m.clone() }.validate(3).is_err());
    m[2][2] = 0.1;
    assert!(DistortionSpec::ChannelMix { matrix: m }.validate(3).is_ok());
}

#[test]
fn noise_is_seeded_per_salt() {
    let f = sample_field();
    let spec = DistortionRecipe::Noise { amplitude: 0.1, seed: 4, channels: vec![0, 3] }.resolve(16).unwrap();
    let a = apply_distortion(&f, &spec, 1).unwrap();
    assert_eq!(a, apply_distortion(&f, &spec, 1).unwrap());
    assert_ne!(a, apply_distortion(&f, &spec, 2).unwrap());
    assert_eq!(a.plane(1), f.plane(1));
}

#[test]
fn cka_falls_as_gain_spread_grows() {
    let f = sample_field();
    let mut last = 1.0 + 1e-12;
    for k in 0..8 {
        let spec = DistortionRecipe::LogGain { spread: 0.2 * k as f64, seed: 3 }.resolve(16).unwrap();
        let cka = linear_cka(&f, &apply_distortion(&f, &spec, 0).unwrap()).unwrap().value;
        assert!(cka <= last + 1e-9, "spread step {k}: {cka} > {last}");
        last = cka;
    }
    assert!(last < 0.95);
}

#[test]
fn cka_falls_as_leak_grows() {
    let f = sample_field();
    let mut last = 1.0 + 1e-12;
    for k in 0..6 {
        let spec = DistortionRecipe::Mix { leak: 0.1 * k as f64, fan_in: 3, seed: 3 }.resolve(16).unwrap();
        let cka = linear_cka(&f, &apply_distortion(&f, &spec, 0).unwrap()).unwrap().value;
        assert!(cka <= last + 1e-9, "leak step {k}: {cka} > {last}");
        last = cka;
    }
}

#[test]
fn serialization_round_trips() {
    let s = generate_scene(8, &WorldProfile::default()).unwrap();
    assert_eq!(Scene::from_json(&s.to_json().unwrap()).unwrap(), s);
    let r = DistortionRecipe::Composite {
        stages: vec![
            DistortionRecipe::Mix { leak: 0.3, fan_in: 2, seed: 1 },
            DistortionRecipe::Affine { gain: [1.0, 3.0], offset: [0.0, 0.1], seed: 2 },
        ],
    };
    let spec = r.resolve(16).unwrap();
    let js = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<DistortionSpec>(&js).unwrap(), spec);
    let rj = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<DistortionRecipe>(&rj).unwrap(), r);
    assert!(serde_json::from_str::<DistortionSpec>(r#"{"kind":"channel_affine","gain":[],"offset":[],"bogus":1}"#).is_err());
}

#[test]
fn wrap_angle_range() {
    for k in -20..20 {
        let a = wrap_angle(k as f64 * 0.7);
        assert!(a > -PI && a <= PI);
        let turns = (a - k as f64 * 0.7) / (2.0 * PI);
        assert!((turns - turns.round()).abs() < 1e-9);
    }
    assert_eq!(wrap_angle(-PI), PI);
}
