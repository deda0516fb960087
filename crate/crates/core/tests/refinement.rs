use braid::diffusion::{site_shape, train_denoiser, DiffusionConfig, DiffusionModel, SITES};
use braid::imageio::{decode_pgm, encode_pgm};
use braid::nn::params::uniform_tensor;
use braid::nn::{Graph, Tensor};
use braid::pipeline::{alpha_maps_for, DecodeOptions};
use braid::refinement::{corrupt_semantic, srm_cosines, srm_loss, srm_win_rate, train_refinement, train_srm, ImprecisePairSet, RefineConfig, ALPHA_EPS};
use braid::representations::{Codebook, RepresentationTriple, D_S};
use braid::subject_sim::{build_dataset, DatasetConfig, Sample, PAIR_ID_BASE, TRAIN_ID_BASE};
use braid::Error;
use proptest::prelude::*;

const WORLD: u64 = 7;
const CODEBOOK: u64 = 7;

fn identity_pairs(n: usize, seed: u64) -> ImprecisePairSet {
    ImprecisePairSet::generate_with(WORLD, CODEBOOK, n, seed, |ts| Ok(ts.iter().map(|t| (*t).clone()).collect())).unwrap()
}

/// Pairs whose imprecise semantics are Gaussian-corrupted ground truth.
fn corrupted_pairs(n: usize, seed: u64) -> ImprecisePairSet {
    ImprecisePairSet::generate_with(WORLD, CODEBOOK, n, seed, |ts| {
        Ok(ts
            .iter()
            .enumerate()
            .map(|(i, t)| RepresentationTriple { s: corrupt_semantic(&t.s, 0.5, seed, i as u64), ..(*t).clone() })
            .collect())
    })
    .unwrap()
}

fn small_denoiser() -> DiffusionModel {
    let data = build_dataset(&DatasetConfig { subjects: vec![1], n_train: 4, n_test: 1, ..Default::default() }).unwrap();
    train_denoiser(&data, &DiffusionConfig { epochs: 1, batch: 4, max_images: 4, ..Default::default() }, |_, _| {}).unwrap().0
}

fn loss_of(refined: &[f64], target: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_f64(&[1, refined.len()], refined).unwrap()).unwrap();
    let b = g.input(Tensor::from_f64(&[1, target.len()], target).unwrap()).unwrap();
    let l = srm_loss(&mut g, a, b).unwrap();
    g.value(l).item()
}

#[test]
fn srm_loss_examples() {
    let s = [0.6, 0.0, 0.8];
    assert!(loss_of(&s, &s).abs() < 1e-12);
    let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
    assert!((loss_of(&twice, &s) - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    assert!((loss_of(&neg, &s) - 4.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn srm_loss_is_nonnegative(a in proptest::collection::vec(-2.0f64..2.0, 5), b in proptest::collection::vec(-2.0f64..2.0, 5)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        prop_assert!(loss_of(&a, &b) >= -1e-12);
    }
}

#[test]
fn srm_is_identity_at_init_and_deterministic() {
    let mut m = DiffusionModel::new(1).unwrap();
    m.attach_refine(2).unwrap();
    let s = Tensor::new(vec![3, D_S], (0..3 * D_S).map(|i| (i as f32 * 0.21).cos()).collect()).unwrap();
    assert_eq!(m.refine_semantic(&s).unwrap(), s);

    let mut r = braid::rng::rng(3);
    for (id, name, t) in m.params.iter().map(|(i, n, t)| (i, n.to_string(), t.shape().to_vec())).collect::<Vec<_>>() {
        if name.starts_with("refine/srm") {
            m.params.set(id, uniform_tensor(&mut r, &t, 0.3)).unwrap();
        }
    }
    let y = m.refine_semantic(&s).unwrap();
    assert_eq!(y.shape(), [3, D_S]);
    assert_ne!(y, s);
    assert_eq!(y, m.refine_semantic(&s).unwrap());
    assert!(m.refine_semantic(&Tensor::zeros(&[1, D_S + 1])).is_err());
}

#[test]
fn zero_init_gates_are_half_and_render_as_mid_gray() {
    let mut m = DiffusionModel::new(4).unwrap();
    m.attach_refine(5).unwrap();
    let t = &identity_pairs(1, 3).gt[0];
    let maps = alpha_maps_for(&m, t, 0, &DecodeOptions::refined()).unwrap();
    assert_eq!(maps.len(), SITES);
    for map in &maps {
        let (_, h, w) = site_shape(map.site);
        assert_eq!((map.height, map.width), (h, w));
        assert!(map.edge.iter().chain(&map.color).all(|&a| a == 0.5));
        let pgm = encode_pgm(w, h, &map.edge).unwrap();
        let (pw, ph, px) = decode_pgm(&pgm).unwrap();
        assert_eq!((pw, ph), (w, h));
        assert!(px.iter().all(|&p| p == 128));
    }
}

#[test]
fn gates_stay_inside_the_open_interval() {
    let mut m = DiffusionModel::new(4).unwrap();
    m.attach_refine(5).unwrap();
    let mut r = braid::rng::rng(8);
    for (id, name, shape) in m.params.iter().map(|(i, n, t)| (i, n.to_string(), t.shape().to_vec())).collect::<Vec<_>>() {
        if name.starts_with("refine/vcm") || name.starts_with("diffusion/control") {
            m.params.set(id, uniform_tensor(&mut r, &shape, 40.0)).unwrap();
        }
    }
    let t = &identity_pairs(1, 3).gt[0];
    let maps = alpha_maps_for(&m, t, 0, &DecodeOptions::refined()).unwrap();
    let all: Vec<f32> = maps.iter().flat_map(|m| m.edge.iter().chain(&m.color).copied()).collect();
    assert!(all.iter().all(|&a| a > 0.0 && a < 1.0));
    let lo = all.iter().cloned().fold(1.0f32, f32::min);
    let hi = all.iter().cloned().fold(0.0f32, f32::max);
    // saturated heads sit on the squeezed bounds
    assert!(lo as f64 >= ALPHA_EPS - 1e-9 && hi as f64 <= 1.0 - ALPHA_EPS + 1e-9);
    assert!(hi > 0.99 && lo < 0.01, "{lo} {hi}");
}

#[test]
fn identity_stub_pairs_are_exact_and_disjoint_from_training_ids() {
    let p = identity_pairs(12, 9);
    assert_eq!(p.len(), 12);
    assert_eq!(p.imprecise, p.gt);
    assert!(p.image_ids.iter().all(|&id| id >= PAIR_ID_BASE));
    assert!(PAIR_ID_BASE > TRAIN_ID_BASE);
    let cb = Codebook::new(CODEBOOK);
    assert_eq!(Sample::generate(WORLD, &cb, p.image_ids[3]).triple, p.gt[3]);
    let q = identity_pairs(12, 10);
    assert_ne!(p.image_ids, q.image_ids);
}

#[test]
fn pair_sets_round_trip_and_slice() {
    let p = corrupted_pairs(6, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.baid");
    p.save(&path).unwrap();
    assert_eq!(ImprecisePairSet::load(&path).unwrap(), p);
    let s = p.slice(2, 3).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s.image_ids, p.image_ids[2..5]);
    s.save(&path).unwrap();
    assert_eq!(ImprecisePairSet::load(&path).unwrap(), s);
    assert!(p.slice(5, 2).is_err());
}

#[test]
fn pair_generation_rejects_short_reconstructions() {
    let r = ImprecisePairSet::generate_with(WORLD, CODEBOOK, 3, 1, |ts| Ok(vec![ts[0].clone()]));
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn refinement_training_freezes_the_denoiser_and_is_reproducible() {
    let base = small_denoiser();
    let pairs = corrupted_pairs(6, 4);
    let cfg = RefineConfig { epochs: 2, batch: 3, ..Default::default() };
    let (a, ha) = train_refinement(&base, &pairs, &cfg, |_, _| {}).unwrap();
    let (b, hb) = train_refinement(&base, &pairs, &cfg, |_, _| {}).unwrap();
    assert_eq!(a.diffusion_digest(), base.diffusion_digest());
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert!(ha.iter().all(|l| l.is_finite()));
    assert_ne!(a.params.digest_where(|n| n.starts_with("refine/")), {
        let mut fresh = base.clone();
        fresh.attach_refine(cfg.seed).unwrap();
        fresh.params.digest_where(|n| n.starts_with("refine/"))
    });
    assert!(matches!(train_refinement(&a, &pairs, &cfg, |_, _| {}), Err(Error::Config(_))));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.baic");
    a.save_refine(&p, Some(&cfg), &ha).unwrap();
    let mut back = base.clone();
    let man = back.load_refine(&p).unwrap();
    assert_eq!(man.training, Some(cfg));
    assert_eq!(back.params, a.params);
}

#[test]
fn srm_learns_to_undo_gaussian_corruption() {
    let train = corrupted_pairs(1500, 21);
    let held = corrupted_pairs(200, 22);
    let mut m = DiffusionModel::new(1).unwrap();
    m.attach_refine(3).unwrap();
    let inputs: Vec<Vec<f32>> = train.imprecise.iter().map(|t| t.s.clone()).collect();
    let targets: Vec<Vec<f32>> = train.gt.iter().map(|t| t.s.clone()).collect();
    let before = m.params.digest_where(|n| !n.starts_with("refine/srm/"));
    let cfg = RefineConfig { epochs: 40, batch: 32, lr: 2e-3, ..Default::default() };
    let hist = train_srm(&mut m, &inputs, &targets, &cfg, |_, _| {}).unwrap();
    assert_eq!(before, m.params.digest_where(|n| !n.starts_with("refine/srm/")));
    assert!(hist.last().unwrap() < &hist[0]);
    let hi: Vec<Vec<f32>> = held.imprecise.iter().map(|t| t.s.clone()).collect();
    let hg: Vec<Vec<f32>> = held.gt.iter().map(|t| t.s.clone()).collect();
    let win = srm_win_rate(&srm_cosines(&m, &hi, &hg).unwrap());
    assert!(win >= 0.8, "win rate {win}");
}
