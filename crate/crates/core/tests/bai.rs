use std::sync::atomic::Ordering;

use braid::bai::eval::{cosine, translate_many};
use braid::bai::loss::{cycle_dist, cycle_rep_terms};
use braid::bai::{
    adapt_new_subject, loss_total, saliency_objective, train_bai, voxel_saliency, BaiBundle, BaiModel, Batch, CycleReduction,
    Lambdas, SaliencyTarget, Sbmm, TrainingConfig, Variant, D_LAT,
};
use braid::nn::gradcheck::{grad_check_input, grad_check_params_sampled};
use braid::nn::{Builder, Graph, ParamStore, Tensor};
use braid::subject_sim::{build_dataset, Dataset, DatasetConfig, D_V};
use braid::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> Dataset {
    build_dataset(&DatasetConfig { subjects: vec![1, 2], n_train: 4, n_test: 2, ..Default::default() }).unwrap()
}

fn quick_cfg(variant: Variant) -> TrainingConfig {
    TrainingConfig { epochs: 1, batch: 2, lr: 1e-3, variant, ..Default::default() }
}

fn sbmm3(w: f32, b: f32) -> (Sbmm, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Sbmm::new(&mut Builder::new(&mut store, &mut rng, ""), "s", 3).unwrap();
    store.get_mut(m.w.b).data_mut().fill(w);
    store.get_mut(m.b.b).data_mut().fill(b);
    (m, store)
}

fn run_sbmm(m: &Sbmm, store: &ParamStore, rows: &[f64], width: usize) -> Vec<f64> {
    let mut g = Graph::with_params(store);
    let x = g.input(Tensor::from_f64(&[rows.len() / width, width], rows).unwrap()).unwrap();
    let y = m.forward(&mut g, x).unwrap();
    g.value(y).to_f64_vec()
}

#[test]
fn sbmm_identity_init_standardizes_row() {
    let (m, store) = sbmm3(1.0, 0.0);
    let y = run_sbmm(&m, &store, &[1.0, 2.0, 3.0], 3);
    for (a, b) in y.iter().zip([-1.2247, 0.0, 1.2247]) {
        assert!((a - b).abs() < 1e-4, "{y:?}");
    }
}

#[test]
fn sbmm_scaled_and_shifted_row() {
    let (m, store) = sbmm3(2.0, 1.0);
    let y = run_sbmm(&m, &store, &[1.0, 2.0, 3.0], 3);
    for (a, b) in y.iter().zip([-1.4495, 1.0, 3.4495]) {
        assert!((a - b).abs() < 1e-4, "{y:?}");
    }
}

#[test]
fn sbmm_constant_row_returns_shift() {
    let (m, store) = sbmm3(1.0, 0.25);
    let y = run_sbmm(&m, &store, &[4.0, 4.0, 4.0], 3);
    assert!(y.iter().all(|&v| v == 0.25), "{y:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn sbmm_rows_have_zero_mean_unit_std(rows in proptest::collection::vec(-50.0f64..50.0, 24)) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Sbmm::new(&mut Builder::new(&mut store, &mut rng, ""), "s", 8).unwrap();
        let store = store.cast::<f64>();
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::from_f64(&[3, 8], &rows).unwrap()).unwrap();
        let y = m.forward(&mut g, x).unwrap();
        let y = g.value(y).to_f64_vec();
        for (inp, out) in rows.chunks(8).zip(y.chunks(8)) {
            let mu_in = inp.iter().sum::<f64>() / 8.0;
            let sd_in = (inp.iter().map(|v| (v - mu_in).powi(2)).sum::<f64>() / 8.0).sqrt();
            let mu = out.iter().sum::<f64>() / 8.0;
            let sd = (out.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0).sqrt();
            prop_assert!(mu.abs() < 1e-6);
            if sd_in > 1e-3 {
                prop_assert!((sd - 1.0).abs() < 1e-4, "std {}", sd);
            }
        }
    }
}

#[test]
fn sbmm_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = Sbmm::new(&mut Builder::new(&mut store, &mut rng, ""), "s", 5).unwrap();
    let mut store = store.cast::<f64>();
    let mut r = braid::rng::rng(9);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, braid::nn::params::uniform_tensor(&mut r, &shape, 0.5)).unwrap();
    }
    let x = Tensor::from_f64(&[2, 5], &[0.3, -1.0, 2.0, 0.1, 0.7, 1.5, 1.4, -0.2, 0.0, 0.9]).unwrap();
    let w = Tensor::from_f64(&[2, 5], &[0.5, -0.3, 1.1, 0.2, -0.8, 0.9, 0.1, -0.4, 0.6, 0.3]).unwrap();
    let f = |g: &mut Graph<'_, f64>, x| {
        let y = m.forward(g, x)?;
        let w = g.input(w.clone())?;
        let p = g.mul(y, w)?;
        g.sum_all(p)
    };
    grad_check_input(&store, f, &x, 1e-4).unwrap();
    braid::nn::gradcheck::grad_check_params(
        &store,
        |g| {
            let xv = g.input(x.clone())?;
            f(g, xv)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn full_loss_parameter_gradients_match_finite_differences() {
    let data = tiny();
    let model = BaiModel::new(Variant::Full, &[1, 2], 3).unwrap();
    let store = model.params.cast::<f64>();
    let b = Batch::from_split(1, &data.train[&1], &[0, 1]).unwrap();
    let rep = grad_check_params_sampled(
        &store,
        |g: &mut Graph<'_, f64>| {
            let v = g.input(b.voxels.cast())?;
            let r = b.reps.input(g)?;
            Ok(loss_total(&model.arch, g, v, r, 1, &Lambdas::default(), CycleReduction::Sum)?.total)
        },
        1e-4,
        3,
        11,
        1e-5,
    )
    .unwrap();
    assert!(rep.checked > 100);
}

#[test]
fn saliency_gradients_match_finite_differences() {
    let data = tiny();
    let model = BaiModel::new(Variant::Full, &[1, 2], 4).unwrap();
    let store = model.params.cast::<f64>();
    let v = Tensor::new(vec![1, D_V], data.train[&1].voxels[0].iter().map(|&x| x as f64).collect()).unwrap();
    for target in [SaliencyTarget::Semantic, SaliencyTarget::Edge, SaliencyTarget::Color] {
        grad_check_input(&store, |g, x| saliency_objective(&model.arch, g, x, 1, target), &v, 1e-4).unwrap();
    }
}

#[test]
fn saliency_is_normalized_and_one_hot_for_single_voxel_stub() {
    let data = tiny();
    let mut model = BaiModel::new(Variant::Full, &[1, 2], 5).unwrap();
    let v = &data.train[&1].voxels[0];
    let sal = voxel_saliency(&model, v, 1, SaliencyTarget::Semantic).unwrap();
    assert_eq!(sal.len(), D_V);
    assert!(sal.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert_eq!(sal.iter().cloned().fold(0.0f32, f32::max), 1.0);

    let id = model.params.id("fmri_enc/dense/weight").unwrap();
    let w = model.params.get_mut(id);
    let cols = w.shape()[1];
    for (k, x) in w.data_mut().iter_mut().enumerate() {
        if k % cols != 0 {
            *x = 0.0;
        }
    }
    let sal = voxel_saliency(&model, v, 1, SaliencyTarget::Semantic).unwrap();
    assert_eq!(sal[0], 1.0);
    assert!(sal[1..].iter().all(|&x| x == 0.0));
}

#[test]
fn um_variant_never_decodes_voxels() {
    let data = tiny();
    let b = Batch::from_split(1, &data.train[&1], &[0, 1]).unwrap();
    let run = |variant| {
        let model = BaiModel::new(variant, &[1, 2], 3).unwrap();
        let mut g = Graph::with_params(&model.params);
        let v = g.input(b.voxels.clone()).unwrap();
        let r = b.reps.input(&mut g).unwrap();
        let lg = loss_total(&model.arch, &mut g, v, r, 1, &Lambdas::default(), CycleReduction::Mean).unwrap();
        let names: Vec<&str> = lg.terms.iter().map(|t| t.0).collect();
        let c = &model.arch.counters;
        (names, c.decode_fmri.load(Ordering::Relaxed), c.translate_r2v.load(Ordering::Relaxed))
    };
    let (names, dec, r2v) = run(Variant::Um);
    assert_eq!(names, ["tr_s", "tr_e", "tr_c"]);
    assert_eq!((dec, r2v), (0, 0));
    let (names, dec, r2v) = run(Variant::Full);
    assert_eq!(names.len(), 12);
    assert!(dec > 0 && r2v > 0);
}

#[test]
fn zero_cycle_weight_drops_exactly_the_cycle_terms() {
    let data = tiny();
    let b = Batch::from_split(2, &data.train[&2], &[0, 1, 2]).unwrap();
    let model = BaiModel::new(Variant::Full, &[1, 2], 3).unwrap();
    let mut g = Graph::with_params(&model.params);
    let v = g.input(b.voxels.clone()).unwrap();
    let r = b.reps.input(&mut g).unwrap();
    let lam = Lambdas { cyc: 0.0, ..Default::default() };
    let lg = loss_total(&model.arch, &mut g, v, r, 2, &lam, CycleReduction::Mean).unwrap();
    let names: Vec<&str> = lg.terms.iter().map(|t| t.0).collect();
    assert_eq!(names, ["rec_s", "rec_e", "rec_c", "rec_v", "tr_s", "tr_e", "tr_c", "tr_v"]);
}

#[test]
fn identity_cycle_has_zero_cycle_loss() {
    let data = tiny();
    let b = Batch::from_split(1, &data.train[&1], &[0, 1]).unwrap();
    for red in [CycleReduction::Mean, CycleReduction::Sum] {
        let mut g = Graph::<f32>::new();
        let r = b.reps.input(&mut g).unwrap();
        let v = g.input(b.voxels.clone()).unwrap();
        for (_, t) in cycle_rep_terms(&mut g, r, r, red).unwrap() {
            assert_eq!(g.value(t).item(), 0.0);
        }
        let c = cycle_dist(&mut g, v, v, red, "cyc_v").unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }
}

#[test]
fn sum_and_mean_cycle_reductions_differ_by_element_count() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let b = g.input(Tensor::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
    let s = cycle_dist(&mut g, a, b, CycleReduction::Sum, "x").unwrap();
    let m = cycle_dist(&mut g, a, b, CycleReduction::Mean, "x").unwrap();
    // rows: 14 and 3 → mean over rows 8.5; mean over elements 17/6
    assert!((g.value(s).item() - 8.5).abs() < 1e-12);
    assert!((g.value(m).item() - 17.0 / 6.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn total_loss_is_nonnegative(seed in 0u64..1000, item in 0usize..4, cyc in 0.0f64..2.0) {
        let data = tiny();
        let model = BaiModel::new(Variant::Full, &[1, 2], seed).unwrap();
        let b = Batch::from_split(1, &data.train[&1], &[item]).unwrap();
        let mut g = Graph::with_params(&model.params);
        let v = g.input(b.voxels.clone()).unwrap();
        let r = b.reps.input(&mut g).unwrap();
        let lam = Lambdas { cyc, ..Default::default() };
        let lg = loss_total(&model.arch, &mut g, v, r, 1, &lam, CycleReduction::Sum).unwrap();
        prop_assert!(g.value(lg.total).item() >= 0.0);
        for (_, t) in lg.terms {
            prop_assert!(g.value(t).item() >= 0.0);
        }
    }
}

#[test]
fn no_sbmm_latent_ignores_subject() {
    let data = tiny();
    let model = BaiModel::new(Variant::NoSbmm, &[1, 2], 3).unwrap();
    let v = Tensor::new(vec![1, D_V], data.train[&1].voxels[0].clone()).unwrap();
    let a = model.encode_fmri(&v, 1).unwrap();
    let b = model.encode_fmri(&v, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [1, D_LAT]);
    assert!(matches!(model.encode_fmri(&v, 9), Err(Error::MissingSubject(9))));
}

#[test]
fn untrained_translation_is_uninformative_on_average() {
    let data = build_dataset(&DatasetConfig { subjects: vec![1], n_train: 1, n_test: 40, ..Default::default() }).unwrap();
    let mut cos = Vec::new();
    for seed in 0..6 {
        let model = BaiModel::new(Variant::Full, &[1], seed).unwrap();
        let pred = translate_many(&model, &data.test_voxels[&1], 1).unwrap();
        cos.extend(pred.iter().zip(&data.test).map(|(p, s)| cosine(&p.s, &s.triple.s)));
    }
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    assert!(mean.abs() < 0.2, "mean cosine {mean}");
}

#[test]
fn training_is_bit_reproducible_and_separates_subjects() {
    let data = tiny();
    let cfg = quick_cfg(Variant::Full);
    let a = train_bai(&data, &cfg, |_, _, _| {}).unwrap();
    let b = train_bai(&data, &cfg, |_, _, _| {}).unwrap();
    assert_eq!(a.bundle.models[0].params.digest(), b.bundle.models[0].params.digest());
    assert_eq!(a.histories, b.histories);

    let m = &a.bundle.models[0];
    let reps = braid::bai::RepBatch::from_triples(&[&data.train[&1].samples[0].triple]).unwrap();
    assert_ne!(m.translate_r2v(&reps, 1).unwrap(), m.translate_r2v(&reps, 2).unwrap());
}

#[test]
fn subject_specific_variant_trains_one_model_per_subject() {
    let data = tiny();
    let out = train_bai(&data, &quick_cfg(Variant::SubjectSpecific), |_, _, _| {}).unwrap();
    assert_eq!(out.bundle.models.len(), 2);
    assert_eq!(out.bundle.models[0].subjects(), [1]);
    assert_eq!(out.bundle.models[1].subjects(), [2]);
    assert_eq!(out.bundle.model_for(2).unwrap().subjects(), [2]);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = tiny();
    let cfg = quick_cfg(Variant::Full);
    let out = train_bai(&data, &cfg, |_, _, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.baic");
    out.bundle.save(&p, Some(&cfg)).unwrap();
    let (back, man) = BaiBundle::load(&p).unwrap();
    assert_eq!(man.training.as_ref(), Some(&cfg));
    assert_eq!(back.models[0].params, out.bundle.models[0].params);
    let p2 = dir.path().join("m2.baic");
    back.save(&p2, Some(&cfg)).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn adaptation_trains_only_the_new_subject_modules() {
    let data = tiny();
    let out = train_bai(&data, &quick_cfg(Variant::Full), |_, _, _| {}).unwrap();
    let base = &out.bundle.models[0];
    let new = build_dataset(&DatasetConfig { subjects: vec![3], n_train: 4, n_test: 1, ..Default::default() }).unwrap();
    let (adapted, hist) = adapt_new_subject(base, 3, &new.train[&3], 4, &quick_cfg(Variant::Full), |_, _| {}).unwrap();
    assert_eq!(hist.total.len(), 1);
    assert_eq!(adapted.digest_except_subject(3), base.params.digest());
    let v = Tensor::new(vec![1, D_V], new.train[&3].voxels[0].clone()).unwrap();
    assert_eq!(adapted.encode_fmri(&v, 3).unwrap().shape(), [1, D_LAT]);
    let enc = base.params.id("fmri_enc/dense/weight").unwrap();
    assert_eq!(base.params.get(enc), adapted.params.get(adapted.params.id("fmri_enc/dense/weight").unwrap()));

    assert!(matches!(
        adapt_new_subject(base, 1, &new.train[&3], 4, &quick_cfg(Variant::Full), |_, _| {}),
        Err(Error::SubjectConflict(1))
    ));
}
