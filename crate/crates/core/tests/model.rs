mod common;

use common::{tiny_config, with};
use crossx_core::blocks::Mode;
use crossx_core::config::Variant;
use crossx_core::model::{CrossXModel, Binder, STAGE_G, STAGE_L, STAGE_LM1};
use crossx_core::train::build_objective;
use crossx_core::{CrossXConfig, Error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, 3, size, size], (0..n * 3 * size * size).map(|_| rng.gen::<f64>()).collect())
}

#[test]
fn backbone_shapes_at_default_width() {
    let cfg = CrossXConfig::default();
    let mut model = CrossXModel::new(&cfg).unwrap();
    let mut g = Graph::new();
    let mut binder = Binder::default();
    let x = g.constant(random_images(2, 64, 0));
    let (mid, top) = model.backbone_forward(&mut g, &mut binder, x, Mode::Train).unwrap();
    assert_eq!(g.shape(mid), &[2, 64, 8, 8]);
    assert_eq!(g.shape(top), &[2, 128, 4, 4]);

    let x = g.constant(random_images(2, 128, 0));
    let (mid, top) = model.backbone_forward(&mut g, &mut binder, x, Mode::Train).unwrap();
    assert_eq!(g.shape(mid), &[2, 64, 16, 16]);
    assert_eq!(g.shape(top), &[2, 128, 8, 8]);
}

#[test]
fn zero_input_gives_finite_outputs() {
    let cfg = tiny_config();
    let mut model = CrossXModel::new(&cfg).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &Tensor::zeros(&[2, 3, 16, 16]), mode).unwrap();
        for l in out.logits.iter().flatten() {
            assert!(g.value(*l).is_finite());
        }
    }
}

#[test]
fn indivisible_resolution_is_a_dimension_error() {
    let cfg = tiny_config();
    let mut model = CrossXModel::new(&cfg).unwrap();
    let mut g = Graph::new();
    let err = model.forward(&mut g, &Tensor::zeros(&[2, 3, 18, 18]), Mode::Eval).err().unwrap();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
    let mut bad = tiny_config();
    bad.data.image_size = 18;
    assert!(bad.validate().is_err());
}

#[test]
fn heads_take_all_excitations() {
    let cfg = with(CrossXConfig::default(), &[("classes", "10")]);
    let model = CrossXModel::new(&cfg).unwrap();
    assert_eq!(model.head_l.weight.shape(), &[2 * 128, 10]);
    assert_eq!(model.head_lm1.as_ref().unwrap().weight.shape(), &[2 * 64, 10]);
    assert_eq!(model.head_g.as_ref().unwrap().weight.shape(), &[2 * 64, 10]);

    let mut tiny = CrossXModel::new(&tiny_config()).unwrap();
    let mut g = Graph::new();
    let out = tiny.forward(&mut g, &random_images(3, 16, 1), Mode::Train).unwrap();
    for s in [STAGE_L, STAGE_LM1, STAGE_G] {
        assert_eq!(g.shape(out.logits[s].unwrap()), &[3, 3]);
        assert_eq!(out.features[s].as_ref().unwrap().len(), 2);
    }
}

#[test]
fn features_are_unit_norm() {
    let mut model = CrossXModel::new(&tiny_config()).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &random_images(3, 16, 2), Mode::Train).unwrap();
    for f in out.features.iter().flatten().flatten() {
        let v = g.value(*f);
        let c = v.shape()[1];
        for row in v.data().chunks(c) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
        }
    }
}

#[test]
fn se_variant_is_a_single_head_single_excitation_network() {
    let mut cfg = tiny_config();
    Variant::SeOnly.apply(&mut cfg);
    let mut model = CrossXModel::new(&cfg).unwrap();
    assert_eq!(model.excitations, 1);
    assert!(model.head_lm1.is_none() && model.head_g.is_none() && model.fpn.is_none() && model.osme_lm1.is_none());
    let mut g = Graph::new();
    let out = model.forward(&mut g, &random_images(2, 16, 3), Mode::Train).unwrap();
    assert!(out.logits[STAGE_L].is_some());
    assert!(out.logits[STAGE_LM1].is_none() && out.logits[STAGE_G].is_none());
    assert_eq!(model.head_l.weight.shape(), &[8, 3]);
}

#[test]
fn duplicated_samples_get_identical_logits() {
    let mut model = CrossXModel::new(&tiny_config()).unwrap();
    let one = random_images(1, 16, 4);
    let other = random_images(1, 16, 5);
    let batch = Tensor::concat_rows(&[&one, &other, &one]).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, mode).unwrap();
        for l in out.logits.iter().flatten() {
            let v = g.value(*l);
            assert_eq!(v.data()[0..3], v.data()[6..9]);
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut model = CrossXModel::new(&tiny_config()).unwrap();
    let x = random_images(4, 16, 6);
    let run = |m: &mut CrossXModel| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x, Mode::Eval).unwrap();
        g.value(out.logits[STAGE_L].unwrap()).clone()
    };
    assert_eq!(run(&mut model), run(&mut model));
}

#[test]
fn initialization_depends_only_on_seed_and_name() {
    let a = CrossXModel::new(&tiny_config()).unwrap();
    let b = CrossXModel::new(&tiny_config()).unwrap();
    assert_eq!(a.head_l, b.head_l);
    let mut cfg = tiny_config();
    Variant::Osme.apply(&mut cfg);
    let c = CrossXModel::new(&cfg).unwrap();
    assert_eq!(a.osme_l, c.osme_l);
    assert_eq!(a.stages, c.stages);
    let d = CrossXModel::new(&with(tiny_config(), &[("seed", "9")])).unwrap();
    assert_ne!(a.head_l, d.head_l);
}

#[test]
fn every_enabled_parameter_receives_gradient() {
    let cfg = tiny_config();
    let mut model = CrossXModel::new(&cfg).unwrap();
    let mut g = Graph::new();
    let obj = build_objective(&mut g, &mut model, &cfg, &random_images(4, 16, 7), &[0, 1, 2, 1], Mode::Train).unwrap();
    g.backward(obj.total).unwrap();
    let names: Vec<String> = model.param_shapes().into_iter().map(|(n, _)| n).collect();
    let bound = obj.forward.binder.lookup();
    for name in &names {
        let v = bound.get(name.as_str()).unwrap_or_else(|| panic!("{name} not bound"));
        let grad = g.grad(*v);
        assert!(grad.data().iter().any(|x| *x != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn cross_layer_term_needs_a_second_distribution() {
    let mut cfg = tiny_config();
    cfg.use_lm1_head = false;
    cfg.use_fpn = false;
    cfg.use_cl = true;
    assert!(cfg.validate().is_err());
    assert!(CrossXModel::new(&cfg).is_err());
}

#[test]
fn parameter_names_are_unique() {
    let model = CrossXModel::new(&CrossXConfig::default()).unwrap();
    let mut names: Vec<String> = model.param_shapes().into_iter().map(|(n, _)| n).collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
    assert!(names.iter().any(|n| n == "fpn.k2"));
    assert!(names.iter().any(|n| n == "osme.Lm1.p1.w2"));
}
