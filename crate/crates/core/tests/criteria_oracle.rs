mod common;

use std::sync::OnceLock;

use common::*;
use layersense_core::autograd::{Graph, Op};
use layersense_core::criteria::*;
use layersense_core::modelzoo::{Activation, Family, LayerHandle, Split, TrainedModel};
use layersense_core::reduce::{rank_layers, reduce_layers, ReduceMethod};
use layersense_core::rng::{rng_from, tag};
use layersense_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// One dense layer `x -> w x` (optionally followed by GELU) as a rankable model.
fn single_layer(w: &[f32], cols: usize, gelu: bool) -> TrainedModel {
    let mut g = Graph::new(cols);
    let p = g.add_param("fc.weight", Tensor::matrix(w.len() / cols, cols, w.to_vec()).unwrap());
    let m = g.push(Op::MatMul { x: g.input(), w: p }).unwrap();
    if gelu {
        g.push(Op::Gelu { x: m }).unwrap();
    }
    let h = LayerHandle { name: "fc".into(), weight: p, params: vec![p], matmul: m, site: m, block: None };
    TrainedModel::from_graph(spec(Family::Vanilla, &[1], 0), g, vec![h])
}

fn split(cols: usize, xs: &[f32]) -> Split {
    Split { inputs: Tensor::matrix(xs.len() / cols, cols, xs.to_vec()).unwrap(), labels: vec![0; xs.len() / cols] }
}

fn logit_config() -> CriterionConfig {
    CriterionConfig { target: GradTarget::ArgmaxLogit, ..CriterionConfig::default() }
}

fn one(maps: Vec<Tensor>) -> Vec<f32> {
    maps.into_iter().next().unwrap().into_data()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

struct Fixture {
    model: TrainedModel,
    calib: Split,
}

fn net(act: Activation) -> &'static Fixture {
    static RELU: OnceLock<Fixture> = OnceLock::new();
    static GELU: OnceLock<Fixture> = OnceLock::new();
    let cell = if act == Activation::Relu { &RELU } else { &GELU };
    cell.get_or_init(|| {
        let data = moons(256, 64, 11);
        let model = trained(&spec(Family::Vanilla, &[8, 8], 12).with_activation(act), &data, 2);
        Fixture { model, calib: data.test.head(6) }
    })
}

fn row(s: &Split, i: usize) -> Split {
    Split { inputs: Tensor::matrix(1, s.inputs.cols(), s.inputs.row(i).to_vec()).unwrap(), labels: vec![s.labels[i]] }
}

/// Per-sample gradients of every layer, one batch-of-one backward each.
fn sample_grads(model: &TrainedModel, calib: &Split) -> Vec<Vec<Tensor>> {
    (0..calib.len()).map(|s| crit_grad(model, &row(calib, s), &CriterionConfig::default()).unwrap()).collect()
}

fn with_weight(model: &TrainedModel, l: usize, w: Tensor) -> TrainedModel {
    let mut m = model.clone();
    *m.graph.param_mut(m.layers[l].weight) = w;
    m
}

/// Mean cross-entropy in f64 with layer `l`'s weight replaced.
fn loss64(model: &TrainedModel, calib: &Split, l: usize, w: Option<&[f64]>) -> f64 {
    let mut p = params64(&model.graph);
    if let Some(w) = w {
        p[model.layers[l].weight.0].data = w.to_vec();
    }
    cross_entropy64(&logits64(&model.graph, &p, &input64(&calib.inputs)), &calib.labels)
}

/// Per-sample cross-entropy from the f32 forward pass, summed in f64.
fn losses32(model: &TrainedModel, calib: &Split) -> Vec<f64> {
    let out = model.logits(&calib.inputs).unwrap();
    (0..out.rows())
        .map(|r| {
            let row = out.row(r);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            lse - row[calib.labels[r]] as f64
        })
        .collect()
}

#[test]
fn linear_model_closed_forms() {
    let m = single_layer(&[2.0], 1, false);
    let calib = split(1, &[2.0, 4.0]);
    let c = logit_config();
    assert_eq!(one(crit_grad(&m, &calib, &c).unwrap()), [3.0]);
    assert_eq!(one(crit_weight_times_grad(&m, &calib, &c).unwrap()), [6.0]);
    let campp = (4.0 / 24.0 + 16.0 / 160.0) / 2.0;
    assert!(close(one(crit_gradcampp(&m, &calib, &c).unwrap())[0] as f64, campp, 1e-6));
    let ig = one(crit_ig(&m, &calib, &c).unwrap());
    assert!(close(ig[0] as f64, 3.0, 1e-6));
    // w * map recovers the mean of f(w) - f(0) = (4 + 8) / 2
    assert!(close(2.0 * ig[0] as f64, 6.0, 1e-6));
    assert!(close(one(crit_smoothgrad(&m, &calib, &c).unwrap())[0] as f64, 3.0, 1e-6));
    assert_eq!(one(crit_vargrad(&m, &split(1, &[2.0]), &c).unwrap()), [0.0]);
    // the variance is joint over samples and draws
    assert!(close(one(crit_vargrad(&m, &calib, &c).unwrap())[0] as f64, 1.0, 1e-6));
    assert!(close(one(crit_idgi(&m, &calib, &c).unwrap())[0] as f64, 6.0, 1e-5));
    assert!(close(one(crit_gig(&m, &calib, &c).unwrap())[0] as f64, 3.0, 1e-6));
}

#[test]
fn degenerate_inputs() {
    let zero = single_layer(&[0.0, 0.0], 2, false);
    let calib = split(2, &[1.0, -3.0, 0.5, 2.0]);
    let c = logit_config();
    assert_eq!(one(crit_weights(&zero)), [0.0, 0.0]);
    assert_eq!(one(crit_weight_times_grad(&zero, &calib, &c).unwrap()), [0.0, 0.0]);
    let eye = single_layer(&[1.0, 0.0, 0.0, 1.0], 2, false);
    assert_eq!(one(crit_weights(&eye)).iter().filter(|&&v| v == 1.0).count(), 2);
    // zero gradient: 0 / eps
    let m = single_layer(&[1.5], 1, false);
    assert_eq!(one(crit_gradcampp(&m, &split(1, &[0.0]), &c).unwrap()), [0.0]);
    // w = 0, g = 1
    let m = single_layer(&[0.0], 1, false);
    let v = one(crit_gradcampp(&m, &split(1, &[1.0]), &c).unwrap())[0] as f64;
    assert!(close(v, 1.0 / (2.0 + GRADCAM_EPS), 1e-7));
    // one class: the loss is identically zero
    let m = single_layer(&[1.5, -0.5], 2, false);
    let loss = CriterionConfig::default();
    assert!(one(crit_idgi(&m, &calib, &loss).unwrap()).iter().all(|&v| v == 0.0));
    assert!(crit_grad(&m, &split(2, &[]), &loss).is_err());
    assert!(crit_vargrad(&m, &calib, &CriterionConfig { n_noise: 1, ..loss }).is_err());
    assert!(crit_gig(&m, &calib, &CriterionConfig { gig_shrink: 0.0, ..loss }).is_err());
    assert!(crit_gig(&m, &calib, &CriterionConfig { gig_shrink: 1.5, ..loss }).is_err());
    assert!(crit_hsic(&m, &calib, &CriterionConfig { hsic_masks: MIN_MASKS - 1, ..loss }).is_err());
}

#[test]
fn gig_with_one_coordinate_follows_the_ig_grid() {
    let m = single_layer(&[1.7], 1, true);
    let calib = split(1, &[0.8, -1.3, 2.1]);
    for steps in [1, 4, 8] {
        let c = CriterionConfig { ig_steps: steps, gig_steps: steps, ..logit_config() };
        let ig = one(crit_ig(&m, &calib, &c).unwrap())[0] as f64;
        let gig = one(crit_gig(&m, &calib, &c).unwrap())[0] as f64;
        assert!(close(gig, ig, 1e-6), "steps {steps}: {gig} vs {ig}");
    }
}

#[test]
fn ig_with_one_step_is_the_gradient_at_half_weight() {
    let fx = net(Activation::Gelu);
    let c = CriterionConfig { ig_steps: 1, ..CriterionConfig::default() };
    let ig = crit_ig(&fx.model, &fx.calib, &c).unwrap();
    for l in 0..fx.model.num_layers() {
        let w = fx.model.graph.param(fx.model.layers[l].weight).map(|v| v * 0.5);
        let half = crit_grad(&with_weight(&fx.model, l, w), &fx.calib, &c).unwrap();
        for (a, b) in ig[l].data().iter().zip(half[l].data()) {
            assert!(close(*a as f64, *b as f64, 1e-6));
        }
    }
}

#[test]
fn gig_moves_the_flat_coordinate_first() {
    let m = single_layer(&[1.0, 1.0], 2, false);
    let calib = split(2, &[10.0, 0.1]);
    let trace = gig_trace(&m, &calib, &logit_config()).unwrap().remove(0).1;
    assert_eq!(trace.reached, [16, 8]);
    assert_eq!(trace.iterations, 16);
}

#[test]
fn gig_terminates_within_the_schedule_bound() {
    let fx = net(Activation::Relu);
    for shrink in [0.1f32, 0.3, 1.0] {
        let c = CriterionConfig { gig_shrink: shrink, gig_steps: 4, ..CriterionConfig::default() };
        for (l, (_, t)) in gig_trace(&fx.model, &fx.calib, &c).unwrap().into_iter().enumerate() {
            assert_eq!(t.unconverged, 0);
            assert!(t.iterations <= (1.0 / shrink).ceil() as usize * 4, "layer {l}: {} iterations", t.iterations);
            assert!(t.reached.iter().all(|&r| r >= 4 && r <= t.iterations));
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let fx = net(Activation::Gelu);
    let grads = crit_grad(&fx.model, &fx.calib, &CriterionConfig::default()).unwrap();
    let h = 1e-4;
    for (l, g) in grads.iter().enumerate() {
        let base = params64(&fx.model.graph)[fx.model.layers[l].weight.0].data.clone();
        let scale = g.max_abs() as f64;
        for i in 0..g.numel() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (loss64(&fx.model, &fx.calib, l, Some(&plus)) - loss64(&fx.model, &fx.calib, l, Some(&minus))) / (2.0 * h);
            let err = (g.data()[i] as f64 - fd).abs() / fd.abs().max(0.01 * scale).max(1e-5);
            assert!(err < 1e-4, "layer {l} coord {i}: {} vs {fd}", g.data()[i]);
        }
    }
}

#[test]
fn products_average_per_sample() {
    let fx = net(Activation::Relu);
    let per = sample_grads(&fx.model, &fx.calib);
    let c = CriterionConfig::default();
    let wxg = crit_weight_times_grad(&fx.model, &fx.calib, &c).unwrap();
    let campp = crit_gradcampp(&fx.model, &fx.calib, &c).unwrap();
    let n = per.len() as f64;
    for l in 0..fx.model.num_layers() {
        let w = fx.model.graph.param(fx.model.layers[l].weight).data();
        for i in 0..w.len() {
            let wi = w[i] as f64;
            let prod: f64 = per.iter().map(|g| wi * g[l].data()[i] as f64).sum::<f64>() / n;
            let cam: f64 = per
                .iter()
                .map(|g| {
                    let gi = g[l].data()[i] as f64;
                    gi * gi / (2.0 * gi * gi + wi * gi * gi * gi + GRADCAM_EPS)
                })
                .sum::<f64>()
                / n;
            assert!(close(wxg[l].data()[i] as f64, prod, 1e-6));
            assert!(close(campp[l].data()[i] as f64, cam, 1e-6), "layer {l}: {} vs {cam}", campp[l].data()[i]);
        }
    }
}

#[test]
fn ig_is_complete_per_layer() {
    let fx = net(Activation::Gelu);
    let c = CriterionConfig { ig_steps: 64, ..CriterionConfig::default() };
    let maps = crit_ig(&fx.model, &fx.calib, &c).unwrap();
    let full = loss64(&fx.model, &fx.calib, 0, None);
    for (l, map) in maps.iter().enumerate() {
        let w = fx.model.graph.param(fx.model.layers[l].weight);
        let attributed: f64 = w.data().iter().zip(map.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let zero = vec![0.0; w.numel()];
        let delta = full - loss64(&fx.model, &fx.calib, l, Some(&zero));
        assert!((attributed - delta).abs() < 0.02 * delta.abs() + 1e-6, "layer {l}: {attributed} vs {delta}");
    }
}

#[test]
fn idgi_telescopes_and_matches_reference_loop() {
    let fx = net(Activation::Relu);
    let steps = 32;
    let c = CriterionConfig { idgi_steps: steps, ..CriterionConfig::default() };
    let layers = idgi_layers(&fx.model, &fx.calib, &c).unwrap();
    for (l, (map, pairs)) in layers.iter().enumerate() {
        let w = fx.model.graph.param(fx.model.layers[l].weight).clone();
        let zero = vec![0.0; w.numel()];
        for (s, &(total, delta)) in pairs.iter().enumerate() {
            assert!((total - delta).abs() < 1e-5, "layer {l} sample {s}: {total} vs {delta}");
            let one = row(&fx.calib, s);
            let want = loss64(&fx.model, &one, l, None) - loss64(&fx.model, &one, l, Some(&zero));
            assert!((delta - want).abs() < 1e-4, "layer {l} sample {s}: {delta} vs {want}");
        }
        let point = |k: usize| with_weight(&fx.model, l, w.map(|v| v * k as f32 / steps as f32));
        let mut acc = vec![0.0f64; w.numel()];
        for k in 0..steps {
            let (here, next) = (point(k), point(k + 1));
            let (f0, f1) = (losses32(&here, &fx.calib), losses32(&next, &fx.calib));
            for (s, g) in sample_grads(&here, &fx.calib).iter().enumerate() {
                let g = g[l].data();
                let norm: f64 = g.iter().map(|&v| v as f64 * v as f64).sum();
                if norm == 0.0 {
                    continue;
                }
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi as f64 * gi as f64 / norm * (f1[s] - f0[s]);
                }
            }
        }
        let n = fx.calib.len() as f64;
        for (got, want) in map.data().iter().zip(&acc) {
            assert!(close(*got as f64, want / n, 1e-6), "layer {l}: {got} vs {}", want / n);
        }
    }
}

#[test]
fn noise_moments_match_replayed_draws() {
    let fx = net(Activation::Gelu);
    let c = CriterionConfig { n_noise: 3, seed: 5, ..CriterionConfig::default() };
    let (mean, var) = noise_moments(&fx.model, &fx.calib, &c).unwrap();
    let smooth = crit_smoothgrad(&fx.model, &fx.calib, &c).unwrap();
    let vg = crit_vargrad(&fx.model, &fx.calib, &c).unwrap();
    assert_eq!(smooth, mean);
    assert_eq!(vg, var);
    let layers = fx.model.num_layers();
    let mut m1: Vec<Vec<f64>> = fx.model.layer_sizes().iter().map(|&n| vec![0.0; n]).collect();
    let mut m2 = m1.clone();
    for draw in 0..c.n_noise {
        let mut noisy = fx.model.clone();
        for l in 0..layers {
            let w = noisy.graph.param_mut(noisy.layers[l].weight);
            let (lo, hi) = w.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let sigma = c.sigma_rel * (hi - lo);
            let mut rng = rng_from(c.seed, &[tag("weight-noise"), l as u64, draw as u64]);
            for v in w.data_mut() {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        for g in sample_grads(&noisy, &fx.calib) {
            for l in 0..layers {
                for (i, &gi) in g[l].data().iter().enumerate() {
                    m1[l][i] += gi as f64;
                    m2[l][i] += gi as f64 * gi as f64;
                }
            }
        }
    }
    let n = (c.n_noise * fx.calib.len()) as f64;
    for l in 0..layers {
        for i in 0..m1[l].len() {
            let (a, b) = (m1[l][i] / n, m2[l][i] / n);
            assert!(close(smooth[l].data()[i] as f64, a, 1e-6));
            assert!((vg[l].data()[i] as f64 - (b - a * a)).abs() < 1e-6, "layer {l}: {} vs {}", vg[l].data()[i], b - a * a);
        }
    }
}

#[test]
fn noise_criteria_agree_with_an_oversampled_run() {
    let fx = net(Activation::Gelu);
    // ten independent 16-draw runs: their mean is a 160-draw estimate and
    // their spread gives the sampling error of a single run
    let c = CriterionConfig { n_noise: 16, seed: 1, ..CriterionConfig::default() };
    let (m, v) = noise_moments(&fx.model, &fx.calib, &c).unwrap();
    let runs: Vec<_> = (100..110).map(|seed| noise_moments(&fx.model, &fx.calib, &CriterionConfig { seed, ..c }).unwrap()).collect();
    let within = |got: f32, pick: &dyn Fn(usize) -> f32| {
        let xs: Vec<f64> = (0..runs.len()).map(|r| pick(r) as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        (got as f64 - mean).abs() <= 5.0 * sd * 1.1f64.sqrt() + 1e-6
    };
    for l in 0..fx.model.num_layers() {
        for i in 0..m[l].numel() {
            assert!(within(m[l].data()[i], &|r| runs[r].0[l].data()[i]), "smoothgrad layer {l} coord {i}");
            assert!(within(v[l].data()[i], &|r| runs[r].1[l].data()[i]), "vargrad layer {l} coord {i}");
        }
    }
    // shrinking noise approaches the plain gradient
    let tiny = CriterionConfig { sigma_rel: 1e-6, ..c };
    let grad = crit_grad(&fx.model, &fx.calib, &c).unwrap();
    for (s, g) in crit_smoothgrad(&fx.model, &fx.calib, &tiny).unwrap().iter().zip(&grad) {
        for (a, b) in s.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
    let lin = single_layer(&[0.7, -1.2], 2, false);
    let calib = split(2, &[1.0, 2.0, -1.0, 0.5]);
    let lc = CriterionConfig { sigma_rel: 3.0, ..logit_config() };
    assert_eq!(crit_smoothgrad(&lin, &calib, &lc).unwrap(), crit_grad(&lin, &calib, &lc).unwrap());
}

#[test]
fn hsic_detects_the_driving_group() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let masks: Vec<Vec<bool>> = (0..512).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
    let responses: Vec<f64> = masks.iter().map(|m| if m[1] { 1.0 } else { 0.0 } + 0.05 * rng.gen::<f64>()).collect();
    let scores = hsic_group_scores(&masks, &responses);
    for g in [0, 2, 3] {
        assert!(scores[1] > scores[g]);
    }
}

#[test]
fn hsic_of_independent_samples_is_small() {
    let n = 1024;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let masks: Vec<Vec<bool>> = (0..n).map(|_| vec![rng.gen()]).collect();
    let responses: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let est = hsic_group_scores(&masks, &responses)[0];
    assert!(est.abs() < 3.0 / n as f64, "{est}");
    assert_eq!(hsic_group_scores(&masks, &vec![0.5; n]), [0.0]);
}

#[test]
fn hsic_ignores_a_zero_neuron() {
    let fx = net(Activation::Relu);
    let mut w = fx.model.graph.param(fx.model.layers[0].weight).clone();
    w.row_mut(2).fill(0.0);
    let model = with_weight(&fx.model, 0, w);
    let c = CriterionConfig { hsic_masks: 4096, ..CriterionConfig::default() };
    let scores = crit_hsic(&model, &fx.calib, &c).unwrap().remove(0);
    let max = scores.max_abs() as f64;
    assert!(max > 0.0);
    assert!((scores.data()[2] as f64) / max < 1e-3, "{:?}", scores.data());
}

fn all_maps() -> &'static Vec<Vec<Tensor>> {
    static MAPS: OnceLock<Vec<Vec<Tensor>>> = OnceLock::new();
    MAPS.get_or_init(|| {
        let fx = net(Activation::Gelu);
        let c = CriterionConfig { hsic_masks: 32, ig_steps: 8, idgi_steps: 8, n_noise: 4, ..CriterionConfig::default() };
        Criterion::ALL.iter().map(|&k| compute(k, "m", &fx.model, &fx.calib, &c).unwrap().layers).collect()
    })
}

#[test]
fn maps_are_shaped_finite_and_deterministic() {
    let fx = net(Activation::Gelu);
    let c = CriterionConfig { hsic_masks: 32, ig_steps: 8, idgi_steps: 8, n_noise: 4, ..CriterionConfig::default() };
    for (k, maps) in Criterion::ALL.iter().zip(all_maps()) {
        assert_eq!(maps.len(), fx.model.num_layers());
        for (l, t) in maps.iter().enumerate() {
            let w = fx.model.graph.param(fx.model.layers[l].weight);
            let want: &[usize] = if *k == Criterion::Hsic { &[w.rows()] } else { w.shape() };
            assert_eq!(t.shape(), want, "{k} layer {l}");
            assert!(t.is_finite());
        }
        let again = compute(*k, "m", &fx.model, &fx.calib, &c).unwrap().layers;
        assert_eq!(&again, maps, "{k} is not deterministic");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rankings_ignore_positive_scaling(k in -20i32..20) {
        let s = 2f32.powi(k);
        for maps in all_maps() {
            let scaled: Vec<Tensor> = maps.iter().map(|t| t.map(|v| v * s)).collect();
            for m in ReduceMethod::STANDARD {
                let a = rank_layers(&reduce_layers(maps, m).unwrap());
                let b = rank_layers(&reduce_layers(&scaled, m).unwrap());
                prop_assert_eq!(a, b);
            }
        }
    }
}
