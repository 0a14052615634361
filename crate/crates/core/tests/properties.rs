mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{rng, toy_labels, toy_model_config, uniform};
use eend::attractors_eda::eda_count;
use eend::attractors_ta::{combine, ta_infer_count, CombinerKind};
use eend::config::RunConfig;
use eend::encoder::{Encoder, EncoderConfig};
use eend::features::{
    format_rttm, labels_from_segments, logmel_extract, parse_rttm, subsample, FeatureSequence,
    FrameTiming, LabelMatrix, SegmentList,
};
use eend::model::{AttractorKind, Model};
use eend::numerics::{grad_check_filtered, Graph, Init, ParamStore, Tensor};
use eend::scoring::{der, der_totals, segments_from_labels, InferenceConfig};
use eend::simulator::{make_mixture, overlap_ratio, simulate_activity, MixtureSpec, SimulationConfig};
use eend::training::{exist_loss, mixture_loss, pit_loss, PitSearch};

fn segment_list(prefix: &'static str) -> impl Strategy<Value = SegmentList> {
    prop::collection::vec((0usize..4, 0u32..4000, 1u32..1200), 1..10).prop_map(move |segs| {
        let mut l = SegmentList::new("rec");
        for (s, on, d) in segs {
            l.push(format!("{prefix}{s}"), on as f64 / 1000.0, d as f64 / 1000.0).unwrap();
        }
        l
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subsample_length_is_ceiling(t in 1usize..=10_000, f in 1usize..=20) {
        let seq = FeatureSequence::new(Tensor::zeros(&[2, t]), 0.01, 0.025, 16000).unwrap();
        let out = subsample(&seq, f).unwrap();
        prop_assert_eq!(out.num_frames(), t.div_ceil(f));
    }

    #[test]
    fn der_of_identical_lists_is_zero(x in segment_list("s")) {
        prop_assert_eq!(der(&x, &x, &InferenceConfig::default()).unwrap().der, 0.0);
    }

    #[test]
    fn der_ignores_hypothesis_names(r in segment_list("r"), h in segment_list("h")) {
        let cfg = InferenceConfig::default();
        let mut renamed = h.clone();
        for s in &mut renamed.segments {
            s.speaker = format!("other_{}", s.speaker.chars().rev().collect::<String>());
        }
        let a = der(&r, &h, &cfg).unwrap();
        let b = der(&r, &renamed, &cfg).unwrap();
        prop_assert!((a.der - b.der).abs() < 1e-12);
    }

    #[test]
    fn der_components_add_up(r in segment_list("r"), h in segment_list("h")) {
        let d = der(&r, &h, &InferenceConfig::default()).unwrap();
        prop_assert_eq!(d.miss + d.false_alarm + d.confusion, d.der);
    }

    #[test]
    fn miss_and_false_alarm_swap(r in segment_list("r"), h in segment_list("h")) {
        let cfg = InferenceConfig::default();
        let (a, _) = der_totals(&r, &h, &cfg).unwrap();
        let (b, _) = der_totals(&h, &r, &cfg).unwrap();
        prop_assert!((a.miss_s - b.false_alarm_s).abs() < 1e-9);
        prop_assert!((a.confusion_s - b.confusion_s).abs() < 1e-9);
    }

    #[test]
    fn rttm_round_trip(x in segment_list("spk")) {
        let back = parse_rttm(&format_rttm(&x), std::path::Path::new("x.rttm"), "rec").unwrap();
        prop_assert_eq!(back.segments.len(), x.segments.len());
        for (a, b) in back.segments.iter().zip(&x.segments) {
            prop_assert_eq!(&a.speaker, &b.speaker);
            prop_assert!((a.onset_s - b.onset_s).abs() < 5e-4);
            prop_assert!((a.duration_s - b.duration_s).abs() < 5e-4);
        }
    }

    #[test]
    fn frame_labels_round_trip(seed in 0u64..1000, t in 1usize..60, s in 1usize..4) {
        let mut r = rng(seed);
        let timing = FrameTiming::uniform(0.1, t);
        let speakers: Vec<String> = (0..s).map(|i| format!("spk{i}")).collect();
        let y = LabelMatrix {
            labels: Tensor::from_fn(t, s, |_, _| if r.random_bool(0.4) { 1.0 } else { 0.0 }),
            timing,
            speakers: speakers.clone(),
        };
        let segs = segments_from_labels(&y, "rec", 0.0);
        let back = labels_from_segments(&segs, timing, &speakers).unwrap();
        prop_assert_eq!(back.labels, y.labels);
    }

    #[test]
    fn pit_search_strategies_agree(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let t = r.random_range(1..12);
        let s = r.random_range(1..=4);
        let p = uniform(&mut r, t, s, 0.0, 1.0);
        let y = Tensor::from_fn(t, s, |_, _| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        let a = pit_loss(&p, &y, PitSearch::Exhaustive).unwrap().loss;
        let b = pit_loss(&p, &y, PitSearch::Hungarian).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn existence_loss_is_nonnegative(q in prop::collection::vec(0.0f64..=1.0, 1..6)) {
        prop_assert!(exist_loss(&q).unwrap() >= 0.0);
    }

    #[test]
    fn ta_count_is_a_prefix(q in prop::collection::vec(0.0f64..1.0, 0..8), thr in 0.05f64..0.95) {
        let n = ta_infer_count(&q, thr);
        prop_assert!(q[..n].iter().all(|&v| v > thr));
        prop_assert!(n == q.len() || q[n] <= thr);
    }

    #[test]
    fn eda_count_stops_at_first_low(q in prop::collection::vec(0.0f64..1.0, 1..8), cap in 1usize..10) {
        let n = eda_count(|i| Ok(q.get(i).copied().unwrap_or(0.0)), 0.5, cap).unwrap();
        let expected = q.iter().take_while(|&&v| v > 0.5).count().min(cap);
        prop_assert_eq!(n, expected);
    }

    #[test]
    fn config_round_trip(seed in any::<u64>(), epochs in 1usize..500, lr in 1e-6f64..1.0, warm in 1u64..100_000,
                         thr in 0.01f64..0.99, combiner in 0usize..4, alpha in 0.1f64..4.0) {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.train.seed = seed;
        c.train.epochs = epochs;
        c.train.optimizer.lr = lr;
        c.train.optimizer.schedule = eend::numerics::Schedule::Noam { warmup: warm };
        c.infer.diar_threshold = thr;
        c.model.ta.combiner = [CombinerKind::None, CombinerKind::Add, CombinerKind::Mult, CombinerKind::Amp(alpha)][combiner];
        let once = RunConfig::parse(&c.serialize(), std::path::Path::new("c")).unwrap();
        prop_assert_eq!(&once, &c);
        let twice = RunConfig::parse(&once.serialize(), std::path::Path::new("c")).unwrap();
        prop_assert_eq!(twice, once);
    }
}

#[test]
fn layer_norm_and_softmax_statistics() {
    let store = ParamStore::<f64>::new();
    let mut r = rng(1);
    for _ in 0..20 {
        let x = uniform(&mut r, 7, 5, -3.0, 3.0);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x);
        let gain = g.constant(Tensor::full(&[7, 1], 1.0));
        let bias = g.constant(Tensor::zeros(&[7, 1]));
        let y = g.layer_norm(xv, gain, bias, 1e-12).unwrap();
        let y = g.value(y);
        for c in 0..5 {
            let col = y.col_vec(c);
            let mean = col.iter().sum::<f64>() / 7.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
        let s = g.softmax_rows(xv);
        let s = g.value(s);
        for i in 0..7 {
            let row: Vec<f64> = (0..5).map(|j| s.get(i, j)).collect();
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn logmel_shifts_by_one_frame_per_hop() {
    let sr = 16000;
    let hop = 160;
    let mut r = rng(2);
    let audio: Vec<f64> = (0..sr / 2).map(|i| (i as f64 * 0.05).sin() + r.random_range(-0.3..0.3)).collect();
    let a = logmel_extract(&audio[hop..], sr as u32, 23).unwrap();
    let b = logmel_extract(&audio, sr as u32, 23).unwrap();
    for t in 1..a.num_frames() - 1 {
        for d in 0..23 {
            assert!((a.features.get(d, t) - b.features.get(d, t + 1)).abs() <= 1e-6);
        }
    }
}

#[test]
fn simulation_is_deterministic_and_covers_every_speaker() {
    let cfg = SimulationConfig::default();
    for seed in 0..20 {
        let a = make_mixture(&cfg, "m".into(), seed).unwrap();
        let b = make_mixture(&cfg, "m".into(), seed).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels.labels, b.labels.labels);
        for s in 0..a.labels.num_speakers() {
            assert!(a.labels.active_frames(s) > 0, "seed {seed} speaker {s} silent");
        }
    }
}

#[test]
fn overlap_shrinks_with_longer_pauses() {
    for n in [2, 3, 4] {
        let mean = |beta: f64| {
            (0..200)
                .map(|seed| {
                    let spec = MixtureSpec { num_speakers: n, beta, duration_s: 30.0, seed };
                    overlap_ratio(&simulate_activity(&spec).unwrap())
                })
                .sum::<f64>()
                / 200.0
        };
        let (o2, o5, o9) = (mean(2.0), mean(5.0), mean(9.0));
        assert!(o2 >= o5 && o5 >= o9, "{n} speakers: {o2} {o5} {o9}");
    }
}

#[test]
fn encoder_without_convolution_is_frame_equivariant() {
    for csv in [false, true] {
        let cfg = EncoderConfig {
            conv_kernel: 1,
            use_csv_token: csv,
            ..toy_model_config(AttractorKind::Ta).encoder
        };
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut Init::new(&mut store, &mut rng(3)), &cfg).unwrap();
        let mut r = rng(4);
        let x = uniform(&mut r, 5, 8, -1.0, 1.0);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut r);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let out = enc.forward(&mut g, xv).unwrap();
            assert_eq!(g.dims(out.e), (8, 8));
            (g.value(out.e).clone(), out.csv.map(|c| g.value(c).clone()))
        };
        let (e0, c0) = run(&x);
        let (e1, c1) = run(&Tensor::from_fn(5, 8, |i, j| x.get(i, perm[j])));
        for i in 0..8 {
            for j in 0..8 {
                assert!((e1.get(i, j) - e0.get(i, perm[j])).abs() <= 1e-8);
            }
        }
        if let (Some(c0), Some(c1)) = (c0, c1) {
            for i in 0..8 {
                assert!((c0.get(i, 0) - c1.get(i, 0)).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn none_combiner_ignores_the_summary() {
    let store = ParamStore::<f64>::new();
    let mut r = rng(5);
    let gt = uniform(&mut r, 6, 3, -1.0, 1.0);
    let mut g = Graph::inference(&store);
    let gv = g.constant(gt.clone());
    let u1 = g.constant(uniform(&mut r, 6, 1, -1.0, 1.0));
    let u2 = g.constant(uniform(&mut r, 6, 1, -1.0, 1.0));
    let a = combine(&mut g, Some(u1), gv, CombinerKind::None).unwrap();
    let b = combine(&mut g, Some(u2), gv, CombinerKind::None).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert_eq!(g.value(a), &gt);
}

#[test]
fn ta_gradients_for_every_combiner() {
    for combiner in [CombinerKind::None, CombinerKind::Add, CombinerKind::Mult, CombinerKind::Amp(1.5)] {
        let mut cfg = toy_model_config(AttractorKind::Ta);
        cfg.ta.combiner = combiner;
        let (mut store, model) = Model::build::<f64>(&cfg, 9).unwrap();
        let mut r = rng(10);
        let x = uniform(&mut r, 5, 6, -1.0, 1.0);
        let y = toy_labels(&mut r, 6, 2);
        let rep = grad_check_filtered(
            &mut store,
            |g| Ok(mixture_loss(&model, g, &x, &y, 0.5, PitSearch::Exhaustive, 1)?.0.total),
            common::FD_EPS,
            |n| n.starts_with("ta."),
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{}: {rep:?}", combiner.name());
    }
}

#[test]
fn eda_training_decode_shapes_do_not_depend_on_shuffle_seed() {
    let cfg = toy_model_config(AttractorKind::Eda);
    let (store, model) = Model::build::<f64>(&cfg, 2).unwrap();
    let x = uniform(&mut rng(3), 5, 7, -1.0, 1.0);
    for s in 1..=3 {
        for seed in 0..4 {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let enc = model.encode(&mut g, xv).unwrap();
            let a = model.attractors(&mut g, enc, s + 1, Some(seed)).unwrap();
            assert_eq!(g.dims(a.attractors), (8, s + 1));
            assert_eq!(g.dims(a.logits), (1, s + 1));
        }
    }
}
