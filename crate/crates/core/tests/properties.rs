use proptest::prelude::*;
use ttts_core::acoustic::{length_regulate, quantize_prosody, round_duration, DurationDomain};
use ttts_core::corpus::{segment_mel, MelSpectrogram};
use ttts_core::synth::{adapt_f0_linear, SpeakerF0Stats};
use ttts_core::triplet::{cosine_distance, triplet_loss_from_distances, PairDistances, TripletWeights};
use ttts_core::Matrix;
use ttts_tape::Graph;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

fn nonzero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    vector(len).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn cosine_distance_is_bounded_symmetric_and_zero_on_self(a in nonzero(5), b in nonzero(5)) {
        let d = cosine_distance(&a, &b);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
        prop_assert!((d - cosine_distance(&b, &a)).abs() < 1e-12);
        prop_assert!(cosine_distance(&a, &a).abs() < 1e-12);
    }

    #[test]
    fn quantization_is_monotone_and_in_range(x in -500.0..900.0f64, y in -500.0..900.0f64, bins in 2usize..300) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let range = (60.0, 400.0);
        prop_assert!(quantize_prosody(lo, range, bins) <= quantize_prosody(hi, range, bins));
        prop_assert!(quantize_prosody(hi, range, bins) < bins);
    }

    #[test]
    fn rounded_durations_are_at_least_one(p in -20.0..6.0f64) {
        prop_assert!(round_duration(p, DurationDomain::Log) >= 1);
        prop_assert!(round_duration(p, DurationDomain::Raw) >= 1);
    }

    #[test]
    fn segments_concatenate_to_the_mel(durations in prop::collection::vec(1usize..6, 1..8), n_mels in 1usize..5) {
        let frames: usize = durations.iter().sum();
        let mel = MelSpectrogram::new(Matrix::from_shape_fn((frames, n_mels), |(r, c)| (r * 7 + c) as f64 * 0.25)).unwrap();
        let segments = segment_mel(&mel, &durations).unwrap();
        let views: Vec<_> = segments.iter().map(|s| s.view()).collect();
        prop_assert_eq!(ndarray::concatenate(ndarray::Axis(0), &views).unwrap(), mel.frames);
    }

    #[test]
    fn regulated_spans_are_copies(durations in prop::collection::vec(1usize..6, 1..8)) {
        let states = Matrix::from_shape_fn((durations.len(), 3), |(r, c)| (r * 3 + c) as f64);
        let frames = length_regulate(&states, &durations).unwrap();
        prop_assert_eq!(frames.nrows(), durations.iter().sum::<usize>());
        let mut start = 0;
        for (t, &d) in durations.iter().enumerate() {
            for k in start..start + d {
                prop_assert_eq!(frames.row(k), states.row(t));
            }
            start += d;
        }
    }

    #[test]
    fn f0_adaptation_round_trips(
        mu_a in 60.0..400.0f64, sigma_a in 0.5..80.0f64,
        mu_b in 60.0..400.0f64, sigma_b in 0.5..80.0f64,
        f0 in prop::collection::vec(40.0..600.0f64, 1..10),
    ) {
        let a = SpeakerF0Stats::new("a", mu_a, sigma_a).unwrap();
        let b = SpeakerF0Stats::new("b", mu_b, sigma_b).unwrap();
        let back = adapt_f0_linear(&adapt_f0_linear(&f0, &a, &b).unwrap(), &b, &a).unwrap();
        for (x, y) in f0.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let mean = adapt_f0_linear(&[mu_a], &a, &b).unwrap()[0];
        prop_assert!((mean - mu_b).abs() < 1e-9);
    }

    #[test]
    fn triplet_loss_responds_in_the_right_direction(
        content in prop::collection::vec(0.0..2.0f64, 1..6),
        ap in 0.0..2.0f64, an in 0.0..2.0f64, bump in 0.0..1.0f64, which in 0usize..6,
    ) {
        let w = TripletWeights::default();
        let pair = PairDistances { content: content.clone(), anchor_positive: ap, anchor_negative: an };
        let base = triplet_loss_from_distances(std::slice::from_ref(&pair), w);
        prop_assert!(base >= 0.0);
        let mut more = pair.clone();
        more.content[which % content.len()] += bump;
        prop_assert!(triplet_loss_from_distances(&[more], w) >= base);
        let farther = PairDistances { anchor_negative: an + bump, ..pair };
        prop_assert!(triplet_loss_from_distances(&[farther], w) <= base);
    }

    #[test]
    fn reversal_is_identity_forward(values in prop::collection::vec(-1e3..1e3f64, 1..12)) {
        let g = Graph::new();
        let x = g.variable(Matrix::from_shape_vec((1, values.len()), values.clone()).unwrap());
        let y = g.grad_reverse(x, 1.0);
        let same = g.value(x).iter().zip(g.value(y).iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
