use proptest::prelude::*;
use rand::SeedableRng;

use turnkit::ctc::{collapse_path, ctc_loss, greedy_decode, min_frames, GreedyState};
use turnkit::data::rng::Rng;
use turnkit::data::{load_samples, synth_corpus, write_corpus, SynthConfig, TurnState};
use turnkit::evalkit::{confusion, edit_distance, edit_error_rate, multiclass_accuracy};
use turnkit::langmodel::{CTC_CLOSE, CTC_OPEN};
use turnkit::nnkit::Tensor;
use turnkit::pipeline::apply_prompt_dropout;

fn state() -> impl Strategy<Value = TurnState> {
    (0usize..4).prop_map(|i| TurnState::ALL[i])
}

fn paired_states() -> impl Strategy<Value = Vec<(TurnState, TurnState)>> {
    prop::collection::vec((state(), state()), 1..60)
}

/// Row-normalised log-probabilities from raw logits.
fn log_softmax_rows(rows: usize, cols: usize, logits: &[f64]) -> Tensor {
    let mut out = Vec::with_capacity(rows * cols);
    for r in logits.chunks(cols) {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(r.iter().map(|x| x - z));
    }
    Tensor::matrix(rows, cols, out)
}

fn log_probs() -> impl Strategy<Value = Tensor> {
    (1usize..12, 2usize..6).prop_flat_map(|(t, c)| {
        prop::collection::vec(-4.0f64..4.0, t * c).prop_map(move |v| log_softmax_rows(t, c, &v))
    })
}

proptest! {
    #[test]
    fn confusion_cells_partition_every_sample(pairs in paired_states(), positive in state()) {
        let (pred, gold): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let c = confusion(&pred, &gold, positive).unwrap();
        prop_assert_eq!(c.total(), pred.len() as u64);
        prop_assert_eq!(c.tp + c.fn_, gold.iter().filter(|&&s| s == positive).count() as u64);
        prop_assert_eq!(c.tp + c.fp, pred.iter().filter(|&&s| s == positive).count() as u64);
    }

    #[test]
    fn metrics_ignore_sample_order(pairs in paired_states(), seed in any::<u64>()) {
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut Rng::seed_from_u64(seed));
        let (p1, g1): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let (p2, g2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(multiclass_accuracy(&p1, &g1).unwrap(), multiclass_accuracy(&p2, &g2).unwrap());
        for s in TurnState::ALL {
            prop_assert_eq!(confusion(&p1, &g1, s).unwrap(), confusion(&p2, &g2, s).unwrap());
        }
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..12),
        b in prop::collection::vec(0u8..4, 0..12),
        c in prop::collection::vec(0u8..4, 0..12),
    ) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        let d = edit_distance(&a, &b);
        prop_assert!(d >= a.len().abs_diff(b.len()) && d <= a.len().max(b.len()));
        prop_assert_eq!(d == 0, a == b);
    }

    #[test]
    fn edit_error_rate_scales_by_reference_length(
        hyp in prop::collection::vec(0u8..4, 0..10),
        reference in prop::collection::vec(0u8..4, 1..10),
    ) {
        let r = edit_error_rate(&hyp, &reference).unwrap();
        prop_assert_eq!(r, edit_distance(&hyp, &reference) as f64 / reference.len() as f64);
    }

    #[test]
    fn streamed_greedy_matches_offline(lp in log_probs()) {
        let mut st = GreedyState::new();
        let mut streamed = Vec::new();
        for r in 0..lp.rows() {
            streamed.extend(st.step(lp.row(r), lp.cols()).unwrap());
        }
        prop_assert_eq!(&streamed, &greedy_decode(&lp));
        let argmax: Vec<usize> = (0..lp.rows())
            .map(|r| {
                let row = lp.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect();
        prop_assert_eq!(streamed, collapse_path(&argmax, 0));
    }

    #[test]
    fn ctc_gradient_rows_sum_to_minus_one(
        lp in log_probs(),
        raw in prop::collection::vec(1usize..6, 0..4),
    ) {
        let target: Vec<usize> = raw.into_iter().map(|t| 1 + (t - 1) % (lp.cols() - 1)).collect();
        prop_assume!(min_frames(&target) <= lp.rows());
        let out = ctc_loss(&lp, &target).unwrap();
        prop_assert!(out.loss >= -1e-12);
        for r in 0..out.grad.rows() {
            let row = out.grad.row(r);
            prop_assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&g| (-1.0 - 1e-12..=1e-12).contains(&g)));
        }
    }

    #[test]
    fn prompt_dropout_keeps_or_empties(
        prompt in prop::collection::vec(9usize..30, 0..8),
        p in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let mut full = vec![CTC_OPEN];
        full.extend(&prompt);
        full.push(CTC_CLOSE);
        let out = apply_prompt_dropout(&full, p, &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(out == full || out == vec![CTC_OPEN, CTC_CLOSE]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn written_corpus_loads_back_identically(seed in any::<u64>(), per_state in 1usize..3) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() }.with_counts(per_state);
        let samples = synth_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &samples).unwrap();
        let back = load_samples(&manifest).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.turn_state, b.turn_state);
            prop_assert_eq!(&a.tokens, &b.tokens);
            prop_assert_eq!(&a.alignments, &b.alignments);
            prop_assert_eq!(a.source, b.source);
            prop_assert_eq!(&a.features, &b.features);
        }
    }
}
