//! The few-shot class-incremental session protocol: disjoint label
//! spaces, K-shot incremental train splits, evaluation over the union of
//! all test splits seen so far, and the session metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{refine_middle, FusionMode, KnowledgeLibrary};
use crate::classifier::{argmax_class, extend, predict, prototypes, ClassifierWeights};
use crate::data::{LabeledDataset, Split};
use crate::encoder::EncodedDataset;
use crate::error::{KanetError, Result};
use crate::ipel::refine_dataset;
use crate::tensor::{Scalar, Tensor};
use crate::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub base_classes: usize,
    /// Incremental sessions after the base session.
    pub num_sessions: usize,
    pub classes_per_session: usize,
    /// Train samples kept per class in incremental sessions.
    pub shots_per_class: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            base_classes: 60,
            num_sessions: 8,
            classes_per_session: 5,
            shots_per_class: 5,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 || self.classes_per_session == 0 || self.shots_per_class == 0 {
            return Err(KanetError::Config("split counts must be positive".into()));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.num_sessions * self.classes_per_session
    }
}

/// One session of the stream: its label space and its train/test splits.
#[derive(Debug, Clone)]
pub struct SessionSpec<T> {
    pub index: usize,
    pub classes: Vec<u32>,
    pub train: LabeledDataset<T>,
    pub test: LabeledDataset<T>,
}

/// Splits a dataset into the base session plus K-shot incremental
/// sessions with disjoint, ascending label spaces.
pub fn build_session_stream<T: Scalar>(
    train: &LabeledDataset<T>,
    test: &LabeledDataset<T>,
    cfg: &SplitConfig,
) -> Result<Vec<SessionSpec<T>>> {
    cfg.validate()?;
    let train_pools = train.class_indices();
    let classes: Vec<u32> = train_pools.keys().copied().collect();
    if classes.len() < cfg.total_classes() {
        return Err(KanetError::Config(format!(
            "dataset has {} classes, split needs {}",
            classes.len(),
            cfg.total_classes()
        )));
    }
    let test_pools = test.class_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut sessions = Vec::with_capacity(1 + cfg.num_sessions);
    let mut cursor = 0usize;
    for index in 0..=cfg.num_sessions {
        let width = if index == 0 { cfg.base_classes } else { cfg.classes_per_session };
        let session_classes: Vec<u32> = classes[cursor..cursor + width].to_vec();
        cursor += width;

        let mut train_indices = Vec::new();
        for &class in &session_classes {
            let pool = &train_pools[&class];
            if index == 0 {
                train_indices.extend_from_slice(pool);
            } else {
                if pool.len() < cfg.shots_per_class {
                    return Err(KanetError::Config(format!(
                        "class {class} has {} train samples, {} shots requested",
                        pool.len(),
                        cfg.shots_per_class
                    )));
                }
                let picks =
                    rand::seq::index::sample(&mut rng, pool.len(), cfg.shots_per_class);
                let mut chosen: Vec<usize> = picks.into_iter().map(|i| pool[i]).collect();
                chosen.sort_unstable();
                train_indices.extend(chosen);
            }
        }
        let mut test_indices = Vec::new();
        for &class in &session_classes {
            if let Some(pool) = test_pools.get(&class) {
                test_indices.extend_from_slice(pool);
            }
        }

        sessions.push(SessionSpec {
            index,
            classes: session_classes,
            train: train.subset(&train_indices, Split::Train)?,
            test: test.subset(&test_indices, Split::Test)?,
        });
    }
    Ok(sessions)
}

/// Session accuracies (percent) and the derived summary metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_session_accuracy: Vec<f64>,
    pub avg: f64,
    pub pd: f64,
    pub base_acc: f64,
    pub new_acc: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// One row per session, accuracies as percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("session,accuracy_pct\n");
        for (i, acc) in self.per_session_accuracy.iter().enumerate() {
            out.push_str(&format!("{i},{acc:.2}\n"));
        }
        out
    }
}

/// Mean of the per-session accuracies.
pub fn avg_accuracy(accs: &[f64]) -> f64 {
    if accs.is_empty() {
        return 0.0;
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Performance drop: first-session minus last-session accuracy.
pub fn pd(accs: &[f64]) -> f64 {
    match (accs.first(), accs.last()) {
        (Some(first), Some(last)) => first - last,
        _ => 0.0,
    }
}

/// Final-session accuracy split into base classes and new classes.
/// A side with no samples reports 0.
pub fn base_new_accuracy(
    final_predictions: &[(u32, u32)],
    base_classes: &[u32],
) -> (f64, f64) {
    let mut base = (0usize, 0usize);
    let mut new = (0usize, 0usize);
    for &(label, pred) in final_predictions {
        let bucket = if base_classes.contains(&label) { &mut base } else { &mut new };
        bucket.1 += 1;
        if label == pred {
            bucket.0 += 1;
        }
    }
    let pct = |(correct, total): (usize, usize)| {
        if total == 0 {
            0.0
        } else {
            100.0 * correct as f64 / total as f64
        }
    };
    (pct(base), pct(new))
}

/// Evaluation-time ablations.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// `Bypass` evaluates the frozen encoder alone (the no-adapter
    /// baseline).
    pub fusion: FusionMode,
    /// Replace the library with a single zero row at refinement time.
    pub zero_library: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { fusion: FusionMode::Full, zero_library: false }
    }
}

/// Everything `run_incremental` produces: the metrics plus the final
/// library/classifier state and per-session byte snapshots for freeze
/// audits.
pub struct RunOutcome<T> {
    pub report: MetricsReport,
    pub library: KnowledgeLibrary<T>,
    pub classifier: ClassifierWeights<T>,
    /// (library bytes, classifier bytes) after each session.
    pub session_snapshots: Vec<(Vec<u8>, Vec<u8>)>,
    /// (label, prediction) pairs from the final session's evaluation.
    pub final_predictions: Vec<(u32, u32)>,
}

/// Runs the full incremental procedure over an in-order session stream:
/// summarize new knowledge into the library, refine the session's train
/// features with the updated library, extend the classifier with their
/// prototypes, then evaluate on the union of all test splits seen so far.
pub fn run_incremental<T: Scalar>(
    model: &Model<T>,
    stream: &[SessionSpec<T>],
    opts: &EvalOptions,
) -> Result<RunOutcome<T>> {
    if stream.is_empty() {
        return Err(KanetError::Protocol("empty session stream".into()));
    }
    let dim = model.encoder.cfg().embed_dim;
    let mut library = KnowledgeLibrary::<T>::empty(dim);
    let mut classifier = ClassifierWeights::<T>::empty(dim);
    let mut accumulated_tests: Vec<EncodedDataset<T>> = Vec::new();
    let mut accuracies = Vec::with_capacity(stream.len());
    let mut snapshots = Vec::with_capacity(stream.len());
    let mut final_predictions = Vec::new();

    for (position, session) in stream.iter().enumerate() {
        if session.index != position {
            return Err(KanetError::Protocol(format!(
                "session {} arrived at position {position}",
                session.index
            )));
        }

        // (1) summarize new knowledge into the library.
        let enc_train = model.encoder.encode_dataset(&session.train)?;
        let mut sets = std::collections::BTreeMap::new();
        for (tok, &label) in enc_train.early_class.iter().zip(&enc_train.labels) {
            sets.entry(label).or_insert_with(Vec::new).push(tok.clone());
        }
        library = library.extend(&sets)?;
        let eval_library =
            if opts.zero_library { KnowledgeLibrary::zero_row(dim) } else { library.clone() };

        // (2)+(3) refine train features with the updated library and
        // extend the classifier with their class means.
        let train_feats = refine_dataset(
            &model.encoder,
            &model.fusion,
            &eval_library,
            &enc_train,
            opts.fusion,
        )?;
        let new_rows = prototypes(&train_feats, &enc_train.labels)?;
        classifier = extend(&classifier, &new_rows)?;

        // (4) refine each test sample and classify it over all seen
        // classes.
        accumulated_tests.push(model.encoder.encode_dataset(&session.test)?);
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut predictions = Vec::new();
        for enc_test in &accumulated_tests {
            let preds: Result<Vec<(u32, u32)>> = enc_test
                .middle
                .par_iter()
                .zip(&enc_test.labels)
                .map(|(middle, &label)| {
                    let feat = refine_middle(
                        &model.encoder,
                        &model.fusion,
                        &eval_library,
                        middle,
                        opts.fusion,
                    )?;
                    let probs = predict(&feat, &classifier, model.alpha)?;
                    let pred = argmax_class(&probs, classifier.class_ids())?;
                    Ok((label, pred))
                })
                .collect();
            for (label, pred) in preds? {
                total += 1;
                if label == pred {
                    correct += 1;
                }
                predictions.push((label, pred));
            }
        }
        accuracies.push(100.0 * correct as f64 / total.max(1) as f64);
        snapshots.push((
            library.entries().to_le_bytes(),
            classifier.rows().to_le_bytes(),
        ));
        if position == stream.len() - 1 {
            final_predictions = predictions;
        }
    }

    let (base_acc, new_acc) = base_new_accuracy(&final_predictions, &stream[0].classes);
    let report = MetricsReport {
        avg: avg_accuracy(&accuracies),
        pd: pd(&accuracies),
        base_acc,
        new_acc,
        per_session_accuracy: accuracies,
    };
    Ok(RunOutcome { report, library, classifier, session_snapshots: snapshots, final_predictions })
}

/// Refined (or bypassed) features of an encoded dataset, for embedding
/// exports.
pub fn export_features<T: Scalar>(
    model: &Model<T>,
    library: &KnowledgeLibrary<T>,
    encoded: &EncodedDataset<T>,
    mode: FusionMode,
) -> Result<Tensor<T>> {
    refine_dataset(&model.encoder, &model.fusion, library, encoded, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::FusionParams;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::encoder::{Encoder, EncoderConfig};

    fn synthetic(classes: usize, train_pc: usize, test_pc: usize, seed: u64) -> (LabeledDataset<f32>, LabeledDataset<f32>) {
        generate_synthetic(&SyntheticConfig {
            num_classes: classes,
            train_per_class: train_pc,
            test_per_class: test_pc,
            image_size: 8,
            sigma_between: 1.0,
            sigma_within: 0.1,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        let encoder = Encoder::new(EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 16,
            num_heads: 2,
            n_early: 1,
            n_middle: 1,
            n_post: 1,
            seed,
        })
        .unwrap();
        let fusion = FusionParams::init(16, 2, seed + 1).unwrap();
        Model::new(encoder, fusion, 16.0)
    }

    #[test]
    fn twelve_class_stream_has_expected_label_spaces() {
        let (train, test) = synthetic(12, 8, 2, 3);
        let cfg = SplitConfig {
            base_classes: 6,
            num_sessions: 3,
            classes_per_session: 2,
            shots_per_class: 5,
            seed: 1,
        };
        let stream = build_session_stream(&train, &test, &cfg).unwrap();
        assert_eq!(stream.len(), 4);
        assert_eq!(stream[0].classes, (0..6).collect::<Vec<u32>>());
        assert_eq!(stream[1].classes, vec![6, 7]);
        assert_eq!(stream[2].classes, vec![8, 9]);
        assert_eq!(stream[3].classes, vec![10, 11]);

        // Base session keeps every train sample; incremental sessions are
        // K-shot.
        assert_eq!(stream[0].train.len(), 6 * 8);
        for s in &stream[1..] {
            assert_eq!(s.train.len(), 2 * 5);
        }
        // Disjoint train/test and label spaces by construction.
        for (i, a) in stream.iter().enumerate() {
            for b in stream.iter().skip(i + 1) {
                assert!(a.classes.iter().all(|c| !b.classes.contains(c)));
            }
        }
    }

    #[test]
    fn benchmark_shaped_streams_have_paper_counts() {
        // CIFAR100 shape: 60 base classes plus 8 sessions of 5.
        let (train, test) = synthetic(100, 7, 1, 4);
        let cifar = SplitConfig {
            base_classes: 60,
            num_sessions: 8,
            classes_per_session: 5,
            shots_per_class: 5,
            seed: 0,
        };
        let stream = build_session_stream(&train, &test, &cifar).unwrap();
        assert_eq!(stream.len(), 9);
        assert_eq!(stream[0].classes.len(), 60);
        assert!(stream[1..].iter().all(|s| s.classes.len() == 5 && s.train.len() == 25));
        let total: usize = stream.iter().map(|s| s.classes.len()).sum();
        assert_eq!(total, 100);

        // CUB200 shape: 100 base classes plus 10 sessions of 10.
        let (train, test) = synthetic(200, 7, 1, 5);
        let cub = SplitConfig {
            base_classes: 100,
            num_sessions: 10,
            classes_per_session: 10,
            shots_per_class: 5,
            seed: 0,
        };
        let stream = build_session_stream(&train, &test, &cub).unwrap();
        assert_eq!(stream.len(), 11);
        assert_eq!(stream[0].classes.len(), 100);
        assert!(stream[1..].iter().all(|s| s.classes.len() == 10 && s.train.len() == 50));
    }

    #[test]
    fn stream_rejects_insufficient_classes() {
        let (train, test) = synthetic(10, 6, 1, 6);
        let cfg = SplitConfig {
            base_classes: 6,
            num_sessions: 3,
            classes_per_session: 2,
            shots_per_class: 5,
            seed: 0,
        };
        assert!(build_session_stream(&train, &test, &cfg).is_err());
    }

    #[test]
    fn metric_helpers_match_reported_table_values() {
        let accs = [85.67, 79.94, 78.06, 75.43, 74.43, 73.11, 73.16, 71.95, 70.22];
        assert!((avg_accuracy(&accs) - 75.77).abs() < 0.005);
        assert!((pd(&accs) - 15.45).abs() < 0.005);

        let constant = [64.2; 6];
        assert!((avg_accuracy(&constant) - 64.2).abs() < 1e-12);
        assert_eq!(pd(&constant), 0.0);
    }

    #[test]
    fn base_new_accuracy_hand_tally() {
        let base: Vec<u32> = vec![0, 1];
        // 4 samples: base ones right, new ones split.
        let preds = [(0, 0), (1, 1), (2, 2), (3, 1)];
        let (b, n) = base_new_accuracy(&preds, &base);
        assert_eq!(b, 100.0);
        assert_eq!(n, 50.0);

        let all_right = [(0, 0), (2, 2)];
        assert_eq!(base_new_accuracy(&all_right, &base), (100.0, 100.0));

        let new_wrong = [(0, 0), (2, 0), (3, 0)];
        assert_eq!(base_new_accuracy(&new_wrong, &base), (100.0, 0.0));
    }

    #[test]
    fn single_session_stream_reports_one_accuracy_and_zero_pd() {
        let (train, test) = synthetic(4, 6, 2, 7);
        let cfg = SplitConfig {
            base_classes: 4,
            num_sessions: 0,
            classes_per_session: 1,
            shots_per_class: 5,
            seed: 0,
        };
        let stream = build_session_stream(&train, &test, &cfg).unwrap();
        let model = tiny_model(7);
        let out = run_incremental(&model, &stream, &EvalOptions::default()).unwrap();
        assert_eq!(out.report.per_session_accuracy.len(), 1);
        assert_eq!(out.report.pd, 0.0);
        assert_eq!(out.library.len(), 4);
        assert_eq!(out.classifier.len(), 4);
    }

    #[test]
    fn separable_clusters_reach_full_accuracy_and_rows_stay_frozen() {
        let (train, test) = synthetic(8, 8, 3, 8); // sigma_within = 0.1: well separated
        let cfg = SplitConfig {
            base_classes: 4,
            num_sessions: 2,
            classes_per_session: 2,
            shots_per_class: 5,
            seed: 2,
        };
        let stream = build_session_stream(&train, &test, &cfg).unwrap();
        let model = tiny_model(9);
        let out = run_incremental(&model, &stream, &EvalOptions::default()).unwrap();

        let last = *out.report.per_session_accuracy.last().unwrap();
        assert_eq!(last, 100.0, "fully separated clusters should be perfectly classified");

        // Old library and classifier rows stay bitwise identical across
        // sessions.
        for w in out.session_snapshots.windows(2) {
            let (ref lib_a, ref cls_a) = w[0];
            let (ref lib_b, ref cls_b) = w[1];
            assert_eq!(&lib_b[..lib_a.len()], &lib_a[..]);
            assert_eq!(&cls_b[..cls_a.len()], &cls_a[..]);
        }

        // Final counts: 8 classes seen.
        assert_eq!(out.library.len(), 8);
        assert_eq!(out.classifier.len(), 8);
    }

    #[test]
    fn out_of_order_sessions_are_rejected() {
        let (train, test) = synthetic(6, 6, 2, 9);
        let cfg = SplitConfig {
            base_classes: 4,
            num_sessions: 1,
            classes_per_session: 2,
            shots_per_class: 5,
            seed: 0,
        };
        let mut stream = build_session_stream(&train, &test, &cfg).unwrap();
        stream.swap(0, 1);
        let model = tiny_model(10);
        assert!(matches!(
            run_incremental(&model, &stream, &EvalOptions::default()),
            Err(KanetError::Protocol(_))
        ));
    }
}
