//! Incremental pseudo episode learning: N-way-K-shot pseudo tasks sampled
//! from the base session train the fusion parameters with an adaptation
//! loss over pseudo-new queries and a balance loss over the pseudo-global
//! class set.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{refine_middle, refine_on_tape, FusionMode, KnowledgeLibrary};
use crate::blocks::BlockVars;
use crate::classifier::{prototypes, ClassifierWeights};
use crate::data::LabeledDataset;
use crate::encoder::{Encoder, EncodedDataset};
use crate::error::{KanetError, Result};
use crate::tensor::{Scalar, Tape, Tensor, VarId};
use crate::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpelConfig {
    /// Pseudo-new classes per episode.
    pub n_way: usize,
    /// Support samples per pseudo-new class.
    pub k_shot: usize,
    /// Query samples per pseudo-new class.
    pub query_per_class: usize,
    /// Pseudo-old test samples per episode, drawn uniformly over the
    /// pseudo-old classes' training data.
    pub n_po_test: usize,
    pub tasks_per_epoch: usize,
    pub epochs: usize,
    /// Initial learning rate, cosine-annealed to zero.
    pub lr0: f64,
    /// Cosine temperature.
    pub alpha: f64,
    pub lambda_adapt: f64,
    pub lambda_balance: f64,
    pub seed: u64,
}

impl Default for IpelConfig {
    fn default() -> Self {
        IpelConfig {
            n_way: 20,
            k_shot: 10,
            query_per_class: 15,
            n_po_test: 128,
            tasks_per_epoch: 200,
            epochs: 50,
            lr0: 0.03,
            alpha: 16.0,
            lambda_adapt: 1.5,
            lambda_balance: 2.0,
            seed: 0,
        }
    }
}

impl IpelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.query_per_class == 0 {
            return Err(KanetError::Config("episode counts must be positive".into()));
        }
        if self.lr0 < 0.0 || self.alpha <= 0.0 {
            return Err(KanetError::Config("lr0 must be >= 0 and alpha > 0".into()));
        }
        Ok(())
    }

    /// Checks the episode geometry against a concrete base session.
    pub fn validate_against(&self, class_pools: &BTreeMap<u32, Vec<usize>>) -> Result<()> {
        self.validate()?;
        let classes = class_pools.len();
        if classes < self.n_way {
            return Err(KanetError::Config(format!(
                "{classes} base classes cannot host {}-way episodes",
                self.n_way
            )));
        }
        let need = self.k_shot + self.query_per_class;
        if let Some((&c, pool)) = class_pools.iter().find(|(_, p)| p.len() < need) {
            return Err(KanetError::Config(format!(
                "class {c} has {} samples, episodes need {need}",
                pool.len()
            )));
        }
        let po_classes = classes - self.n_way;
        if po_classes == 0 {
            if self.n_po_test > 0 {
                return Err(KanetError::Config(
                    "no pseudo-old classes available for pseudo-old test samples".into(),
                ));
            }
        } else {
            // Worst case: the n_way largest pools become pseudo-new.
            let mut sizes: Vec<usize> = class_pools.values().map(Vec::len).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            let min_po_pool: usize = sizes[self.n_way..].iter().sum();
            if min_po_pool < self.n_po_test {
                return Err(KanetError::Config(format!(
                    "pseudo-old pool may hold only {min_po_pool} samples, {} requested",
                    self.n_po_test
                )));
            }
        }
        Ok(())
    }
}

/// One pseudo incremental task. Sample references are indices into the
/// base training set paired with their class ids.
#[derive(Debug, Clone)]
pub struct EpisodeTask<T> {
    /// N*K support samples, grouped by class in `pseudo_new` order.
    pub support: Vec<(usize, u32)>,
    /// N*q query samples, grouped likewise; disjoint from the support.
    pub query: Vec<(usize, u32)>,
    pub pseudo_old_test: Vec<(usize, u32)>,
    pub pseudo_new: Vec<u32>,
    pub pseudo_old: Vec<u32>,
    pub knowledge_po: KnowledgeLibrary<T>,
    pub classifier_po: ClassifierWeights<T>,
}

/// Samples one episode: N pseudo-new classes with disjoint support/query
/// sets, the remaining base classes as pseudo-old, their test samples,
/// and the matching library and classifier rows.
pub fn sample_episode<T: Scalar, R: Rng>(
    base_train: &LabeledDataset<T>,
    lib_base: &KnowledgeLibrary<T>,
    theta_base: &ClassifierWeights<T>,
    cfg: &IpelConfig,
    rng: &mut R,
) -> Result<EpisodeTask<T>> {
    let pools = base_train.class_indices();
    cfg.validate_against(&pools)?;
    let class_list: Vec<u32> = pools.keys().copied().collect();

    let mut pseudo_new: Vec<u32> = rand::seq::index::sample(rng, class_list.len(), cfg.n_way)
        .into_iter()
        .map(|i| class_list[i])
        .collect();
    pseudo_new.sort_unstable();
    let pseudo_old: Vec<u32> =
        class_list.iter().copied().filter(|c| !pseudo_new.contains(c)).collect();

    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.query_per_class);
    for &class in &pseudo_new {
        let pool = &pools[&class];
        let picks = rand::seq::index::sample(rng, pool.len(), cfg.k_shot + cfg.query_per_class);
        for (slot, pick) in picks.into_iter().enumerate() {
            let sample = (pool[pick], class);
            if slot < cfg.k_shot {
                support.push(sample);
            } else {
                query.push(sample);
            }
        }
    }

    let po_pool: Vec<(usize, u32)> = pseudo_old
        .iter()
        .flat_map(|&c| pools[&c].iter().map(move |&i| (i, c)))
        .collect();
    if po_pool.len() < cfg.n_po_test {
        return Err(KanetError::Config(format!(
            "pseudo-old pool holds {} samples, {} requested",
            po_pool.len(),
            cfg.n_po_test
        )));
    }
    let pseudo_old_test: Vec<(usize, u32)> =
        rand::seq::index::sample(rng, po_pool.len(), cfg.n_po_test)
            .into_iter()
            .map(|i| po_pool[i])
            .collect();

    let knowledge_po = if pseudo_old.is_empty() {
        KnowledgeLibrary::empty(lib_base.dim())
    } else {
        lib_base.select(&pseudo_old)?
    };
    let classifier_po = if pseudo_old.is_empty() {
        ClassifierWeights::empty(theta_base.dim())
    } else {
        theta_base.select(&pseudo_old)?
    };

    Ok(EpisodeTask {
        support,
        query,
        pseudo_old_test,
        pseudo_new,
        pseudo_old,
        knowledge_po,
        classifier_po,
    })
}

/// Class-mean early-stage class tokens, grouped by label.
pub fn library_from_encoded<T: Scalar>(encoded: &EncodedDataset<T>) -> Result<KnowledgeLibrary<T>> {
    let mut sets: BTreeMap<u32, Vec<Tensor<T>>> = BTreeMap::new();
    for (tok, &label) in encoded.early_class.iter().zip(&encoded.labels) {
        sets.entry(label).or_default().push(tok.clone());
    }
    KnowledgeLibrary::summarize(&sets)
}

/// Library rows for a subset of samples only (pseudo-new knowledge built
/// from the support set).
fn library_from_samples<T: Scalar>(
    encoded: &EncodedDataset<T>,
    samples: &[(usize, u32)],
) -> Result<KnowledgeLibrary<T>> {
    let mut sets: BTreeMap<u32, Vec<Tensor<T>>> = BTreeMap::new();
    for &(idx, class) in samples {
        sets.entry(class).or_default().push(encoded.early_class[idx].clone());
    }
    KnowledgeLibrary::summarize(&sets)
}

/// Refines every sample of an encoded dataset and stacks the features
/// into an `n x D` matrix (row order = sample order).
pub fn refine_dataset<T: Scalar>(
    encoder: &Encoder<T>,
    fusion: &crate::adapter::FusionParams<T>,
    library: &KnowledgeLibrary<T>,
    encoded: &EncodedDataset<T>,
    mode: FusionMode,
) -> Result<Tensor<T>> {
    let feats: Result<Vec<Tensor<T>>> = encoded
        .middle
        .par_iter()
        .map(|m| refine_middle(encoder, fusion, library, m, mode))
        .collect();
    let feats = feats?;
    let rows: Vec<&[T]> = feats.iter().map(|f| f.data()).collect();
    Tensor::from_rows(&rows)
}

/// Loss nodes of one episode, plus the registered fusion variables.
pub struct EpisodeLosses {
    pub adapt: VarId,
    pub balance: VarId,
    pub total: VarId,
}

fn refine_batch<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &Encoder<T>,
    encoded: &EncodedDataset<T>,
    samples: &[(usize, u32)],
    library: VarId,
    fusion_vars: &BlockVars,
    post_vars: &[BlockVars],
) -> Result<VarId> {
    let mut rows = Vec::with_capacity(samples.len());
    for &(idx, _) in samples {
        let tokens = tape.constant(encoded.middle[idx].clone());
        rows.push(refine_on_tape(
            tape,
            encoder,
            tokens,
            Some(library),
            Some(fusion_vars),
            post_vars,
        )?);
    }
    tape.concat_rows(&rows)
}

/// Per-class mean rows of stacked support features. The support is
/// grouped by class with `k` consecutive rows each, so prototype `c`
/// averages rows `c*k .. (c+1)*k`.
fn support_prototypes<T: Scalar>(
    tape: &mut Tape<T>,
    support_feats: VarId,
    n_way: usize,
    k_shot: usize,
) -> Result<VarId> {
    let mut protos = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let class_rows = tape.slice_rows(support_feats, c * k_shot, k_shot)?;
        protos.push(tape.mean_rows(class_rows)?);
    }
    tape.concat_rows(&protos)
}

fn prediction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    features: VarId,
    weights: VarId,
    labels: &[usize],
    alpha: T,
) -> Result<VarId> {
    let cosines = tape.cosine_matrix(features, weights)?;
    let scaled = tape.scale(cosines, alpha)?;
    let probs = tape.softmax_rows(scaled)?;
    tape.cross_entropy(probs, labels)
}

fn position_of(ids: &[u32], class: u32) -> Result<usize> {
    ids.iter()
        .position(|&c| c == class)
        .ok_or_else(|| KanetError::Protocol(format!("class {class} missing from label space")))
}

/// Builds both episode losses and the weighted total on one tape.
///
/// The adaptation loss classifies refined queries against prototypes of
/// the support refined with the pseudo-new knowledge. The balance loss
/// classifies the pseudo-global test set (pseudo-old test samples plus
/// the queries, re-refined under the concatenated knowledge) against the
/// concatenation of the frozen pseudo-old classifier rows and support
/// prototypes recomputed under that same knowledge.
pub fn episode_losses_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ep: &EpisodeTask<T>,
    encoded: &EncodedDataset<T>,
    encoder: &Encoder<T>,
    fusion_vars: &BlockVars,
    post_vars: &[BlockVars],
    cfg: &IpelConfig,
) -> Result<EpisodeLosses> {
    let n_way = ep.pseudo_new.len();
    let k_shot = ep.support.len() / n_way.max(1);
    let alpha = T::from_f64(cfg.alpha);

    // Pseudo-new knowledge from the support set, detached from the tape.
    let lib_pn = library_from_samples(encoded, &ep.support)?;

    // Adaptation: refine S and Q with the pseudo-new knowledge.
    let lib_pn_id = tape.constant(lib_pn.entries().clone());
    let s_feats = refine_batch(tape, encoder, encoded, &ep.support, lib_pn_id, fusion_vars, post_vars)?;
    let theta_pn = support_prototypes(tape, s_feats, n_way, k_shot)?;
    let q_feats = refine_batch(tape, encoder, encoded, &ep.query, lib_pn_id, fusion_vars, post_vars)?;
    let q_labels: Vec<usize> = ep
        .query
        .iter()
        .map(|&(_, class)| position_of(&ep.pseudo_new, class))
        .collect::<Result<_>>()?;
    let adapt = prediction_loss(tape, q_feats, theta_pn, &q_labels, alpha)?;

    // Balance: pseudo-global knowledge, classifier, and test set.
    let lib_pg = ep.knowledge_po.concat(&lib_pn)?;
    let lib_pg_id = tape.constant(lib_pg.entries().clone());
    let s_feats_g =
        refine_batch(tape, encoder, encoded, &ep.support, lib_pg_id, fusion_vars, post_vars)?;
    let protos_g = support_prototypes(tape, s_feats_g, n_way, k_shot)?;
    let theta_pg = if ep.classifier_po.is_empty() {
        protos_g
    } else {
        let po_rows = tape.constant(ep.classifier_po.rows().clone());
        tape.concat_rows(&[po_rows, protos_g])?
    };
    let pg_ids: Vec<u32> = ep
        .classifier_po
        .class_ids()
        .iter()
        .copied()
        .chain(ep.pseudo_new.iter().copied())
        .collect();

    let pg_samples: Vec<(usize, u32)> =
        ep.pseudo_old_test.iter().chain(ep.query.iter()).copied().collect();
    let pg_feats =
        refine_batch(tape, encoder, encoded, &pg_samples, lib_pg_id, fusion_vars, post_vars)?;
    let pg_labels: Vec<usize> = pg_samples
        .iter()
        .map(|&(_, class)| position_of(&pg_ids, class))
        .collect::<Result<_>>()?;
    let balance = prediction_loss(tape, pg_feats, theta_pg, &pg_labels, alpha)?;

    // Weighted combination.
    let a = tape.scale(adapt, T::from_f64(cfg.lambda_adapt))?;
    let b = tape.scale(balance, T::from_f64(cfg.lambda_balance))?;
    let total = tape.add(a, b)?;
    Ok(EpisodeLosses { adapt, balance, total })
}

fn episode_loss_values<T: Scalar>(
    ep: &EpisodeTask<T>,
    model: &Model<T>,
    encoded: &EncodedDataset<T>,
    cfg: &IpelConfig,
) -> Result<(T, T, T)> {
    let mut tape = Tape::new();
    let fusion_vars = model.fusion.register(&mut tape, false);
    let post_vars = model.encoder.register_blocks(&mut tape, model.encoder.post_range());
    let losses =
        episode_losses_on_tape(&mut tape, ep, encoded, &model.encoder, &fusion_vars, &post_vars, cfg)?;
    Ok((
        tape.value(losses.adapt).item(),
        tape.value(losses.balance).item(),
        tape.value(losses.total).item(),
    ))
}

/// Adaptation loss of one episode (forward only).
pub fn adaptation_loss<T: Scalar>(
    ep: &EpisodeTask<T>,
    model: &Model<T>,
    encoded: &EncodedDataset<T>,
    cfg: &IpelConfig,
) -> Result<T> {
    episode_loss_values(ep, model, encoded, cfg).map(|(a, _, _)| a)
}

/// Balance loss of one episode (forward only).
pub fn balance_loss<T: Scalar>(
    ep: &EpisodeTask<T>,
    model: &Model<T>,
    encoded: &EncodedDataset<T>,
    cfg: &IpelConfig,
) -> Result<T> {
    episode_loss_values(ep, model, encoded, cfg).map(|(_, b, _)| b)
}

/// Weighted total of both losses (forward only).
pub fn total_loss<T: Scalar>(
    ep: &EpisodeTask<T>,
    model: &Model<T>,
    encoded: &EncodedDataset<T>,
    cfg: &IpelConfig,
) -> Result<T> {
    episode_loss_values(ep, model, encoded, cfg).map(|(_, _, t)| t)
}

/// Cosine-annealed learning rate: lr0 * (1 + cos(pi * t / T)) / 2.
pub fn cosine_annealed_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = (step as f64).min(total_steps as f64);
    lr0 * (1.0 + (std::f64::consts::PI * t / total_steps as f64).cos()) / 2.0
}

/// Adam with bias correction; no weight decay.
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>], lr: T) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub task: usize,
    pub loss_adapt: f64,
    pub loss_balance: f64,
    pub loss_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<TrainRecord>,
}

/// Trains the fusion parameters in place. The encoder and the base
/// knowledge library never change; the base classifier is re-derived from
/// the current fusion parameters at every epoch start so pseudo-old rows
/// track the evolving representation.
pub fn train<T: Scalar>(
    base_train: &LabeledDataset<T>,
    model: &mut Model<T>,
    cfg: &IpelConfig,
) -> Result<TrainOutcome> {
    cfg.validate_against(&base_train.class_indices())?;
    let encoded = model.encoder.encode_dataset(base_train)?;
    let lib_base = library_from_encoded(&encoded)?;

    let total_steps = cfg.epochs * cfg.tasks_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.fusion.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::<T>::new(&sizes);
    let mut outcome = TrainOutcome::default();

    for epoch in 0..cfg.epochs {
        let feats = refine_dataset(
            &model.encoder,
            &model.fusion,
            &lib_base,
            &encoded,
            FusionMode::Full,
        )?;
        let theta_base = prototypes(&feats, &encoded.labels)?;

        for task in 0..cfg.tasks_per_epoch {
            let ep = sample_episode(base_train, &lib_base, &theta_base, cfg, &mut rng)?;

            let mut tape = Tape::new();
            let fusion_vars = model.fusion.register(&mut tape, true);
            let post_vars = model.encoder.register_blocks(&mut tape, model.encoder.post_range());
            let losses = episode_losses_on_tape(
                &mut tape,
                &ep,
                &encoded,
                &model.encoder,
                &fusion_vars,
                &post_vars,
                cfg,
            )?;

            let loss_adapt = tape.value(losses.adapt).item().to_f64();
            let loss_balance = tape.value(losses.balance).item().to_f64();
            let loss_total = tape.value(losses.total).item().to_f64();
            if !loss_total.is_finite() {
                return Err(KanetError::NonFinite(format!("epoch {epoch} task {task}")));
            }

            tape.backward(losses.total)?;
            let grads: Vec<Vec<T>> = fusion_vars
                .ids()
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![T::zero(); tape.value(id).numel()])
                })
                .collect();

            let step = epoch * cfg.tasks_per_epoch + task;
            let lr = cosine_annealed_lr(step, total_steps, cfg.lr0);
            adam.step(&mut model.fusion.tensors_mut(), &grads, T::from_f64(lr));

            outcome.log.push(TrainRecord {
                epoch,
                task,
                loss_adapt,
                loss_balance,
                loss_total,
                lr,
            });
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::FusionParams;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::encoder::EncoderConfig;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};

    fn tiny_setup(seed: u64) -> (Model<f64>, LabeledDataset<f64>) {
        let enc_cfg = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            n_early: 1,
            n_middle: 1,
            n_post: 1,
            seed,
        };
        let encoder = Encoder::new(enc_cfg).unwrap();
        let fusion = FusionParams::init(8, 2, seed + 1).unwrap();
        let model = Model::new(encoder, fusion, 16.0);
        let (train, _) = generate_synthetic::<f64>(&SyntheticConfig {
            num_classes: 6,
            train_per_class: 8,
            test_per_class: 2,
            image_size: 8,
            sigma_between: 1.0,
            sigma_within: 0.3,
            seed: seed + 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        (model, train)
    }

    fn tiny_cfg() -> IpelConfig {
        IpelConfig {
            n_way: 3,
            k_shot: 2,
            query_per_class: 2,
            n_po_test: 6,
            tasks_per_epoch: 4,
            epochs: 1,
            lr0: 0.03,
            seed: 5,
            ..IpelConfig::default()
        }
    }

    fn base_state(
        model: &Model<f64>,
        train: &LabeledDataset<f64>,
    ) -> (EncodedDataset<f64>, KnowledgeLibrary<f64>, ClassifierWeights<f64>) {
        let encoded = model.encoder.encode_dataset(train).unwrap();
        let lib = library_from_encoded(&encoded).unwrap();
        let feats =
            refine_dataset(&model.encoder, &model.fusion, &lib, &encoded, FusionMode::Full)
                .unwrap();
        let theta = prototypes(&feats, &encoded.labels).unwrap();
        (encoded, lib, theta)
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        assert!((cosine_annealed_lr(0, 100, 0.03) - 0.03).abs() < 1e-12);
        assert!(cosine_annealed_lr(100, 100, 0.03).abs() < 1e-12);
        assert!((cosine_annealed_lr(50, 100, 0.03) - 0.015).abs() < 1e-12);
    }

    #[test]
    fn episode_sampling_respects_all_counts_and_disjointness() {
        let (model, train) = tiny_setup(1);
        let (_, lib, theta) = base_state(&model, &train);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let ep = sample_episode(&train, &lib, &theta, &cfg, &mut rng).unwrap();
            assert_eq!(ep.support.len(), cfg.n_way * cfg.k_shot);
            assert_eq!(ep.query.len(), cfg.n_way * cfg.query_per_class);
            assert_eq!(ep.pseudo_old_test.len(), cfg.n_po_test);
            assert_eq!(ep.pseudo_new.len() + ep.pseudo_old.len(), 6);

            let s: std::collections::HashSet<usize> =
                ep.support.iter().map(|&(i, _)| i).collect();
            let q: std::collections::HashSet<usize> = ep.query.iter().map(|&(i, _)| i).collect();
            assert!(s.is_disjoint(&q), "support and query share samples");
            assert!(ep.pseudo_new.iter().all(|c| !ep.pseudo_old.contains(c)));
            assert_eq!(ep.knowledge_po.len(), ep.pseudo_old.len());
            assert_eq!(ep.classifier_po.len(), ep.pseudo_old.len());
            for &(_, c) in &ep.pseudo_old_test {
                assert!(ep.pseudo_old.contains(&c));
            }
        }
    }

    #[test]
    fn episode_sampling_rejects_impossible_configs() {
        let (model, train) = tiny_setup(2);
        let (_, lib, theta) = base_state(&model, &train);
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let too_wide = IpelConfig { n_way: 7, ..tiny_cfg() };
        assert!(sample_episode(&train, &lib, &theta, &too_wide, &mut rng).is_err());

        let too_deep = IpelConfig { k_shot: 7, query_per_class: 7, ..tiny_cfg() };
        assert!(sample_episode(&train, &lib, &theta, &too_deep, &mut rng).is_err());

        let too_many_po = IpelConfig { n_po_test: 1000, ..tiny_cfg() };
        assert!(sample_episode(&train, &lib, &theta, &too_many_po, &mut rng).is_err());
    }

    #[test]
    fn orthogonal_prototype_loss_matches_closed_form() {
        // Queries equal to their prototypes, prototypes mutually
        // orthogonal: the loss is CE of softmax over alpha * one-hot rows.
        let n = 4;
        let alpha = 16.0f64;
        let mut feats = vec![0.0; n * n];
        for c in 0..n {
            feats[c * n + c] = 2.5; // scaled basis vectors
        }
        let feats = Tensor::new(vec![n, n], feats).unwrap();
        let labels: Vec<usize> = (0..n).collect();

        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let w = tape.constant(feats);
        let loss = prediction_loss(&mut tape, f, w, &labels, alpha).unwrap();

        let denom = alpha.exp() + (n as f64 - 1.0);
        let want = -(alpha.exp() / denom).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-9);
    }

    #[test]
    fn losses_match_independent_plain_path_recomputation() {
        let (model, train) = tiny_setup(3);
        let (encoded, lib, theta) = base_state(&model, &train);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ep = sample_episode(&train, &lib, &theta, &cfg, &mut rng).unwrap();

        let adapt = adaptation_loss(&ep, &model, &encoded, &cfg).unwrap();
        let balance = balance_loss(&ep, &model, &encoded, &cfg).unwrap();
        let total = total_loss(&ep, &model, &encoded, &cfg).unwrap();
        assert!(
            (total - (cfg.lambda_adapt * adapt + cfg.lambda_balance * balance)).abs() < 1e-9
        );

        // Oracle: recompute the adaptation loss through the plain
        // (non-tape-training) refine path and scalar math.
        let lib_pn = library_from_samples(&encoded, &ep.support).unwrap();
        let refine_one = |idx: usize, lib: &KnowledgeLibrary<f64>| {
            refine_middle(&model.encoder, &model.fusion, lib, &encoded.middle[idx], FusionMode::Full)
                .unwrap()
        };
        let mut protos: Vec<Vec<f64>> = Vec::new();
        for &class in &ep.pseudo_new {
            let members: Vec<Tensor<f64>> = ep
                .support
                .iter()
                .filter(|&&(_, c)| c == class)
                .map(|&(i, _)| refine_one(i, &lib_pn))
                .collect();
            let refs: Vec<&Tensor<f64>> = members.iter().collect();
            protos.push(Tensor::mean_of(&refs).unwrap().into_data());
        }
        let mut total_ce = 0.0;
        for &(idx, class) in &ep.query {
            let f = refine_one(idx, &lib_pn);
            let mut logits: Vec<f64> = protos
                .iter()
                .map(|p| {
                    let dot: f64 = f.data().iter().zip(p).map(|(a, b)| a * b).sum();
                    let nf: f64 = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let np: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    cfg.alpha * dot / (nf * np).max(1e-12)
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let y = ep.pseudo_new.iter().position(|&c| c == class).unwrap();
            logits = logits.iter().map(|l| (l - max).exp() / sum).collect();
            total_ce += -logits[y].max(1e-12).ln();
        }
        let want = total_ce / ep.query.len() as f64;
        assert!((adapt - want).abs() < 1e-9, "{adapt} vs {want}");
    }

    #[test]
    fn balance_reduces_to_adaptation_when_pseudo_old_is_empty() {
        let (model, train) = tiny_setup(4);
        let (encoded, lib, theta) = base_state(&model, &train);
        // All six classes become pseudo-new; no pseudo-old side remains.
        let cfg = IpelConfig { n_way: 6, n_po_test: 0, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&train, &lib, &theta, &cfg, &mut rng).unwrap();
        assert!(ep.pseudo_old.is_empty());

        let adapt = adaptation_loss(&ep, &model, &encoded, &cfg).unwrap();
        let balance = balance_loss(&ep, &model, &encoded, &cfg).unwrap();
        assert!((adapt - balance).abs() < 1e-12, "{adapt} vs {balance}");
    }

    #[test]
    fn uniform_predictions_cost_ln_n() {
        // Identical prototypes make every cosine row constant, so the
        // softmax is uniform over N classes.
        let n = 5;
        let d = 4;
        let proto = vec![0.3, -0.2, 0.9, 0.4];
        let mut w = Vec::new();
        for _ in 0..n {
            w.extend_from_slice(&proto);
        }
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new(vec![2, d], vec![1.0, 0.2, -0.3, 0.5, 0.1, 0.8, 0.2, -0.9]).unwrap());
        let wv = tape.constant(Tensor::new(vec![n, d], w).unwrap());
        let loss = prediction_loss(&mut tape, f, wv, &[0, 3], 16.0).unwrap();
        assert!((tape.value(loss).item() - (n as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn episode_gradients_match_finite_differences() {
        let (model, train) = tiny_setup(6);
        let (encoded, lib, theta) = base_state(&model, &train);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ep = sample_episode(&train, &lib, &theta, &cfg, &mut rng).unwrap();

        let mut tape = Tape::new();
        let fusion_vars = model.fusion.register(&mut tape, true);
        let post_vars = model.encoder.register_blocks(&mut tape, model.encoder.post_range());
        let losses = episode_losses_on_tape(
            &mut tape,
            &ep,
            &encoded,
            &model.encoder,
            &fusion_vars,
            &post_vars,
            &cfg,
        )
        .unwrap();
        tape.backward(losses.total).unwrap();
        let analytic: Vec<Vec<f64>> = fusion_vars
            .ids()
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect();

        let tensors: Vec<Tensor<f64>> = model.fusion.tensors().into_iter().cloned().collect();
        let report = check_gradients(&tensors, &analytic, DEFAULT_STEP, |ps| {
            let mut probe = Model::new(model.encoder.clone(), model.fusion.clone(), model.alpha);
            for (slot, t) in probe.fusion.tensors_mut().into_iter().zip(ps) {
                *slot = t.clone();
            }
            total_loss(&ep, &probe, &encoded, &cfg)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_from_clean_state() {
        let mut p = Tensor::<f64>::from_vec(vec![0.5, -0.25, 1.0]);
        let before = p.clone();
        let mut adam = Adam::new(&[3]);
        adam.step(&mut [&mut p], &[vec![0.0; 3]], 0.05);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_epoch_training_changes_nothing() {
        let (mut model, train_data) = tiny_setup(7);
        let before = model.fusion.to_bytes();
        let cfg = IpelConfig { epochs: 0, ..tiny_cfg() };
        let outcome = train(&train_data, &mut model, &cfg).unwrap();
        assert!(outcome.log.is_empty());
        assert_eq!(model.fusion.to_bytes(), before);
    }

    #[test]
    fn training_is_seed_deterministic_and_freezes_the_encoder() {
        let cfg = tiny_cfg();

        let (mut model_a, train_data) = tiny_setup(8);
        let encoder_before = model_a.encoder.weight_bytes();
        let init_bytes = model_a.fusion.to_bytes();
        let out_a = train(&train_data, &mut model_a, &cfg).unwrap();
        assert_eq!(model_a.encoder.weight_bytes(), encoder_before, "encoder must stay frozen");
        assert_ne!(model_a.fusion.to_bytes(), init_bytes, "fusion parameters should move");
        assert_eq!(out_a.log.len(), cfg.epochs * cfg.tasks_per_epoch);

        let (mut model_b, train_b) = tiny_setup(8);
        let out_b = train(&train_b, &mut model_b, &cfg).unwrap();
        assert_eq!(model_a.fusion.to_bytes(), model_b.fusion.to_bytes());
        for (a, b) in out_a.log.iter().zip(&out_b.log) {
            assert_eq!(a.loss_total, b.loss_total);
        }
    }
}
