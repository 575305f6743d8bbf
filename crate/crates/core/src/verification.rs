//! Per-user writer-dependent verification: class-balanced linear SVMs on
//! each snapshot's features, selection of the most generalizable SVM per
//! user, a majority-vote baseline, and query scoring.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{
    read_container, write_container, Container, FeatureMatrix, USER_MODEL_MAGIC,
};
use crate::error::{Error, Result};
use crate::net::{make_dropout_mask, NetworkState};
use crate::preprocess::{preprocess_image, GrayImage};
use crate::tensor::Tensor;
use crate::train::extract_features;

/// Linear decision function w.x + b.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SvmModel {
    pub fn decision(&self, x: &[f32]) -> f64 {
        debug_assert_eq!(x.len(), self.weights.len());
        let mut acc = self.bias;
        for (w, v) in self.weights.iter().zip(x) {
            acc += w * *v as f64;
        }
        acc
    }
}

/// Inverse-class-size balancing: c_i = n_total / (2 * n_class(i)).
///
/// The counts are kept so the positive/negative weight ratio can be computed
/// exactly as n_neg/n_pos instead of through two rounded divisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassWeights {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassWeights {
    pub fn total(&self) -> usize {
        self.n_pos + self.n_neg
    }

    pub fn positive(&self) -> f64 {
        self.total() as f64 / (2.0 * self.n_pos as f64)
    }

    pub fn negative(&self) -> f64 {
        self.total() as f64 / (2.0 * self.n_neg as f64)
    }

    /// positive/negative, reduced exactly to n_neg/n_pos.
    pub fn ratio(&self) -> f64 {
        self.n_neg as f64 / self.n_pos as f64
    }
}

const SVM_EPOCHS: usize = 200;

/// Minimizes 0.5*||w||^2 + C * sum_i c_i * hinge(y_i (w.x_i + b)) by seeded
/// stochastic subgradient descent with the 1/t step schedule, for a fixed
/// budget of [`SVM_EPOCHS`] shuffled epochs.
pub fn train_linear_svm(
    positives: &FeatureMatrix,
    negatives: &FeatureMatrix,
    cost: f64,
    seed: u64,
) -> Result<SvmModel> {
    if positives.rows() == 0 || negatives.rows() == 0 {
        return Err(Error::Data("svm training requires both classes nonempty".into()));
    }
    if positives.cols() != negatives.cols() {
        return Err(Error::Dimension(format!(
            "positive width {} vs negative width {}",
            positives.cols(),
            negatives.cols()
        )));
    }
    let dim = positives.cols();
    let n = positives.rows() + negatives.rows();
    let cw = ClassWeights { n_pos: positives.rows(), n_neg: negatives.rows() };

    // Per-sample coefficient of the stochastic objective estimate:
    // picking sample i uniformly scales its term by n.
    let row = |i: usize| -> (&[f32], f64, f64) {
        if i < positives.rows() {
            (positives.row(i), 1.0, cost * cw.positive())
        } else {
            (negatives.row(i - positives.rows()), -1.0, cost * cw.negative())
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The bias rides along as an extra weight on a constant-1 feature, so it
    // is regularized with w and stays on the margin scale.
    let mut w = vec![0.0f64; dim + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;

    // Suffix averaging over the second half of the budget: the averaged
    // iterate of Pegasos converges much more stably than the last one.
    let mut w_avg = vec![0.0f64; dim + 1];
    let mut averaged = 0usize;

    for epoch in 0..SVM_EPOCHS {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / t as f64;
            let (x, y, beta) = row(i);
            let margin =
                y * (x.iter().zip(&w).map(|(xv, wv)| *xv as f64 * wv).sum::<f64>() + w[dim]);
            let decay = 1.0 - eta;
            for wv in w.iter_mut() {
                *wv *= decay;
            }
            if margin < 1.0 {
                let push = eta * n as f64 * beta * y;
                for (wv, xv) in w.iter_mut().zip(x) {
                    *wv += push * *xv as f64;
                }
                w[dim] += push;
            }
        }
        if epoch >= SVM_EPOCHS / 2 {
            for (a, wv) in w_avg.iter_mut().zip(&w) {
                *a += wv;
            }
            averaged += 1;
        }
    }
    let scale = 1.0 / averaged as f64;
    for a in w_avg.iter_mut() {
        *a *= scale;
    }
    let bias = w_avg[dim];
    w_avg.truncate(dim);
    Ok(SvmModel { weights: w_avg, bias })
}

/// Uniformly samples `k * n_genuine(target)` genuine feature rows from users
/// other than the target: without replacement when the pool allows, with
/// replacement otherwise.
pub fn sample_random_forgeries(
    target: usize,
    features_by_user: &BTreeMap<usize, FeatureMatrix>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMatrix> {
    let target_rows = features_by_user
        .get(&target)
        .ok_or_else(|| Error::Data(format!("unknown target user {target}")))?
        .rows();
    let pool: Vec<(&FeatureMatrix, usize)> = features_by_user
        .iter()
        .filter(|(u, _)| **u != target)
        .flat_map(|(_, m)| (0..m.rows()).map(move |r| (m, r)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data("no other users to sample random forgeries from".into()));
    }

    let want = k * target_rows;
    let cols = features_by_user[&target].cols();
    let mut out = FeatureMatrix::empty(cols);
    if want <= pool.len() {
        let picks = rand::seq::index::sample(rng, pool.len(), want);
        for idx in picks.iter() {
            let (m, r) = pool[idx];
            out.push_row(m.row(r));
        }
    } else {
        for _ in 0..want {
            let (m, r) = pool[rng.gen_range(0..pool.len())];
            out.push_row(m.row(r));
        }
    }
    Ok(out)
}

/// Per-user bundle: one SVM per snapshot plus the selected index.
#[derive(Debug, Clone, PartialEq)]
pub struct UserModel {
    pub user_id: usize,
    pub svms: Vec<SvmModel>,
    pub selected_index: Option<usize>,
    pub threshold: f64,
}

impl UserModel {
    pub fn selected(&self) -> Result<&SvmModel> {
        let idx = self
            .selected_index
            .ok_or_else(|| Error::Consistency("user model has no selected SVM".into()))?;
        Ok(&self.svms[idx])
    }
}

/// Trains one SVM per snapshot: the user's genuine features against freshly
/// sampled random forgeries (an independent rng substream per snapshot).
pub fn build_user_model(
    user_id: usize,
    genuine_per_snapshot: &[FeatureMatrix],
    features_by_user_per_snapshot: &[BTreeMap<usize, FeatureMatrix>],
    rf_multiplier: usize,
    seed: u64,
) -> Result<UserModel> {
    if genuine_per_snapshot.is_empty()
        || genuine_per_snapshot.len() != features_by_user_per_snapshot.len()
    {
        return Err(Error::Dimension(format!(
            "{} genuine feature sets vs {} forgery pools",
            genuine_per_snapshot.len(),
            features_by_user_per_snapshot.len()
        )));
    }
    let cols = genuine_per_snapshot[0].cols();
    for m in genuine_per_snapshot {
        if m.cols() != cols {
            return Err(Error::Dimension(
                "snapshots disagree on feature width; they must share one config".into(),
            ));
        }
    }

    let mut svms = Vec::with_capacity(genuine_per_snapshot.len());
    for (s, genuine) in genuine_per_snapshot.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (user_id as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ ((s as u64) << 48),
        );
        let negatives = sample_random_forgeries(
            user_id,
            &features_by_user_per_snapshot[s],
            rf_multiplier,
            &mut rng,
        )?;
        let svm_seed = rng.gen::<u64>();
        svms.push(train_linear_svm(genuine, &negatives, 1.0, svm_seed)?);
    }
    Ok(UserModel { user_id, svms, selected_index: None, threshold: 0.0 })
}

#[derive(Debug, Clone, Copy)]
pub struct UsmgOptions {
    pub iterations: usize,
    pub rf_multiplier: usize,
    /// Raw dropout probability applied to every feature vector (no rescale).
    pub dropout_p: f64,
}

impl Default for UsmgOptions {
    fn default() -> Self {
        UsmgOptions { iterations: 5, rf_multiplier: 10, dropout_p: 0.5 }
    }
}

fn balanced_accuracy(
    svm: &SvmModel,
    genuine: &FeatureMatrix,
    forgeries: &FeatureMatrix,
) -> f64 {
    let tp = genuine.iter_rows().filter(|r| svm.decision(r) >= 0.0).count();
    let tn = forgeries.iter_rows().filter(|r| svm.decision(r) < 0.0).count();
    0.5 * (tp as f64 / genuine.rows() as f64 + tn as f64 / forgeries.rows() as f64)
}

/// Selects the most generalizable SVM: over `iterations` rounds, resample
/// random forgeries, mask every feature vector with a raw dropout mask
/// (shared across snapshots so identical ensembles score identically), and
/// accumulate each SVM's balanced accuracy. Highest total wins; ties take
/// the lowest index.
pub fn usmg_select(
    model: &UserModel,
    genuine_per_snapshot: &[FeatureMatrix],
    features_by_user_per_snapshot: &[BTreeMap<usize, FeatureMatrix>],
    options: &UsmgOptions,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let n_snapshots = model.svms.len();
    if genuine_per_snapshot.len() != n_snapshots
        || features_by_user_per_snapshot.len() != n_snapshots
    {
        return Err(Error::Dimension(format!(
            "model has {n_snapshots} SVMs but {} feature sets",
            genuine_per_snapshot.len()
        )));
    }
    let cols = genuine_per_snapshot[0].cols();
    let n_genuine = genuine_per_snapshot[0].rows();

    let mut scores = vec![0.0f64; n_snapshots];
    for _ in 0..options.iterations {
        // One forgery sample per iteration: draw (user, row) ids against the
        // first snapshot's pool, then gather the same rows in every snapshot.
        let picked = sample_forgery_ids(
            model.user_id,
            &features_by_user_per_snapshot[0],
            options.rf_multiplier * n_genuine,
            rng,
        )?;

        let genuine_mask: Vec<Tensor<f32>> = (0..n_genuine)
            .map(|_| make_dropout_mask(&[cols], options.dropout_p, rng))
            .collect::<Result<_>>()?;
        let forgery_mask: Vec<Tensor<f32>> = (0..picked.len())
            .map(|_| make_dropout_mask(&[cols], options.dropout_p, rng))
            .collect::<Result<_>>()?;

        for (s, score) in scores.iter_mut().enumerate() {
            let mut genuine = FeatureMatrix::empty(cols);
            for (i, mask) in genuine_mask.iter().enumerate() {
                genuine.push_row(&masked(genuine_per_snapshot[s].row(i), mask));
            }
            let mut forgeries = FeatureMatrix::empty(cols);
            for ((user, row), mask) in picked.iter().zip(&forgery_mask) {
                forgeries
                    .push_row(&masked(features_by_user_per_snapshot[s][user].row(*row), mask));
            }
            *score += balanced_accuracy(&model.svms[s], &genuine, &forgeries);
        }
    }

    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn masked(row: &[f32], mask: &Tensor<f32>) -> Vec<f32> {
    row.iter().zip(mask.data()).map(|(v, m)| v * m).collect()
}

fn sample_forgery_ids(
    target: usize,
    features_by_user: &BTreeMap<usize, FeatureMatrix>,
    want: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let pool: Vec<(usize, usize)> = features_by_user
        .iter()
        .filter(|(u, _)| **u != target)
        .flat_map(|(u, m)| (0..m.rows()).map(move |r| (*u, r)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data("no other users to sample random forgeries from".into()));
    }
    if want <= pool.len() {
        Ok(rand::seq::index::sample(rng, pool.len(), want)
            .iter()
            .map(|i| pool[i])
            .collect())
    } else {
        Ok((0..want).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// Majority vote over per-snapshot decisions; a 3-3 tie counts as forgery.
pub fn majority_vote(svms: &[SvmModel], features_per_snapshot: &[&[f32]]) -> bool {
    let genuine_votes = svms
        .iter()
        .zip(features_per_snapshot)
        .filter(|(svm, f)| svm.decision(f) >= 0.0)
        .count();
    genuine_votes * 2 > svms.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combiner {
    Usmg,
    MajorityVote,
}

/// Verifies one raw image: preprocess, extract per-snapshot features, then
/// either score with the selected SVM against the model threshold or take
/// the majority vote (score = mean decision value, kept for sweeps).
pub fn verify_query(
    model: &UserModel,
    image: &GrayImage,
    snapshots: &[NetworkState<f32>],
    combiner: Combiner,
) -> Result<(f64, bool)> {
    if snapshots.len() != model.svms.len() {
        return Err(Error::Dimension(format!(
            "{} snapshots for a model with {} SVMs",
            snapshots.len(),
            model.svms.len()
        )));
    }
    let (_, h, w) = snapshots[0].config.input;
    let tensor = preprocess_image(image, h, w);
    let mut features = Vec::with_capacity(snapshots.len());
    for state in snapshots {
        let m = extract_features(state, std::slice::from_ref(&tensor))?;
        features.push(m.row(0).to_vec());
    }
    let refs: Vec<&[f32]> = features.iter().map(|f| f.as_slice()).collect();
    match combiner {
        Combiner::Usmg => {
            let idx = model
                .selected_index
                .ok_or_else(|| Error::Consistency("user model has no selected SVM".into()))?;
            let score = model.svms[idx].decision(refs[idx]);
            Ok((score, score >= model.threshold))
        }
        Combiner::MajorityVote => {
            let decision = majority_vote(&model.svms, &refs);
            let mean: f64 =
                model.svms.iter().zip(&refs).map(|(s, f)| s.decision(f)).sum::<f64>()
                    / model.svms.len() as f64;
            Ok((mean, decision))
        }
    }
}

/// Persists a user model in the shared container format (magic "MLSV").
/// Weights are stored as f32 per the container payload type.
pub fn save_user_model(model: &UserModel, path: &Path) -> Result<()> {
    let selected = match model.selected_index {
        Some(i) => i.to_string(),
        None => "none".to_string(),
    };
    let text = format!(
        "user {}\nselected {}\nthreshold {}\nsvms {}\n",
        model.user_id,
        selected,
        model.threshold,
        model.svms.len()
    );
    let mut tensors = Vec::new();
    for (i, svm) in model.svms.iter().enumerate() {
        let w: Vec<f32> = svm.weights.iter().map(|v| *v as f32).collect();
        let dim = w.len();
        tensors.push((format!("svm{i}.weights"), Tensor::from_vec(&[dim], w)));
        tensors.push((format!("svm{i}.bias"), Tensor::from_vec(&[1], vec![svm.bias as f32])));
    }
    write_container(path, USER_MODEL_MAGIC, &Container { text, tensors })
}

pub fn load_user_model(path: &Path) -> Result<UserModel> {
    let container = read_container(path, USER_MODEL_MAGIC)?;
    let mut user_id = None;
    let mut selected = None;
    let mut threshold = 0.0f64;
    let mut n_svms = None;
    for line in container.text.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("user"), Some(v)) => user_id = v.parse().ok(),
            (Some("selected"), Some("none")) => selected = Some(None),
            (Some("selected"), Some(v)) => selected = Some(v.parse().ok()),
            (Some("threshold"), Some(v)) => {
                threshold = v.parse().map_err(|_| Error::Format("bad threshold".into()))?
            }
            (Some("svms"), Some(v)) => n_svms = v.parse().ok(),
            _ => {}
        }
    }
    let user_id = user_id.ok_or_else(|| Error::Format("user model missing user line".into()))?;
    let n_svms: usize =
        n_svms.ok_or_else(|| Error::Format("user model missing svms line".into()))?;
    let selected_index = selected.flatten();

    let by_name: BTreeMap<String, Tensor<f32>> = container.tensors.into_iter().collect();
    let mut svms = Vec::with_capacity(n_svms);
    for i in 0..n_svms {
        let w = by_name
            .get(&format!("svm{i}.weights"))
            .ok_or_else(|| Error::Format(format!("missing svm{i}.weights")))?;
        let b = by_name
            .get(&format!("svm{i}.bias"))
            .ok_or_else(|| Error::Format(format!("missing svm{i}.bias")))?;
        svms.push(SvmModel {
            weights: w.data().iter().map(|v| *v as f64).collect(),
            bias: b.data()[0] as f64,
        });
    }
    if let Some(idx) = selected_index {
        if idx >= svms.len() {
            return Err(Error::Format(format!("selected index {idx} out of range")));
        }
    }
    Ok(UserModel { user_id, svms, selected_index, threshold })
}
