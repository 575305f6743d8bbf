//! Sequential multi-trial training with a rotating dominant loss.
//!
//! Each trial minimizes the combined loss under that trial's coefficients,
//! stopping early when training-set identification accuracy stops improving.
//! The network is snapshotted after every trial; later trials continue from
//! the previous trial's weights without re-initialization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{save_snapshot, FeatureMatrix};
use crate::error::{Error, Result};
use crate::loss::{dml_batch, LossKind, LossWeights};
use crate::net::{network_backward, network_forward, Mode, NetworkState};
use crate::optim::{nesterov_step, OptimizerState};
use crate::tensor::Tensor;

/// Labeled images for the identification task; one tensor per image of the
/// network's input shape.
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub epoch_cap: usize,
    /// Seed for shuffling, dropout masks and rrelu slopes.
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 48,
            patience: 5,
            epoch_cap: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub dominant: LossKind,
    pub epochs_run: usize,
    pub final_accuracy: f64,
    pub checkpoint_path: Option<PathBuf>,
}

/// Frozen states in training order, one per completed trial.
pub struct SnapshotSet {
    pub records: Vec<TrialRecord>,
    pub states: Vec<NetworkState<f32>>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Stop once the best accuracy so far has gone `patience` consecutive
/// epochs without a strict improvement.
pub(crate) struct EarlyStop {
    best: f64,
    streak: usize,
    patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { best: f64::NEG_INFINITY, streak: 0, patience }
    }

    /// Records one epoch's accuracy; true means stop now.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        if accuracy > self.best {
            self.best = accuracy;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        self.streak >= self.patience
    }
}

fn stack_images(images: &[Tensor<f32>], indices: &[usize]) -> Tensor<f32> {
    let per = images[indices[0]].shape().to_vec();
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&per);
    let mut data = Vec::with_capacity(indices.len() * images[indices[0]].len());
    for &i in indices {
        data.extend_from_slice(images[i].data());
    }
    Tensor::from_vec(&shape, data)
}

fn head_index(kind: LossKind) -> usize {
    match kind {
        LossKind::CrossEntropy => 0,
        LossKind::SquaredHinge => 1,
        LossKind::Csd => 2,
    }
}

/// Fraction of dataset images whose argmax on the given head matches the
/// label (eval-mode forward).
pub fn identification_accuracy(
    state: &NetworkState<f32>,
    dataset: &Dataset,
    head: usize,
) -> Result<f64> {
    let classes = state.config.classes;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(64) {
        let batch = stack_images(&dataset.images, chunk);
        let pass = network_forward(state, &batch, Mode::Eval)?;
        let out = &pass.head_outputs[head];
        for (bi, &idx) in chunk.iter().enumerate() {
            let row = &out.data()[bi * classes..(bi + 1) * classes];
            let mut arg = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[arg] {
                    arg = j;
                }
            }
            if arg == dataset.labels[idx] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn validate_dataset(state: &NetworkState<f32>, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let classes = state.config.classes;
    for &label in &dataset.labels {
        if label >= classes {
            return Err(Error::Data(format!(
                "class index {label} out of range for {classes} classes"
            )));
        }
    }
    let (c, h, w) = state.config.input;
    for img in &dataset.images {
        if img.shape() != [c, h, w] {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match configured input {c}x{h}x{w}",
                img.shape()
            )));
        }
    }
    Ok(())
}

/// Splits shuffled indices into mini-batches, folding a trailing singleton
/// into the previous batch (batch norm needs at least two samples).
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let bs = batch_size.max(1);
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        ranges.push((start, end));
        start = end;
    }
    if ranges.len() >= 2 {
        let (ls, le) = *ranges.last().unwrap();
        if le - ls == 1 {
            ranges.pop();
            ranges.last_mut().unwrap().1 = le;
        }
    }
    ranges
}

/// One trial: shuffled mini-batch epochs minimizing the weighted multi-loss,
/// early-stopped on training-set identification accuracy.
pub fn run_trial(
    mut state: NetworkState<f32>,
    dataset: &Dataset,
    weights: &LossWeights,
    hyper: &TrainHyper,
    trial_index: usize,
) -> Result<(NetworkState<f32>, TrialRecord)> {
    validate_dataset(&state, dataset)?;
    let mut opt = OptimizerState::new(hyper.learning_rate, hyper.momentum, &state)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(hyper.seed ^ (trial_index as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let dominant = weights.dominant();
    let head = head_index(dominant);

    let mut stopper = EarlyStop::new(hyper.patience);
    let mut epochs_run = 0;
    let mut accuracy = 0.0;
    let mut indices: Vec<usize> = (0..dataset.len()).collect();

    for _ in 0..hyper.epoch_cap {
        indices.shuffle(&mut rng);
        for &(lo, hi) in &batch_ranges(indices.len(), hyper.batch_size) {
            let batch_idx = &indices[lo..hi];
            let batch = stack_images(&dataset.images, batch_idx);
            let targets: Vec<usize> = batch_idx.iter().map(|&i| dataset.labels[i]).collect();

            let pass = network_forward(&state, &batch, Mode::Train(&mut rng))?;
            let heads = [&pass.head_outputs[0], &pass.head_outputs[1], &pass.head_outputs[2]];
            let (_, head_grads) = dml_batch(&targets, heads, weights)?;
            let grads = network_backward(&state, &pass.cache, &head_grads)?;
            nesterov_step(&mut state, &mut opt, &grads)?;
            state.absorb_batch_stats(&pass.cache);
        }
        epochs_run += 1;
        accuracy = identification_accuracy(&state, dataset, head)?;
        if stopper.observe(accuracy) {
            break;
        }
    }

    let record = TrialRecord {
        trial_index,
        dominant,
        epochs_run,
        final_accuracy: accuracy,
        checkpoint_path: None,
    };
    Ok((state, record))
}

/// Runs `n_trials` sequential trials with the period-3 coefficient rotation,
/// snapshotting after each; when `out_dir` is given, snapshots are also
/// written as `snapshot-<t>.mlse`.
pub fn run_mlse(
    initial: NetworkState<f32>,
    dataset: &Dataset,
    n_trials: usize,
    hyper: &TrainHyper,
    out_dir: Option<&Path>,
) -> Result<SnapshotSet> {
    if n_trials == 0 {
        return Err(Error::Parameter("trial count must be at least 1".into()));
    }
    let mut state = initial;
    let mut records = Vec::with_capacity(n_trials);
    let mut states = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let weights = LossWeights::for_trial(t);
        let (next, mut record) = run_trial(state, dataset, &weights, hyper, t)?;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("snapshot-{t}.mlse"));
            save_snapshot(&next, &path)?;
            record.checkpoint_path = Some(path);
        }
        records.push(record);
        states.push(next.clone());
        state = next;
    }
    Ok(SnapshotSet { records, states })
}

/// Eval-mode penultimate activations for a batch of preprocessed images,
/// one row per image.
pub fn extract_features(
    state: &NetworkState<f32>,
    images: &[Tensor<f32>],
) -> Result<FeatureMatrix> {
    let width = state.config.feature_width()?;
    let mut out = FeatureMatrix::empty(width);
    let all: Vec<usize> = (0..images.len()).collect();
    for chunk in all.chunks(64) {
        let batch = stack_images(images, chunk);
        let pass = network_forward(state, &batch, Mode::Eval)?;
        for bi in 0..chunk.len() {
            out.push_row(&pass.penultimate.data()[bi * width..(bi + 1) * width]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, Layer, NetworkConfig};

    fn micro_config(classes: usize) -> NetworkConfig {
        NetworkConfig {
            input: (1, 6, 6),
            layers: vec![
                Layer::Fc { width: 16 },
                Layer::BatchNorm,
                Layer::Rrelu,
                Layer::Fc { width: 16 },
                Layer::BatchNorm,
                Layer::Rrelu,
            ],
            classes,
        }
    }

    /// Two linearly separable blob classes on a 6x6 canvas.
    fn toy_dataset(n_per_class: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            for _ in 0..n_per_class {
                let mut t = Tensor::zeros(&[1, 6, 6]);
                for y in 0..6 {
                    for x in 0..6 {
                        let lit = if class == 0 { x < 3 } else { x >= 3 };
                        let v = if lit { 0.7 + 0.3 * rng.gen::<f32>() } else { 0.05 * rng.gen::<f32>() };
                        t.data_mut()[y * 6 + x] = v;
                    }
                }
                images.push(t);
                labels.push(class);
            }
        }
        Dataset::new(images, labels).unwrap()
    }

    #[test]
    fn early_stop_trace_matches_rule() {
        // [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]: five non-improving epochs after
        // epoch 2 stop the run at epoch 7.
        let mut stopper = EarlyStop::new(5);
        let trace = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];
        let mut stopped_at = None;
        for (i, acc) in trace.iter().enumerate() {
            if stopper.observe(*acc) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
    }

    #[test]
    fn singleton_tail_batch_merges_into_previous() {
        assert_eq!(batch_ranges(7, 3), vec![(0, 3), (3, 7)]);
        assert_eq!(batch_ranges(6, 3), vec![(0, 3), (3, 6)]);
        assert_eq!(batch_ranges(1, 3), vec![(0, 1)]);
        assert_eq!(batch_ranges(4, 8), vec![(0, 4)]);
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let config = micro_config(2);
        let state = init_network(&config, 3).unwrap();
        let dataset = toy_dataset(8, 17);
        let hyper = TrainHyper { batch_size: 8, seed: 5, ..TrainHyper::default() };
        let (_, record) =
            run_trial(state, &dataset, &LossWeights::for_trial(0), &hyper, 0).unwrap();
        assert_eq!(record.final_accuracy, 1.0, "record: {record:?}");
        assert!(record.epochs_run <= 200);
    }

    #[test]
    fn run_trial_is_deterministic() {
        let config = micro_config(2);
        let dataset = toy_dataset(4, 8);
        let hyper = TrainHyper { batch_size: 4, epoch_cap: 6, seed: 9, ..TrainHyper::default() };
        let run = || {
            let state = init_network(&config, 21).unwrap();
            run_trial(state, &dataset, &LossWeights::for_trial(1), &hyper, 1).unwrap()
        };
        let (s1, r1) = run();
        let (s2, r2) = run();
        assert_eq!(s1, s2);
        assert_eq!(r1.epochs_run, r2.epochs_run);
        assert_eq!(r1.final_accuracy, r2.final_accuracy);
    }

    #[test]
    fn mlse_schedule_and_snapshot_count() {
        let config = micro_config(2);
        let state = init_network(&config, 4).unwrap();
        let dataset = toy_dataset(3, 2);
        let hyper = TrainHyper { batch_size: 6, epoch_cap: 2, seed: 1, ..TrainHyper::default() };
        let set = run_mlse(state, &dataset, 6, &hyper, None).unwrap();
        assert_eq!(set.len(), 6);
        let dominants: Vec<&str> = set.records.iter().map(|r| r.dominant.name()).collect();
        assert_eq!(dominants, ["ce", "hinge", "csd", "ce", "hinge", "csd"]);

        let state3 = init_network(&config, 4).unwrap();
        let set3 = run_mlse(state3, &dataset, 3, &hyper, None).unwrap();
        assert_eq!(set3.len(), 3);
    }

    #[test]
    fn trials_continue_from_previous_weights() {
        let config = micro_config(2);
        let dataset = toy_dataset(3, 2);
        let hyper = TrainHyper { batch_size: 6, epoch_cap: 3, seed: 7, ..TrainHyper::default() };

        let state = init_network(&config, 10).unwrap();
        let set = run_mlse(state, &dataset, 2, &hyper, None).unwrap();

        // Re-running trial 1 from snapshot 0 reproduces snapshot 1 exactly.
        let (redo, _) = run_trial(
            set.states[0].clone(),
            &dataset,
            &LossWeights::for_trial(1),
            &hyper,
            1,
        )
        .unwrap();
        assert_eq!(redo, set.states[1]);
    }

    #[test]
    fn empty_dataset_and_bad_labels_are_data_errors() {
        let config = micro_config(2);
        let state = init_network(&config, 1).unwrap();
        let empty = Dataset::new(vec![], vec![]).unwrap();
        let hyper = TrainHyper::default();
        assert!(matches!(
            run_trial(state.clone(), &empty, &LossWeights::for_trial(0), &hyper, 0),
            Err(Error::Data(_))
        ));

        let mut bad = toy_dataset(2, 3);
        bad.labels[0] = 9;
        assert!(matches!(
            run_trial(state, &bad, &LossWeights::for_trial(0), &hyper, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn extracted_features_are_deterministic_rows() {
        let config = micro_config(2);
        let state = init_network(&config, 6).unwrap();
        let dataset = toy_dataset(2, 4);
        let feats = extract_features(&state, &dataset.images).unwrap();
        assert_eq!(feats.rows(), 4);
        assert_eq!(feats.cols(), 16);
        let again = extract_features(&state, &dataset.images).unwrap();
        assert_eq!(feats, again);

        // Duplicating an image duplicates its feature row.
        let twice = vec![dataset.images[0].clone(), dataset.images[0].clone()];
        let f2 = extract_features(&state, &twice).unwrap();
        assert_eq!(f2.row(0), f2.row(1));
    }
}
