//! Metrics (FRR, FAR on skilled and random forgeries, EER) and the
//! writer-dependent / writer-independent experiment drivers.
//!
//! Verification accepts a query when its score is at or above the threshold.
//! EER sweeps every distinct score as a candidate threshold and returns the
//! FRR/FAR crossing, linearly interpolated between the two bracketing
//! thresholds when no exact crossing exists. Experiments pool scores across
//! users and report a single dataset-level operating point per run.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::FeatureMatrix;
use crate::corpus::{split_wd, split_wi, SignatureRecord, SplitSizes, UserSplit};
use crate::error::{Error, Result};
use crate::net::{init_network, NetworkConfig};
use crate::preprocess::{preprocess_image, read_pgm, GrayImage};
use crate::tensor::Tensor;
use crate::train::{extract_features, run_mlse, Dataset, TrainHyper, TrialRecord};
use crate::verification::{build_user_model, usmg_select, UsmgOptions};

/// Pooled decision scores for one evaluation run.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub skilled: Vec<f64>,
    pub random: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorRates {
    pub frr: f64,
    pub far_sf: f64,
    pub far_rf: Option<f64>,
}

/// Rates at a fixed threshold: FRR is the fraction of genuine scores below
/// it, FAR the fraction of forgery scores at or above it.
pub fn far_frr_at_threshold(scores: &ScoreSet, t: f64) -> Result<ErrorRates> {
    if scores.genuine.is_empty() {
        return Err(Error::Data("no genuine scores".into()));
    }
    let frac_below = |v: &[f64]| v.iter().filter(|s| **s < t).count() as f64 / v.len() as f64;
    let frac_at_or_above =
        |v: &[f64]| v.iter().filter(|s| **s >= t).count() as f64 / v.len() as f64;
    Ok(ErrorRates {
        frr: frac_below(&scores.genuine),
        far_sf: if scores.skilled.is_empty() { 0.0 } else { frac_at_or_above(&scores.skilled) },
        far_rf: if scores.random.is_empty() {
            None
        } else {
            Some(frac_at_or_above(&scores.random))
        },
    })
}

/// Equal error rate of genuine vs forgery scores, with its threshold.
///
/// Candidates are all distinct scores plus one point above the maximum.
/// FRR(t) is non-decreasing and FAR(t) non-increasing, so their difference
/// crosses zero once; an exact tie returns that candidate, otherwise the
/// crossing is linearly interpolated between the bracketing candidates.
pub fn compute_eer(genuine: &[f64], forgery: &[f64]) -> Result<(f64, f64)> {
    if genuine.is_empty() || forgery.is_empty() {
        return Err(Error::Data("EER needs nonempty genuine and forgery scores".into()));
    }
    let mut sorted_genuine = genuine.to_vec();
    sorted_genuine.sort_by(f64::total_cmp);
    let mut sorted_forgery = forgery.to_vec();
    sorted_forgery.sort_by(f64::total_cmp);

    let mut candidates: Vec<f64> = Vec::with_capacity(genuine.len() + forgery.len() + 1);
    candidates.extend_from_slice(&sorted_genuine);
    candidates.extend_from_slice(&sorted_forgery);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(candidates.last().unwrap() + 1.0);

    let frr_at = |t: f64| -> f64 {
        sorted_genuine.partition_point(|s| *s < t) as f64 / sorted_genuine.len() as f64
    };
    let far_at = |t: f64| -> f64 {
        (sorted_forgery.len() - sorted_forgery.partition_point(|s| *s < t)) as f64
            / sorted_forgery.len() as f64
    };

    let mut prev: Option<(f64, f64, f64)> = None; // (t, frr, far)
    for &t in &candidates {
        let frr = frr_at(t);
        let far = far_at(t);
        let diff = far - frr;
        if diff == 0.0 {
            return Ok((frr, t));
        }
        if diff < 0.0 {
            // First candidate has FRR = 0 <= FAR, so a bracket exists.
            let (t0, frr0, far0) = prev.expect("difference starts non-negative");
            let denom = (frr - frr0) - (far - far0);
            let tstar = t0 + (far0 - frr0) * (t - t0) / denom;
            let eer = frr0 + (frr - frr0) * (tstar - t0) / (t - t0);
            return Ok((eer, tstar));
        }
        prev = Some((t, frr, far));
    }
    unreachable!("FAR reaches 0 and FRR reaches 1 above the max score");
}

/// Network architecture selection; class count is supplied by the protocol
/// (number of identities in the feature-learning set).
#[derive(Debug, Clone)]
pub enum ArchPreset {
    Desk,
    Paper { input: (usize, usize) },
    Custom(NetworkConfig),
}

impl ArchPreset {
    pub fn build(&self, classes: usize) -> NetworkConfig {
        match self {
            ArchPreset::Desk => NetworkConfig::desk(classes),
            ArchPreset::Paper { input } => NetworkConfig::paper(classes, *input),
            ArchPreset::Custom(config) => {
                let mut c = config.clone();
                c.classes = classes;
                c
            }
        }
    }

    pub fn input_hw(&self) -> (usize, usize) {
        let c = self.build(1);
        (c.input.1, c.input.2)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub arch: ArchPreset,
    pub hyper: TrainHyper,
    pub n_trials: usize,
    pub sizes: SplitSizes,
    pub rf_multiplier: usize,
    pub usmg: UsmgOptions,
    /// Writer-independent: genuine samples enrolled per evaluated user.
    pub wi_enroll: usize,
    /// Writer-independent: genuine samples per feature-learning user.
    pub wi_fl_per_user: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            arch: ArchPreset::Desk,
            hyper: TrainHyper::default(),
            n_trials: 6,
            sizes: SplitSizes::default(),
            rf_multiplier: 10,
            usmg: UsmgOptions::default(),
            wi_enroll: 10,
            wi_fl_per_user: 10,
        }
    }
}

/// Manifest records plus their loaded images.
pub struct CorpusData {
    pub records: Vec<SignatureRecord>,
    pub images: Vec<GrayImage>,
}

impl CorpusData {
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = crate::corpus::load_manifest(manifest)?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let images = records
            .iter()
            .map(|r| read_pgm(&base.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CorpusData { records, images })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunMetrics {
    pub frr_sf: f64,
    pub far_rf: f64,
    pub far_sf: f64,
    pub eer_sf: f64,
    pub threshold: f64,
}

impl RunMetrics {
    fn fields(&self) -> [f64; 5] {
        [self.frr_sf, self.far_rf, self.far_sf, self.eer_sf, self.threshold]
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }
}

/// Per-run diagnostics beyond the reported metrics.
#[derive(Debug, Clone)]
pub struct RunExtras {
    pub mv_eer: f64,
    pub best_single_eer: f64,
    pub single_eers: Vec<f64>,
    pub trial_records: Vec<TrialRecord>,
}

pub struct EvalReport {
    pub runs: Vec<RunMetrics>,
    pub extras: Vec<RunExtras>,
    pub mean: RunMetrics,
    pub std: RunMetrics,
    /// Pooled scores of the first run, kept for threshold-sweep exports.
    pub first_run_scores: ScoreSet,
}

fn aggregate(runs: &[RunMetrics]) -> (RunMetrics, RunMetrics) {
    let n = runs.len() as f64;
    let mut mean = [0.0f64; 5];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.fields()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0f64; 5];
    for r in runs {
        for ((v, m), x) in var.iter_mut().zip(mean).zip(r.fields()) {
            *v += (x - m) * (x - m);
        }
    }
    let from = |f: [f64; 5]| RunMetrics {
        frr_sf: f[0],
        far_rf: f[1],
        far_sf: f[2],
        eer_sf: f[3],
        threshold: f[4],
    };
    let std = var.map(|v| (v / (n - 1.0)).sqrt());
    (from(mean), from(std))
}

impl EvalReport {
    fn new(rows: Vec<(RunMetrics, RunExtras, ScoreSet)>) -> Self {
        let runs: Vec<RunMetrics> = rows.iter().map(|(m, _, _)| *m).collect();
        let extras: Vec<RunExtras> = rows.iter().map(|(_, e, _)| e.clone()).collect();
        let first_run_scores = rows[0].2.clone();
        let (mean, std) = aggregate(&runs);
        EvalReport { runs, extras, mean, std, first_run_scores }
    }

    /// Pinned CSV layout: one row per run plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,frr_sf,far_rf,far_sf,eer_sf,threshold\n");
        let row = |label: &str, m: &RunMetrics| {
            format!(
                "{label},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.frr_sf, m.far_rf, m.far_sf, m.eer_sf, m.threshold
            )
        };
        for (i, m) in self.runs.iter().enumerate() {
            out.push_str(&row(&(i + 1).to_string(), m));
        }
        out.push_str(&row("mean", &self.mean));
        out.push_str(&row("std", &self.std));
        out
    }
}

/// Threshold-sweep CSV (`threshold,frr,far_sf,far_rf`) over all distinct
/// pooled scores, for external plotting.
pub fn sweep_csv(scores: &ScoreSet) -> Result<String> {
    let mut candidates: Vec<f64> = scores
        .genuine
        .iter()
        .chain(&scores.skilled)
        .chain(&scores.random)
        .copied()
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut out = String::from("threshold,frr,far_sf,far_rf\n");
    for t in candidates {
        let rates = far_frr_at_threshold(scores, t)?;
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6}\n",
            t,
            rates.frr,
            rates.far_sf,
            rates.far_rf.unwrap_or(f64::NAN)
        ));
    }
    Ok(out)
}

fn mix(seed: u64, a: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct DirectionOutcome {
    metrics: RunMetrics,
    extras: RunExtras,
    usmg_scores: ScoreSet,
}

/// One full pipeline pass: train MLSE on the feature-learning pairs, build
/// and select per-user SVM ensembles, score the test sets, pool across users
/// and compute the operating point.
fn evaluate_direction(
    tensors: &[Tensor<f32>],
    fl_pairs: &[(usize, usize)],
    n_classes: usize,
    eval_users: &[UserSplit],
    config: &PipelineConfig,
    run_seed: u64,
) -> Result<DirectionOutcome> {
    let net_config = config.arch.build(n_classes);
    let dataset = Dataset::new(
        fl_pairs.iter().map(|(rec, _)| tensors[*rec].clone()).collect(),
        fl_pairs.iter().map(|(_, class)| *class).collect(),
    )?;
    let state = init_network(&net_config, mix(run_seed, 1))?;
    let hyper = TrainHyper { seed: mix(run_seed, 2), ..config.hyper.clone() };
    let snapshots = run_mlse(state, &dataset, config.n_trials, &hyper, None)?;

    // Penultimate features of every corpus image, per snapshot.
    let all_features: Vec<FeatureMatrix> = snapshots
        .states
        .iter()
        .map(|s| extract_features(s, tensors))
        .collect::<Result<_>>()?;

    // SVM training pools: each user's enrolled genuine rows.
    let enrolled: Vec<Vec<usize>> = eval_users.iter().map(|u| u.svm_positives()).collect();
    let pools: Vec<BTreeMap<usize, FeatureMatrix>> = all_features
        .iter()
        .map(|feats| {
            eval_users
                .iter()
                .zip(&enrolled)
                .map(|(u, rows)| (u.user_id, gather(feats, rows)))
                .collect()
        })
        .collect();

    // Build and select per-user models (order-preserving parallel map).
    let models: Vec<_> = eval_users
        .par_iter()
        .zip(enrolled.par_iter())
        .map(|(user, rows)| -> Result<_> {
            let genuine: Vec<FeatureMatrix> =
                all_features.iter().map(|feats| gather(feats, rows)).collect();
            let mut model = build_user_model(
                user.user_id,
                &genuine,
                &pools,
                config.rf_multiplier,
                mix(run_seed, 3),
            )?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(run_seed, 4) ^ (user.user_id as u64) << 32);
            let idx = usmg_select(&model, &genuine, &pools, &config.usmg, &mut rng)?;
            model.selected_index = Some(idx);
            Ok(model)
        })
        .collect::<Result<_>>()?;

    // Score pooled test sets for every combiner.
    let n_snapshots = config.n_trials;
    let mut usmg_scores = ScoreSet::default();
    let mut mv_scores = ScoreSet::default();
    let mut single_scores: Vec<ScoreSet> = vec![ScoreSet::default(); n_snapshots];

    let mut push_scores = |model: &crate::verification::UserModel,
                           rec: usize,
                           bucket: fn(&mut ScoreSet) -> &mut Vec<f64>| {
        let sel = model.selected_index.expect("selected above");
        bucket(&mut usmg_scores).push(model.svms[sel].decision(all_features[sel].row(rec)));
        let mut mean = 0.0;
        for (s, svm) in model.svms.iter().enumerate() {
            let d = svm.decision(all_features[s].row(rec));
            mean += d;
            bucket(&mut single_scores[s]).push(d);
        }
        bucket(&mut mv_scores).push(mean / model.svms.len() as f64);
    };

    for (ui, user) in eval_users.iter().enumerate() {
        for &rec in &user.test_genuine {
            push_scores(&models[ui], rec, |s| &mut s.genuine);
        }
        for &rec in &user.test_skilled {
            push_scores(&models[ui], rec, |s| &mut s.skilled);
        }
        // Random forgeries: other users' test genuine, never seen by this
        // user's SVMs.
        for (vi, other) in eval_users.iter().enumerate() {
            if vi == ui {
                continue;
            }
            for &rec in &other.test_genuine {
                push_scores(&models[ui], rec, |s| &mut s.random);
            }
        }
    }

    let (eer, threshold) = compute_eer(&usmg_scores.genuine, &usmg_scores.skilled)?;
    let rates = far_frr_at_threshold(&usmg_scores, threshold)?;
    let metrics = RunMetrics {
        frr_sf: rates.frr,
        far_rf: rates.far_rf.unwrap_or(0.0),
        far_sf: rates.far_sf,
        eer_sf: eer,
        threshold,
    };

    let (mv_eer, _) = compute_eer(&mv_scores.genuine, &mv_scores.skilled)?;
    let single_eers: Vec<f64> = single_scores
        .iter()
        .map(|s| compute_eer(&s.genuine, &s.skilled).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    let best_single_eer = single_eers.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(DirectionOutcome {
        metrics,
        extras: RunExtras {
            mv_eer,
            best_single_eer,
            single_eers,
            trial_records: snapshots.records,
        },
        usmg_scores,
    })
}

fn gather(feats: &FeatureMatrix, rows: &[usize]) -> FeatureMatrix {
    let mut out = FeatureMatrix::empty(feats.cols());
    for &r in rows {
        out.push_row(feats.row(r));
    }
    out
}

fn preprocess_all(data: &CorpusData, arch: &ArchPreset) -> Vec<Tensor<f32>> {
    let (h, w) = arch.input_hw();
    data.images.iter().map(|img| preprocess_image(img, h, w)).collect()
}

/// Writer-dependent evaluation: per run, a fresh split, MLSE training on all
/// users' feature-learning genuine, enrollment, selection, and a pooled
/// operating point. Runs are independent and seeded from `seed`.
pub fn evaluate_wd(
    data: &CorpusData,
    config: &PipelineConfig,
    runs: usize,
    seed: u64,
) -> Result<EvalReport> {
    if runs < 2 {
        return Err(Error::Parameter("report statistics need at least 2 runs".into()));
    }
    let tensors = preprocess_all(data, &config.arch);

    let rows: Vec<(RunMetrics, RunExtras, ScoreSet)> = (0..runs)
        .into_par_iter()
        .map(|run| -> Result<_> {
            let run_seed = mix(seed, 0x0D00 + run as u64);
            let split = split_wd(&data.records, &config.sizes, run_seed)?;
            let fl_pairs: Vec<(usize, usize)> = split
                .users
                .iter()
                .enumerate()
                .flat_map(|(class, u)| {
                    u.feature_learning.iter().map(move |rec| (*rec, class))
                })
                .collect();
            let outcome = evaluate_direction(
                &tensors,
                &fl_pairs,
                split.users.len(),
                &split.users,
                config,
                run_seed,
            )?;
            Ok((outcome.metrics, outcome.extras, outcome.usmg_scores))
        })
        .collect::<Result<_>>()?;

    Ok(EvalReport::new(rows))
}

/// Writer-independent evaluation: per repetition, a 20/80 user partition is
/// evaluated in both directions (learn on A / evaluate B, then swapped),
/// yielding 2*reps runs.
pub fn evaluate_wi(
    data: &CorpusData,
    config: &PipelineConfig,
    reps: usize,
    seed: u64,
) -> Result<EvalReport> {
    if reps < 1 {
        return Err(Error::Parameter("at least one repetition".into()));
    }
    let tensors = preprocess_all(data, &config.arch);

    let directions: Vec<(usize, usize)> =
        (0..reps).flat_map(|rep| [(rep, 0usize), (rep, 1usize)]).collect();
    let rows: Vec<(RunMetrics, RunExtras, ScoreSet)> = directions
        .into_par_iter()
        .map(|(rep, dir)| -> Result<_> {
            let rep_seed = mix(seed, 0x11 + rep as u64);
            let (ab, ba) =
                split_wi(&data.records, config.wi_enroll, config.wi_fl_per_user, rep_seed)?;
            let split = if dir == 0 { ab } else { ba };
            let feature_users = split.feature_users.as_ref().expect("wi split");
            let fl_pairs: Vec<(usize, usize)> = feature_users
                .iter()
                .enumerate()
                .flat_map(|(class, (_, recs))| recs.iter().map(move |rec| (*rec, class)))
                .collect();
            let outcome = evaluate_direction(
                &tensors,
                &fl_pairs,
                feature_users.len(),
                &split.users,
                config,
                mix(rep_seed, dir as u64 + 1),
            )?;
            Ok((outcome.metrics, outcome.extras, outcome.usmg_scores))
        })
        .collect::<Result<_>>()?;

    Ok(EvalReport::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rates_at_threshold_examples() {
        let scores = ScoreSet {
            genuine: vec![0.9, 0.8],
            skilled: vec![0.1, 0.2],
            random: vec![],
        };
        let r = far_frr_at_threshold(&scores, 0.5).unwrap();
        assert_eq!((r.frr, r.far_sf), (0.0, 0.0));
        assert!(r.far_rf.is_none());

        let r = far_frr_at_threshold(&scores, f64::NEG_INFINITY).unwrap();
        assert_eq!((r.frr, r.far_sf), (0.0, 1.0));

        let mixed = ScoreSet {
            genuine: vec![0.8, 0.2],
            skilled: vec![0.7, 0.3],
            random: vec![],
        };
        let r = far_frr_at_threshold(&mixed, 0.5).unwrap();
        assert_eq!((r.frr, r.far_sf), (0.5, 0.5));
    }

    #[test]
    fn empty_genuine_is_a_data_error() {
        let scores = ScoreSet::default();
        assert!(matches!(far_frr_at_threshold(&scores, 0.0), Err(Error::Data(_))));
        assert!(compute_eer(&[], &[1.0]).is_err());
    }

    #[test]
    fn eer_of_separated_scores_is_zero() {
        let (eer, t) = compute_eer(&[0.9, 0.8, 0.7], &[0.1, 0.2]).unwrap();
        assert_eq!(eer, 0.0);
        assert!(t > 0.2 && t <= 0.7);
    }

    #[test]
    fn eer_interleaved_example() {
        let (eer, _) = compute_eer(&[0.8, 0.2], &[0.7, 0.3]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12, "eer {eer}");
    }

    /// Independent oracle: naive counting at every candidate plus the same
    /// interpolation rule, written without sorting tricks.
    fn eer_oracle(genuine: &[f64], forgery: &[f64]) -> (f64, f64) {
        let mut candidates: Vec<f64> = genuine.iter().chain(forgery).copied().collect();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        candidates.push(candidates.last().unwrap() + 1.0);
        let frr = |t: f64| genuine.iter().filter(|s| **s < t).count() as f64 / genuine.len() as f64;
        let far =
            |t: f64| forgery.iter().filter(|s| **s >= t).count() as f64 / forgery.len() as f64;
        let mut prev: Option<f64> = None;
        for &t in &candidates {
            let d = far(t) - frr(t);
            if d == 0.0 {
                return (frr(t), t);
            }
            if d < 0.0 {
                let t0 = prev.unwrap();
                let (f0, a0) = (frr(t0), far(t0));
                let (f1, a1) = (frr(t), far(t));
                let denom = (f1 - f0) - (a1 - a0);
                let tstar = t0 + (a0 - f0) * (t - t0) / denom;
                return (f0 + (f1 - f0) * (tstar - t0) / (t - t0), tstar);
            }
            prev = Some(t);
        }
        unreachable!()
    }

    #[test]
    fn eer_matches_oracle_on_random_score_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..60 {
            let ng = rng.gen_range(1..40);
            let nf = rng.gen_range(1..40);
            let genuine: Vec<f64> = (0..ng).map(|_| rng.gen::<f64>() * 4.0 - 1.0).collect();
            let forgery: Vec<f64> = (0..nf).map(|_| rng.gen::<f64>() * 4.0 - 1.0).collect();
            let (eer, t) = compute_eer(&genuine, &forgery).unwrap();
            let (oe, ot) = eer_oracle(&genuine, &forgery);
            assert!((eer - oe).abs() < 1e-9, "eer {eer} vs oracle {oe}");
            assert!((t - ot).abs() < 1e-9, "threshold {t} vs oracle {ot}");
            assert!((0.0..=1.0).contains(&eer));
        }
    }

    #[test]
    fn frr_monotone_far_antitone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = ScoreSet {
            genuine: (0..25).map(|_| rng.gen::<f64>()).collect(),
            skilled: (0..25).map(|_| rng.gen::<f64>()).collect(),
            random: (0..10).map(|_| rng.gen::<f64>()).collect(),
        };
        let mut prev_frr = -1.0;
        let mut prev_far = 2.0;
        for i in 0..50 {
            let t = i as f64 / 49.0;
            let r = far_frr_at_threshold(&scores, t).unwrap();
            assert!(r.frr >= prev_frr);
            assert!(r.far_sf <= prev_far);
            prev_frr = r.frr;
            prev_far = r.far_sf;
        }
    }

    #[test]
    fn eer_is_invariant_to_positive_scaling() {
        let genuine = vec![0.9, 0.5, 0.4, 0.8];
        let forgery = vec![0.45, 0.3, 0.6, 0.1];
        let (e1, t1) = compute_eer(&genuine, &forgery).unwrap();
        let scale = 7.5;
        let g2: Vec<f64> = genuine.iter().map(|v| v * scale).collect();
        let f2: Vec<f64> = forgery.iter().map(|v| v * scale).collect();
        let (e2, t2) = compute_eer(&g2, &f2).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
        assert!((t1 * scale - t2).abs() < 1e-9);
    }

    #[test]
    fn identical_score_distributions_give_eer_half() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let (eer, _) = compute_eer(&scores, &scores).unwrap();
        assert!((eer - 0.5).abs() < 0.03, "eer {eer}");
    }

    #[test]
    fn aggregate_mean_and_unbiased_std() {
        let m = |e: f64| RunMetrics {
            frr_sf: e,
            far_rf: 0.0,
            far_sf: 0.0,
            eer_sf: e,
            threshold: 1.0,
        };
        let (mean, std) = aggregate(&[m(0.1), m(0.3)]);
        assert!((mean.eer_sf - 0.2).abs() < 1e-12);
        // Sample std of {0.1, 0.3} with n-1: sqrt(2*(0.1)^2 / 1) = 0.1*sqrt(2).
        assert!((std.eer_sf - 0.1 * 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(std.threshold, 0.0);
    }

    #[test]
    fn csv_layout_is_pinned() {
        let rows = vec![(
            RunMetrics { frr_sf: 0.1, far_rf: 0.0, far_sf: 0.2, eer_sf: 0.15, threshold: 0.5 },
            RunExtras {
                mv_eer: 0.2,
                best_single_eer: 0.25,
                single_eers: vec![0.25],
                trial_records: vec![],
            },
            ScoreSet::default(),
        ); 2];
        let report = EvalReport::new(rows);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run,frr_sf,far_rf,far_sf,eer_sf,threshold");
        assert_eq!(lines.len(), 1 + 2 + 2);
        assert!(lines[1].starts_with("1,0.100000,"));
        assert!(lines[3].starts_with("mean,"));
        assert!(lines[4].starts_with("std,"));
    }
}
