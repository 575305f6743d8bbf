//! Synthetic desk-scale signature corpus: per-user stroke templates rendered
//! as PGM files, plus manifest loading and protocol splitting.
//!
//! Each user gets a seeded set of cubic Bezier strokes. Genuine samples jitter
//! the template lightly (control-point noise plus a small global affine);
//! skilled forgeries jitter it harder and may drop or add a stroke, so they
//! stay closer to their target's template than to other users'.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::preprocess::{write_pgm, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Genuine,
    Skilled,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Genuine => "genuine",
            Kind::Skilled => "skilled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureRecord {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub user_id: usize,
    pub kind: Kind,
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_users: usize,
    pub n_genuine: usize,
    pub n_skilled: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { n_users: 20, n_genuine: 20, n_skilled: 10, image_size: 32, seed: 0 }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over a tagged combination; decorrelates per-image streams.
    let mut z = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

type Point = (f64, f64);

/// Cubic Bezier control points in the unit square.
#[derive(Clone)]
struct Stroke {
    points: [Point; 4],
}

#[derive(Clone)]
struct Template {
    strokes: Vec<Stroke>,
}

fn random_stroke(rng: &mut ChaCha8Rng) -> Stroke {
    let p = |rng: &mut ChaCha8Rng| -> Point {
        (0.12 + 0.76 * rng.gen::<f64>(), 0.12 + 0.76 * rng.gen::<f64>())
    };
    Stroke { points: [p(rng), p(rng), p(rng), p(rng)] }
}

fn user_template(spec: &CorpusSpec, user: usize) -> Template {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, user as u64, 0xA11CE));
    let n_strokes = rng.gen_range(2..=4);
    Template { strokes: (0..n_strokes).map(|_| random_stroke(&mut rng)).collect() }
}

struct Jitter {
    point_sigma: f64,
    max_rotation: f64,
    scale_range: (f64, f64),
    max_shift: f64,
    stroke_edit_prob: f64,
}

const GENUINE_JITTER: Jitter = Jitter {
    point_sigma: 0.015,
    max_rotation: 0.09,
    scale_range: (0.94, 1.06),
    max_shift: 0.03,
    stroke_edit_prob: 0.0,
};

const SKILLED_JITTER: Jitter = Jitter {
    point_sigma: 0.045,
    max_rotation: 0.2,
    scale_range: (0.88, 1.12),
    max_shift: 0.06,
    stroke_edit_prob: 0.3,
};

fn perturb(template: &Template, jitter: &Jitter, rng: &mut ChaCha8Rng) -> Template {
    let mut strokes = template.strokes.clone();
    if rng.gen::<f64>() < jitter.stroke_edit_prob && strokes.len() > 2 {
        let victim = rng.gen_range(0..strokes.len());
        strokes.remove(victim);
    }
    if rng.gen::<f64>() < jitter.stroke_edit_prob {
        strokes.push(random_stroke(rng));
    }

    let angle = (rng.gen::<f64>() * 2.0 - 1.0) * jitter.max_rotation;
    let scale = jitter.scale_range.0 + rng.gen::<f64>() * (jitter.scale_range.1 - jitter.scale_range.0);
    let shift_x = (rng.gen::<f64>() * 2.0 - 1.0) * jitter.max_shift;
    let shift_y = (rng.gen::<f64>() * 2.0 - 1.0) * jitter.max_shift;
    let (sin, cos) = angle.sin_cos();

    let map = |(x, y): Point, rng: &mut ChaCha8Rng| -> Point {
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let (x, y) = (x + nx * jitter.point_sigma, y + ny * jitter.point_sigma);
        // rotate and scale about the canvas center, then shift
        let (cx, cy) = (x - 0.5, y - 0.5);
        (
            0.5 + scale * (cx * cos - cy * sin) + shift_x,
            0.5 + scale * (cx * sin + cy * cos) + shift_y,
        )
    };

    Template {
        strokes: strokes
            .into_iter()
            .map(|s| Stroke { points: s.points.map(|p| map(p, rng)) })
            .collect(),
    }
}

fn bezier(points: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let b0 = u * u * u;
    let b1 = 3.0 * u * u * t;
    let b2 = 3.0 * u * t * t;
    let b3 = t * t * t;
    (
        b0 * points[0].0 + b1 * points[1].0 + b2 * points[2].0 + b3 * points[3].0,
        b0 * points[0].1 + b1 * points[1].1 + b2 * points[2].1 + b3 * points[3].1,
    )
}

fn render(template: &Template, size: usize, ink: u8) -> GrayImage {
    let mut img = GrayImage::filled(size, size, 255);
    let steps = size * 4;
    let radius = (size as f64 / 40.0).max(0.6);
    let r_int = radius.ceil() as isize;
    for stroke in &template.strokes {
        for i in 0..=steps {
            let (x, y) = bezier(&stroke.points, i as f64 / steps as f64);
            let px = x * size as f64;
            let py = y * size as f64;
            let cx = px.floor() as isize;
            let cy = py.floor() as isize;
            for dy in -r_int..=r_int {
                for dx in -r_int..=r_int {
                    let (qx, qy) = (cx + dx, cy + dy);
                    if qx < 0 || qy < 0 || qx >= size as isize || qy >= size as isize {
                        continue;
                    }
                    let dist =
                        ((qx as f64 + 0.5 - px).powi(2) + (qy as f64 + 0.5 - py).powi(2)).sqrt();
                    if dist <= radius {
                        let p = &mut img.pixels[qy as usize * size + qx as usize];
                        *p = (*p).min(ink);
                    }
                }
            }
        }
    }
    img
}

fn file_name(user: usize, kind: Kind, index: usize) -> String {
    let tag = match kind {
        Kind::Genuine => 'g',
        Kind::Skilled => 's',
    };
    format!("u{user:02}_{tag}{index:02}.pgm")
}

/// Generates the corpus under `out_dir` and writes `manifest.tsv`; returns
/// the records in manifest order. Byte-identical output for a given spec.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<SignatureRecord>> {
    if spec.n_users == 0 || spec.n_genuine == 0 || spec.n_skilled == 0 || spec.image_size == 0 {
        return Err(Error::Parameter("corpus counts and image size must be positive".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut records = Vec::new();
    for user in 0..spec.n_users {
        let template = user_template(spec, user);
        for (kind, count, jitter, tag) in [
            (Kind::Genuine, spec.n_genuine, &GENUINE_JITTER, 1u64),
            (Kind::Skilled, spec.n_skilled, &SKILLED_JITTER, 2u64),
        ] {
            for index in 0..count {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(spec.seed, user as u64, tag << 32 | index as u64));
                let variant = perturb(&template, jitter, &mut rng);
                let ink = rng.gen_range(25..=70) as u8;
                let img = render(&variant, spec.image_size, ink);
                let name = file_name(user, kind, index);
                write_pgm(&out_dir.join(&name), &img)?;
                records.push(SignatureRecord { path: PathBuf::from(name), user_id: user, kind });
            }
        }
    }

    write_manifest(&out_dir.join("manifest.tsv"), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[SignatureRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&format!("{}\t{}\t{}\n", r.path.display(), r.user_id, r.kind.as_str()));
    }
    write_atomic(path, text.as_bytes())
}

/// Parses a manifest: one `<path>\t<user_id>\t<genuine|skilled>` per line.
pub fn load_manifest(path: &Path) -> Result<Vec<SignatureRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| {
            Error::Parse(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        if parts.len() != 3 {
            return Err(bad("expected three tab-separated fields"));
        }
        let user_id: usize = parts[1].parse().map_err(|_| bad("bad user id"))?;
        let kind = match parts[2] {
            "genuine" => Kind::Genuine,
            "skilled" => Kind::Skilled,
            other => return Err(bad(&format!("unknown kind {other:?}"))),
        };
        records.push(SignatureRecord { path: PathBuf::from(parts[0]), user_id, kind });
    }
    Ok(records)
}

/// Sample-count knobs for the writer-dependent split.
#[derive(Debug, Clone, Copy)]
pub struct SplitSizes {
    /// Genuine samples per user for CNN feature learning.
    pub feature_learning: usize,
    /// Additional genuine samples per user for SVM training.
    pub svm_extra: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { feature_learning: 6, svm_extra: 4 }
    }
}

/// Per-user record indices into the manifest.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub user_id: usize,
    pub feature_learning: Vec<usize>,
    pub svm_extra: Vec<usize>,
    pub test_genuine: Vec<usize>,
    pub test_skilled: Vec<usize>,
}

impl UserSplit {
    /// Record indices of the SVM positive class (feature-learning genuine
    /// plus the extra genuine; for writer-independent enrollment only the
    /// latter is populated).
    pub fn svm_positives(&self) -> Vec<usize> {
        let mut v = self.feature_learning.clone();
        v.extend_from_slice(&self.svm_extra);
        v
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolSplit {
    /// Users that are enrolled and evaluated, ordered by user id.
    pub users: Vec<UserSplit>,
    /// Writer-independent only: the disjoint user set whose genuine samples
    /// feed CNN feature learning, with their record indices.
    pub feature_users: Option<Vec<(usize, Vec<usize>)>>,
}

fn per_user_indices(records: &[SignatureRecord]) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
    let mut users: Vec<usize> = records.iter().map(|r| r.user_id).collect();
    users.sort_unstable();
    users.dedup();
    users
        .into_iter()
        .map(|u| {
            let genuine: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.user_id == u && r.kind == Kind::Genuine)
                .map(|(i, _)| i)
                .collect();
            let skilled: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.user_id == u && r.kind == Kind::Skilled)
                .map(|(i, _)| i)
                .collect();
            (u, genuine, skilled)
        })
        .collect()
}

fn shuffled<R: Rng>(mut v: Vec<usize>, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
    v
}

/// Writer-dependent split: per user, sample `feature_learning` genuine plus
/// `svm_extra` more; remaining genuine and all skilled are test.
pub fn split_wd(
    records: &[SignatureRecord],
    sizes: &SplitSizes,
    seed: u64,
) -> Result<ProtocolSplit> {
    let mut users = Vec::new();
    for (user_id, genuine, skilled) in per_user_indices(records) {
        let need = sizes.feature_learning + sizes.svm_extra;
        if genuine.len() < need {
            return Err(Error::Data(format!(
                "user {user_id} has {} genuine samples, split needs {need}",
                genuine.len()
            )));
        }
        if genuine.is_empty() {
            return Err(Error::Data(format!("user {user_id} referenced by skilled records only")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, user_id as u64, 0x5D));
        let order = shuffled(genuine, &mut rng);
        users.push(UserSplit {
            user_id,
            feature_learning: order[..sizes.feature_learning].to_vec(),
            svm_extra: order[sizes.feature_learning..need].to_vec(),
            test_genuine: order[need..].to_vec(),
            test_skilled: skilled,
        });
    }
    Ok(ProtocolSplit { users, feature_users: None })
}

/// Writer-independent split: partitions users 20/80 and returns both fold
/// directions (A learns features / B is evaluated, then swapped). Evaluated
/// users enroll `enroll` genuine samples; feature users contribute
/// `fl_per_user` genuine samples each.
pub fn split_wi(
    records: &[SignatureRecord],
    enroll: usize,
    fl_per_user: usize,
    seed: u64,
) -> Result<(ProtocolSplit, ProtocolSplit)> {
    let per_user = per_user_indices(records);
    if per_user.len() < 5 {
        return Err(Error::Data(format!(
            "writer-independent split needs at least 5 users, got {}",
            per_user.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, 0x37));
    let order = shuffled((0..per_user.len()).collect(), &mut rng);
    let a_len = (per_user.len() / 5).max(1);
    let fold_a: Vec<usize> = order[..a_len].to_vec();
    let fold_b: Vec<usize> = order[a_len..].to_vec();

    let build = |learn: &[usize], eval: &[usize]| -> Result<ProtocolSplit> {
        let mut feature_users = Vec::new();
        for &i in learn {
            let (user_id, ref genuine, _) = per_user[i];
            if genuine.len() < fl_per_user {
                return Err(Error::Data(format!(
                    "user {user_id} has {} genuine samples, feature learning needs {fl_per_user}",
                    genuine.len()
                )));
            }
            let mut urng = ChaCha8Rng::seed_from_u64(mix(seed, user_id as u64, 0x71));
            let order = shuffled(genuine.clone(), &mut urng);
            feature_users.push((user_id, order[..fl_per_user].to_vec()));
        }
        feature_users.sort_by_key(|(u, _)| *u);

        let mut users = Vec::new();
        for &i in eval {
            let (user_id, ref genuine, ref skilled) = per_user[i];
            if genuine.len() < enroll {
                return Err(Error::Data(format!(
                    "user {user_id} has {} genuine samples, enrollment needs {enroll}",
                    genuine.len()
                )));
            }
            let mut urng = ChaCha8Rng::seed_from_u64(mix(seed, user_id as u64, 0x72));
            let order = shuffled(genuine.clone(), &mut urng);
            users.push(UserSplit {
                user_id,
                feature_learning: Vec::new(),
                svm_extra: order[..enroll].to_vec(),
                test_genuine: order[enroll..].to_vec(),
                test_skilled: skilled.clone(),
            });
        }
        users.sort_by_key(|u| u.user_id);
        Ok(ProtocolSplit { users, feature_users: Some(feature_users) })
    };

    Ok((build(&fold_a, &fold_b)?, build(&fold_b, &fold_a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{binarize_invert, otsu_threshold, read_pgm};

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mlse-corpus-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn record_count_matches_request() {
        let dir = temp_dir("count");
        let spec = CorpusSpec { n_users: 4, n_genuine: 3, n_skilled: 2, image_size: 16, seed: 1 };
        let records = generate_corpus(&spec, &dir).unwrap();
        assert_eq!(records.len(), 4 * (3 + 2));
        let genuine = records.iter().filter(|r| r.kind == Kind::Genuine).count();
        assert_eq!(genuine, 12);
    }

    #[test]
    fn generation_is_byte_identical_under_seed() {
        let spec = CorpusSpec { n_users: 2, n_genuine: 2, n_skilled: 1, image_size: 16, seed: 9 };
        let d1 = temp_dir("det1");
        let d2 = temp_dir("det2");
        let r1 = generate_corpus(&spec, &d1).unwrap();
        let r2 = generate_corpus(&spec, &d2).unwrap();
        assert_eq!(r1, r2);
        for r in &r1 {
            let a = fs::read(d1.join(&r.path)).unwrap();
            let b = fs::read(d2.join(&r.path)).unwrap();
            assert_eq!(a, b, "file {:?}", r.path);
        }
        assert_eq!(
            fs::read(d1.join("manifest.tsv")).unwrap(),
            fs::read(d2.join("manifest.tsv")).unwrap()
        );
    }

    fn ink_mask(img: &GrayImage) -> Vec<bool> {
        let t = otsu_threshold(img);
        binarize_invert(img, t).pixels.iter().map(|&p| p > 0).collect()
    }

    fn overlap(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
        let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    #[test]
    fn skilled_forgeries_overlap_their_target_more_than_other_users() {
        let dir = temp_dir("overlap");
        let spec = CorpusSpec { n_users: 6, n_genuine: 5, n_skilled: 4, image_size: 32, seed: 3 };
        let records = generate_corpus(&spec, &dir).unwrap();
        let masks: Vec<(usize, Kind, Vec<bool>)> = records
            .iter()
            .map(|r| (r.user_id, r.kind, ink_mask(&read_pgm(&dir.join(&r.path)).unwrap())))
            .collect();

        let mut same_user = Vec::new();
        let mut cross_user = Vec::new();
        for (u1, k1, m1) in &masks {
            if *k1 != Kind::Genuine {
                continue;
            }
            for (u2, k2, m2) in &masks {
                match (k2, u1 == u2) {
                    (Kind::Skilled, true) => same_user.push(overlap(m1, m2)),
                    (Kind::Genuine, false) => cross_user.push(overlap(m1, m2)),
                    _ => {}
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&same_user) > mean(&cross_user),
            "same-user skilled overlap {} vs cross-user genuine {}",
            mean(&same_user),
            mean(&cross_user)
        );
    }

    #[test]
    fn manifest_round_trip_and_parse_errors() {
        let dir = temp_dir("manifest");
        let records = vec![
            SignatureRecord { path: "a.pgm".into(), user_id: 0, kind: Kind::Genuine },
            SignatureRecord { path: "b.pgm".into(), user_id: 1, kind: Kind::Skilled },
        ];
        let path = dir.join("manifest.tsv");
        write_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), records);

        fs::write(&path, "x.pgm\t0\tgenuine\ny.pgm\t1\tfake\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");

        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    fn toy_records(n_users: usize, n_genuine: usize, n_skilled: usize) -> Vec<SignatureRecord> {
        let mut records = Vec::new();
        for u in 0..n_users {
            for g in 0..n_genuine {
                records.push(SignatureRecord {
                    path: format!("u{u}g{g}.pgm").into(),
                    user_id: u,
                    kind: Kind::Genuine,
                });
            }
            for s in 0..n_skilled {
                records.push(SignatureRecord {
                    path: format!("u{u}s{s}.pgm").into(),
                    user_id: u,
                    kind: Kind::Skilled,
                });
            }
        }
        records
    }

    #[test]
    fn wd_split_sizes_and_disjointness() {
        let records = toy_records(3, 20, 10);
        let split = split_wd(&records, &SplitSizes::default(), 7).unwrap();
        assert_eq!(split.users.len(), 3);
        for user in &split.users {
            assert_eq!(user.feature_learning.len(), 6);
            assert_eq!(user.svm_extra.len(), 4);
            assert_eq!(user.test_genuine.len(), 10);
            assert_eq!(user.test_skilled.len(), 10);
            let mut train = user.svm_positives();
            train.sort_unstable();
            for t in &user.test_genuine {
                assert!(!train.contains(t));
            }
        }
        // Deterministic under seed.
        let again = split_wd(&records, &SplitSizes::default(), 7).unwrap();
        assert_eq!(split.users[0].feature_learning, again.users[0].feature_learning);
    }

    #[test]
    fn wd_split_rejects_short_users() {
        let records = toy_records(2, 8, 2);
        let err = split_wd(&records, &SplitSizes::default(), 1).unwrap_err();
        assert!(err.to_string().contains("user"), "{err}");
    }

    #[test]
    fn wi_split_folds_are_disjoint_and_asymmetric() {
        let records = toy_records(20, 20, 10);
        let (ab, ba) = split_wi(&records, 10, 10, 5).unwrap();
        let learn_a: Vec<usize> =
            ab.feature_users.as_ref().unwrap().iter().map(|(u, _)| *u).collect();
        let eval_a: Vec<usize> = ab.users.iter().map(|u| u.user_id).collect();
        assert_eq!(learn_a.len(), 4);
        assert_eq!(eval_a.len(), 16);
        for u in &learn_a {
            assert!(!eval_a.contains(u));
        }
        // Swapped direction uses the same partition with roles exchanged.
        let learn_b: Vec<usize> =
            ba.feature_users.as_ref().unwrap().iter().map(|(u, _)| *u).collect();
        assert_eq!(learn_b, eval_a);
        for user in &ab.users {
            assert_eq!(user.svm_extra.len(), 10);
            assert_eq!(user.test_genuine.len(), 10);
        }
    }

    #[test]
    fn wi_split_needs_five_users() {
        let records = toy_records(3, 20, 5);
        assert!(matches!(split_wi(&records, 10, 10, 1), Err(Error::Data(_))));
    }
}
