//! AUC, per-task drop, unseen gain and the feature-similarity probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Detector scores for one task, split by ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub task_id: String,
    pub fake_scores: Vec<f64>,
    pub real_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(
        task_id: impl Into<String>,
        fake_scores: Vec<f64>,
        real_scores: Vec<f64>,
    ) -> Result<Self> {
        let s = ScoreSet {
            task_id: task_id.into(),
            fake_scores,
            real_scores,
        };
        s.validate()?;
        Ok(s)
    }

    /// Splits `scores` by `labels` (1 = fake, 0 = real).
    pub fn from_labeled(task_id: impl Into<String>, scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let (mut fake, mut real) = (Vec::new(), Vec::new());
        for (&s, &y) in scores.iter().zip(labels) {
            match y {
                0 => real.push(s),
                1 => fake.push(s),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "label {other} is not 0 or 1"
                    )))
                }
            }
        }
        ScoreSet::new(task_id, fake, real)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fake_scores.is_empty() {
            return Err(Error::EmptyInput("fake scores"));
        }
        if self.real_scores.is_empty() {
            return Err(Error::EmptyInput("real scores"));
        }
        if self
            .fake_scores
            .iter()
            .chain(&self.real_scores)
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "non-finite score in task {:?}",
                self.task_id
            )));
        }
        Ok(())
    }

    /// Same scores with the class roles exchanged.
    pub fn swapped(&self) -> ScoreSet {
        ScoreSet {
            task_id: self.task_id.clone(),
            fake_scores: self.real_scores.clone(),
            real_scores: self.fake_scores.clone(),
        }
    }
}

/// Probability that a random fake outscores a random real, ties counting ½.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (num, den) = auc_counts(s)?;
    Ok(num as f64 / den as f64)
}

/// AUC as an exact fraction `num / den`: `num` is twice the Mann–Whitney U
/// of the fakes, `den = 2 · n_fake · n_real`.
///
/// Midranks are held as doubled integers, so no rounding happens before the
/// final division in [`auc`].
pub fn auc_counts(s: &ScoreSet) -> Result<(u128, u128)> {
    s.validate()?;
    let nf = s.fake_scores.len() as u128;
    let nr = s.real_scores.len() as u128;
    let mut all: Vec<(f64, bool)> = s
        .fake_scores
        .iter()
        .map(|&x| (x, true))
        .chain(s.real_scores.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Doubled rank sum of the fake scores; positions are 1-based.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let fakes = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += (i + 1 + j) as u128 * fakes;
        i = j;
    }
    Ok((rank_sum2 - nf * (nf + 1), 2 * nf * nr))
}

/// `AUC_i(θ_i) − AUC_i(θ_⋆)`.
pub fn drop(auc_specialist: f64, auc_merged: f64) -> Result<f64> {
    check_unit(auc_specialist, "specialist AUC")?;
    check_unit(auc_merged, "merged AUC")?;
    Ok(auc_specialist - auc_merged)
}

pub fn drop_max(drops: &[f64]) -> Result<f64> {
    drops
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::EmptyInput("drop list"))
}

/// `AUC_unseen(θ_⋆) − max_i AUC_unseen(θ_i)`.
pub fn gain_unseen(auc_merged: f64, auc_specialists: &[f64]) -> Result<f64> {
    check_unit(auc_merged, "merged AUC")?;
    for &a in auc_specialists {
        check_unit(a, "specialist AUC")?;
    }
    let best = auc_specialists
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::EmptyInput("specialist AUC list"))?;
    Ok(auc_merged - best)
}

fn check_unit(x: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} {x} outside [0, 1]")))
    }
}

/// Per-method evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config: serde_json::Value,
    pub auc_per_task: BTreeMap<String, f64>,
    pub drop_per_task: BTreeMap<String, f64>,
    pub drop_max: f64,
    /// Mean AUC over the held-out families.
    pub auc_unseen: Option<f64>,
    pub gain_unseen: Option<f64>,
}

impl EvalReport {
    /// Builds the report from merged and specialist AUCs on the same tasks.
    /// `unseen` carries the merged model's unseen AUC and each specialist's.
    pub fn new(
        method: impl Into<String>,
        config: serde_json::Value,
        merged: &BTreeMap<String, f64>,
        specialists: &BTreeMap<String, f64>,
        unseen: Option<(f64, &[f64])>,
    ) -> Result<Self> {
        if merged.is_empty() {
            return Err(Error::EmptyInput("task AUC map"));
        }
        let mut drop_per_task = BTreeMap::new();
        for (task, &m) in merged {
            let s = specialists.get(task).ok_or_else(|| {
                Error::InvalidArgument(format!("no specialist AUC for task {task:?}"))
            })?;
            drop_per_task.insert(task.clone(), drop(*s, m)?);
        }
        let drops: Vec<f64> = drop_per_task.values().copied().collect();
        let (auc_unseen, gain) = match unseen {
            Some((m, sp)) => (Some(m), Some(gain_unseen(m, sp)?)),
            None => (None, None),
        };
        Ok(EvalReport {
            method: method.into(),
            config,
            auc_per_task: merged.clone(),
            drop_per_task,
            drop_max: drop_max(&drops)?,
            auc_unseen,
            gain_unseen: gain,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Aligned text table with one row per report: per-task AUC, `Drop_max`,
/// unseen AUC and gain. Tasks are the union over all reports.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut tasks: Vec<&String> = reports.iter().flat_map(|r| r.auc_per_task.keys()).collect();
    tasks.sort();
    tasks.dedup();

    let mut header: Vec<String> = vec!["method".into()];
    header.extend(tasks.iter().map(|t| t.to_string()));
    header.extend(["drop_max", "auc_unseen", "gain_unseen"].map(String::from));

    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let signed = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:+.4}"));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.method.clone()];
            row.extend(tasks.iter().map(|t| fmt(r.auc_per_task.get(*t).copied())));
            row.push(fmt(Some(r.drop_max)));
            row.push(fmt(r.auc_unseen));
            row.push(signed(r.gain_unseen));
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for line in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// A model that maps an input to its pre-logit feature vector.
pub trait FeatureMap: Sync {
    fn input_dim(&self) -> usize;
    fn features(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Input subsets for the similarity probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTag {
    Real,
    OwnFake,
    OtherFake,
}

impl ClassTag {
    pub const ALL: [ClassTag; 3] = [ClassTag::Real, ClassTag::OwnFake, ClassTag::OtherFake];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassTag::Real => "real",
            ClassTag::OwnFake => "own_fake",
            ClassTag::OtherFake => "other_fake",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// Mean cosine over inputs where both features are nonzero.
    pub mean: f64,
    pub used: usize,
    /// Inputs dropped because one of the two feature vectors was zero.
    pub excluded: usize,
}

/// Mean cosine similarity of the two models' features over `inputs`.
pub fn feature_similarity<A: FeatureMap + ?Sized, B: FeatureMap + ?Sized>(
    a: &A,
    b: &B,
    inputs: &[Vec<f64>],
) -> Result<Similarity> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("similarity inputs"));
    }
    if a.input_dim() != b.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "models take inputs of size {} and {}",
            a.input_dim(),
            b.input_dim()
        )));
    }
    let cosines: Vec<Option<f64>> = inputs
        .par_iter()
        .map(|x| {
            if x.len() != a.input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "input of size {} for models of input size {}",
                    x.len(),
                    a.input_dim()
                )));
            }
            let fa = a.features(x)?;
            let fb = b.features(x)?;
            let (na, nb) = (norm(&fa), norm(&fb));
            Ok((na > 0.0 && nb > 0.0).then(|| (dot(&fa, &fb) / (na * nb)).clamp(-1.0, 1.0)))
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = cosines.iter().flatten().copied().collect();
    let excluded = cosines.len() - used.len();
    if used.is_empty() {
        return Err(Error::Degenerate(
            "every input produced a zero feature vector".into(),
        ));
    }
    Ok(Similarity {
        mean: used.iter().sum::<f64>() / used.len() as f64,
        used: used.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(s: &ScoreSet) -> f64 {
        let mut twice = 0u64;
        for f in &s.fake_scores {
            for r in &s.real_scores {
                twice += match f.partial_cmp(r).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        twice as f64 / (2 * s.fake_scores.len() * s.real_scores.len()) as f64
    }

    fn set(f: &[f64], r: &[f64]) -> ScoreSet {
        ScoreSet::new("t", f.to_vec(), r.to_vec()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[2.0, 3.0], &[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[1.0, 0.0], &[1.0, 0.0])).unwrap(), 0.5);
        let s = set(&[0.9, 0.4, 0.7], &[0.3, 0.8, 0.1]);
        assert_eq!(auc(&s).unwrap(), 7.0 / 9.0);
        assert_eq!(brute(&s), 7.0 / 9.0);
        assert!(matches!(
            ScoreSet::new("t", vec![], vec![1.0]),
            Err(Error::EmptyInput(_))
        ));
        assert!(ScoreSet::new("t", vec![f64::NAN], vec![1.0]).is_err());
        assert!(ScoreSet::from_labeled("t", &[1.0, 2.0], &[0, 2]).is_err());
    }

    #[test]
    fn drop_and_gain() {
        assert_eq!(drop(0.8, 0.8).unwrap(), 0.0);
        assert!((drop(0.995, 0.977).unwrap() - 0.018).abs() < 1e-12);
        assert_eq!(drop_max(&[0.01, 0.03, 0.02]).unwrap(), 0.03);
        assert!((gain_unseen(0.774, &[0.749, 0.7]).unwrap() - 0.025).abs() < 1e-12);
        assert_eq!(gain_unseen(0.9, &[0.9, 0.8]).unwrap(), 0.0);
        assert!((gain_unseen(0.5, &[0.9, 0.8]).unwrap() + 0.4).abs() < 1e-15);
        assert!(gain_unseen(0.5, &[]).is_err());
        assert!(drop(1.2, 0.5).is_err());
    }

    #[test]
    fn report_and_table() {
        let merged = BTreeMap::from([("a".to_string(), 0.9), ("b".to_string(), 0.7)]);
        let spec = BTreeMap::from([("a".to_string(), 0.95), ("b".to_string(), 0.8)]);
        let unseen = [0.6, 0.65];
        let r = EvalReport::new(
            "wa",
            serde_json::json!({}),
            &merged,
            &spec,
            Some((0.7, &unseen)),
        )
        .unwrap();
        assert!((r.drop_max - 0.1).abs() < 1e-12);
        assert!((r.gain_unseen.unwrap() - 0.05).abs() < 1e-12);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let table = render_table(&[r]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("method"));
        assert!(lines[1].contains("+0.0500"));
        assert_eq!(
            lines[0].find("drop_max").map(|i| i + 8),
            lines[1].find("0.1000").map(|i| i + 6)
        );
    }

    struct Linear(Vec<Vec<f64>>);

    impl FeatureMap for Linear {
        fn input_dim(&self) -> usize {
            self.0[0].len()
        }
        fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.iter().map(|r| dot(r, x)).collect())
        }
    }

    #[test]
    fn similarity_cases() {
        let a = Linear(vec![vec![1.0, 2.0], vec![0.5, -1.0]]);
        let neg = Linear(vec![vec![-1.0, -2.0], vec![-0.5, 1.0]]);
        let xs = vec![vec![1.0, 0.0], vec![0.3, 0.7], vec![0.0, 0.0]];
        let s = feature_similarity(&a, &a, &xs).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-15);
        assert_eq!((s.used, s.excluded), (2, 1));
        assert!((feature_similarity(&a, &neg, &xs).unwrap().mean + 1.0).abs() < 1e-15);
        assert!(feature_similarity(&a, &a, &[]).is_err());
        assert!(feature_similarity(&a, &a, &[vec![0.0, 0.0]]).is_err());
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // small integer grid to force ties
        prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 4.0), 1..40)
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(f in scores(), r in scores()) {
            let s = set(&f, &r);
            prop_assert!((auc(&s).unwrap() - brute(&s)).abs() <= 1e-12);
        }

        #[test]
        fn auc_swap_complements(f in scores(), r in scores()) {
            let s = set(&f, &r);
            let (num, den) = auc_counts(&s).unwrap();
            prop_assert_eq!(auc_counts(&s.swapped()).unwrap(), (den - num, den));
            prop_assert!((auc(&s.swapped()).unwrap() - (1.0 - auc(&s).unwrap())).abs() <= f64::EPSILON);
        }

        #[test]
        fn auc_monotone_invariant(f in scores(), r in scores(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let s = set(&f, &r);
            let g = |x: &f64| (a * x + b).exp();
            let t = set(&f.iter().map(g).collect::<Vec<_>>(), &r.iter().map(g).collect::<Vec<_>>());
            prop_assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        }

        #[test]
        fn drop_max_is_max(d in prop::collection::vec(-1.0f64..1.0, 1..20)) {
            let m = drop_max(&d).unwrap();
            prop_assert!(d.iter().all(|x| *x <= m) && d.contains(&m));
        }
    }
}
