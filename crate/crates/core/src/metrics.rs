//! Presentation attack detection metrics and evaluation protocols.
//!
//! All rates are percentages. A score at or above the threshold is
//! predicted live.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_intra, Attack, Sample};
use crate::diffcore::Tensor;
use crate::{Error, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub domain: String,
    pub attack: Attack,
    pub y: u8,
    pub score: f32,
}

fn split_classes(records: &[ScoreRecord]) -> Result<(Vec<f32>, Vec<f32>), Error> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Metric(format!("non-finite score for {}", r.sample_id)));
    }
    let live: Vec<f32> = records.iter().filter(|r| r.y == 1).map(|r| r.score).collect();
    let spoof: Vec<f32> = records.iter().filter(|r| r.y == 0).map(|r| r.score).collect();
    match (live.is_empty(), spoof.is_empty()) {
        (true, _) => Err(Error::Metric("no live records".into())),
        (_, true) => Err(Error::Metric("no spoof records".into())),
        _ => Ok((live, spoof)),
    }
}

fn pct(count: usize, of: usize) -> f64 {
    100.0 * count as f64 / of as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

pub fn error_rates(records: &[ScoreRecord], threshold: f32) -> Result<ErrorRates, Error> {
    let (live, spoof) = split_classes(records)?;
    Ok(rates_of(&live, &spoof, threshold))
}

fn rates_of(live: &[f32], spoof: &[f32], t: f32) -> ErrorRates {
    let apcer = pct(spoof.iter().filter(|&&s| s >= t).count(), spoof.len());
    let bpcer = pct(live.iter().filter(|&&s| s < t).count(), live.len());
    ErrorRates {
        apcer,
        bpcer,
        acer: acer(apcer, bpcer),
    }
}

/// Exact rank statistic: `P(live > spoof) + P(live == spoof) / 2`, in percent.
pub fn auc(records: &[ScoreRecord]) -> Result<f64, Error> {
    let (mut live, mut spoof) = split_classes(records)?;
    live.sort_by(f32::total_cmp);
    spoof.sort_by(f32::total_cmp);
    let (mut below, mut equal_end) = (0usize, 0usize);
    let mut wins = 0.0f64;
    for &l in &live {
        while below < spoof.len() && spoof[below] < l {
            below += 1;
        }
        equal_end = equal_end.max(below);
        while equal_end < spoof.len() && spoof[equal_end] == l {
            equal_end += 1;
        }
        wins += below as f64 + 0.5 * (equal_end - below) as f64;
    }
    Ok(100.0 * wins / (live.len() as f64 * spoof.len() as f64))
}

/// How the HTER threshold is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum ThresholdRule {
    /// Candidate minimizing `|FAR - FRR|` on the evaluated scores.
    #[default]
    Eer,
    /// Candidate minimizing `(FAR + FRR) / 2` on the evaluated scores.
    MinHter,
    Fixed(f32),
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdRule::Eer => f.write_str("eer"),
            ThresholdRule::MinHter => f.write_str("min-hter"),
            ThresholdRule::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl std::str::FromStr for ThresholdRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "eer" => Ok(ThresholdRule::Eer),
            "min-hter" => Ok(ThresholdRule::MinHter),
            other => other
                .parse::<f32>()
                .ok()
                .filter(|t| t.is_finite())
                .map(ThresholdRule::Fixed)
                .ok_or_else(|| Error::Usage(format!("threshold must be eer, min-hter or a number, got {other:?}"))),
        }
    }
}

/// Candidate thresholds: every distinct score, plus one above the maximum
/// so that "reject everything" is reachable.
fn candidates(live: &[f32], spoof: &[f32]) -> Vec<f32> {
    let mut c: Vec<f32> = live.iter().chain(spoof).copied().collect();
    c.sort_by(f32::total_cmp);
    c.dedup();
    let top = *c.last().expect("non-empty");
    c.push(if top < 1.0 { 1.0f32.max(top.next_up()) } else { top.next_up() });
    c
}

/// Threshold selected by `rule`; ties go to the lower HTER, then the lower
/// threshold.
pub fn select_threshold(records: &[ScoreRecord], rule: ThresholdRule) -> Result<f32, Error> {
    let (live, spoof) = split_classes(records)?;
    let key = |t: f32| {
        let r = rates_of(&live, &spoof, t);
        match rule {
            ThresholdRule::Eer => ((r.apcer - r.bpcer).abs(), r.acer),
            _ => (r.acer, 0.0),
        }
    };
    match rule {
        ThresholdRule::Fixed(t) => Ok(t),
        _ => Ok(candidates(&live, &spoof)
            .into_iter()
            .map(|t| (key(t), t))
            .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.total_cmp(&b.0 .1)).then(a.1.total_cmp(&b.1)))
            .expect("non-empty")
            .1),
    }
}

pub fn eer_threshold(records: &[ScoreRecord]) -> Result<f32, Error> {
    select_threshold(records, ThresholdRule::Eer)
}

/// Half total error rate at `threshold`.
pub fn hter(records: &[ScoreRecord], threshold: f32) -> Result<f64, Error> {
    Ok(error_rates(records, threshold)?.acer)
}

/// All metrics of one score set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub auc: f64,
    pub threshold: f32,
}

/// APCER/BPCER/ACER at `fixed` (default 0.5) and HTER at the threshold
/// chosen by `rule`.
pub fn compute_metrics(records: &[ScoreRecord], rule: ThresholdRule, fixed: f32) -> Result<Metrics, Error> {
    let r = error_rates(records, fixed)?;
    let threshold = select_threshold(records, rule)?;
    Ok(Metrics {
        apcer: r.apcer,
        bpcer: r.bpcer,
        acer: r.acer,
        hter: hter(records, threshold)?,
        auc: auc(records)?,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub name: String,
    pub metrics: Metrics,
    pub n_live: usize,
    pub n_spoof: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: String,
    pub rule: ThresholdRule,
    pub folds: Vec<FoldResult>,
    /// Mean of the fold metrics.
    pub aggregate: Metrics,
}

impl ProtocolResult {
    pub fn from_folds(protocol: String, rule: ThresholdRule, folds: Vec<FoldResult>) -> Result<Self, Error> {
        if folds.is_empty() {
            return Err(Error::Metric("no folds".into()));
        }
        let n = folds.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| folds.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let (apcer, bpcer) = (mean(|m| m.apcer), mean(|m| m.bpcer));
        let aggregate = Metrics {
            apcer,
            bpcer,
            acer: acer(apcer, bpcer),
            hter: mean(|m| m.hter),
            auc: mean(|m| m.auc),
            threshold: (folds.iter().map(|r| r.metrics.threshold as f64).sum::<f64>() / n) as f32,
        };
        Ok(Self {
            protocol,
            rule,
            folds,
            aggregate,
        })
    }

    /// Human-readable report.
    pub fn report(&self) -> String {
        let mut s = format!("protocol {} (hter threshold: {})\n", self.protocol, self.rule);
        s.push_str("fold\tAPCER\tBPCER\tACER\tHTER\tAUC\tthreshold\n");
        let line = |name: &str, m: &Metrics| {
            format!(
                "{name}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.4}\n",
                m.apcer, m.bpcer, m.acer, m.hter, m.auc, m.threshold
            )
        };
        for f in &self.folds {
            s.push_str(&line(&f.name, &f.metrics));
        }
        if self.folds.len() > 1 {
            s.push_str(&line("mean", &self.aggregate));
        }
        s
    }
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), Error> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.sample_id, r.domain, r.attack, r.y, r.score));
    }
    fs::write(path, out).map_err(Error::io(path))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, Error> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_scores(&text)
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>, Error> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(no, line)| {
            let bad = |what: &str| Error::Metric(format!("score line {}: {what}", no + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [id, domain, attack, y, score] = f.as_slice() else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            let score: f32 = score.parse().map_err(|_| bad("bad score"))?;
            if !score.is_finite() {
                return Err(bad("non-finite score"));
            }
            Ok(ScoreRecord {
                sample_id: id.to_string(),
                domain: domain.to_string(),
                attack: attack.parse()?,
                y: y.parse().ok().filter(|&y| y <= 1).ok_or_else(|| bad("label must be 0 or 1"))?,
                score,
            })
        })
        .collect()
}

/// Something that assigns liveness scores to a batch of images `[B,C,H,W]`.
pub trait Scorer: Sync {
    fn score_batch(&self, images: &Tensor) -> Result<Vec<f32>, Error>;
}

impl<F> Scorer for F
where
    F: Fn(&Tensor) -> Result<Vec<f32>, Error> + Sync,
{
    fn score_batch(&self, images: &Tensor) -> Result<Vec<f32>, Error> {
        self(images)
    }
}

/// Score `indices` of `samples` in chunks of `batch`, chunks in parallel.
pub fn score_samples(
    scorer: &dyn Scorer,
    samples: &[Sample],
    indices: &[usize],
    batch: usize,
    exec: Exec,
) -> Result<Vec<ScoreRecord>, Error> {
    let chunks: Vec<&[usize]> = indices.chunks(batch.max(1)).collect();
    let scored = exec.map(&chunks, |chunk| -> Result<Vec<ScoreRecord>, Error> {
        let images = Tensor::stack(&chunk.iter().map(|&i| samples[i].image.clone()).collect::<Vec<_>>())?;
        let scores = scorer.score_batch(&images)?;
        if scores.len() != chunk.len() {
            return Err(Error::Metric(format!("scorer returned {} scores for {} images", scores.len(), chunk.len())));
        }
        chunk
            .iter()
            .zip(scores)
            .map(|(&i, score)| {
                let s = &samples[i];
                if !score.is_finite() {
                    return Err(Error::Metric(format!("non-finite score for {}", s.id)));
                }
                Ok(ScoreRecord {
                    sample_id: s.id.clone(),
                    domain: s.domain.clone(),
                    attack: s.attack,
                    y: s.y,
                    score,
                })
            })
            .collect()
    });
    Ok(scored.into_iter().collect::<Result<Vec<_>, _>>()?.concat())
}

/// Evaluation protocol over a multi-domain dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Train on the training split of `domains`, test on their held-out split.
    Intra { domains: Vec<String>, test_fraction: f64, seed: u64 },
    /// Train on every domain but `held_out`, test on all of `held_out`.
    Cross { held_out: String },
}

impl Protocol {
    pub fn name(&self) -> String {
        match self {
            Protocol::Intra { domains, .. } => format!("intra({})", domains.join(",")),
            Protocol::Cross { held_out } => format!("cross({held_out})"),
        }
    }

    /// `(train, test)` sample indices.
    pub fn indices(&self, samples: &[Sample]) -> Result<(Vec<usize>, Vec<usize>), Error> {
        let present = |d: &str| samples.iter().any(|s| s.domain == d);
        match self {
            Protocol::Intra { domains, test_fraction, seed } => {
                if let Some(d) = domains.iter().find(|d| !present(d)) {
                    return Err(Error::Config(format!("domain {d:?} not in dataset")));
                }
                let s = split_intra(samples, domains, *test_fraction, *seed)?;
                Ok((s.train, s.test))
            }
            Protocol::Cross { held_out } => {
                if !present(held_out) {
                    return Err(Error::Config(format!("held-out domain {held_out:?} not in dataset")));
                }
                let (test, train): (Vec<usize>, Vec<usize>) =
                    (0..samples.len()).partition(|&i| samples[i].domain == *held_out);
                if train.is_empty() {
                    return Err(Error::Config("no training domains left after holding one out".into()));
                }
                Ok((train, test))
            }
        }
    }
}

/// Train with `train` on the protocol's training indices, then score and
/// evaluate its test indices.
pub fn run_protocol<S, F>(
    samples: &[Sample],
    protocol: &Protocol,
    train: F,
    rule: ThresholdRule,
    exec: Exec,
) -> Result<(ProtocolResult, Vec<ScoreRecord>), Error>
where
    S: Scorer,
    F: FnOnce(&[Sample], &[usize]) -> Result<S, Error>,
{
    let (train_idx, test_idx) = protocol.indices(samples)?;
    let model = train(samples, &train_idx)?;
    let records = score_samples(&model, samples, &test_idx, 32, exec)?;
    let fold = evaluate_fold(protocol.name(), &records, rule)?;
    Ok((ProtocolResult::from_folds(protocol.name(), rule, vec![fold])?, records))
}

pub fn evaluate_fold(name: String, records: &[ScoreRecord], rule: ThresholdRule) -> Result<FoldResult, Error> {
    Ok(FoldResult {
        name,
        metrics: compute_metrics(records, rule, 0.5)?,
        n_live: records.iter().filter(|r| r.y == 1).count(),
        n_spoof: records.iter().filter(|r| r.y == 0).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(live: &[f32], spoof: &[f32]) -> Vec<ScoreRecord> {
        let mk = |s: f32, y: u8, i: usize| ScoreRecord {
            sample_id: format!("{y}_{i}"),
            domain: "A".into(),
            attack: if y == 1 { Attack::None } else { Attack::Print },
            y,
            score: s,
        };
        live.iter()
            .enumerate()
            .map(|(i, &s)| mk(s, 1, i))
            .chain(spoof.iter().enumerate().map(|(i, &s)| mk(s, 0, i)))
            .collect()
    }

    fn brute_auc(live: &[f32], spoof: &[f32]) -> f64 {
        let mut w = 0.0;
        for l in live {
            for s in spoof {
                w += if l > s { 1.0 } else if l == s { 0.5 } else { 0.0 };
            }
        }
        100.0 * w / (live.len() * spoof.len()) as f64
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(format!("{:.2}", acer(1.67, 0.0)), "0.83");
        let r = error_rates(&recs(&[0.9, 0.8], &[0.1, 0.2]), 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 0.0, 0.0));
        let r = error_rates(&recs(&[0.9, 0.8, 0.7, 0.6, 0.3], &[0.1, 0.2, 0.4, 0.55]), 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (25.0, 20.0, 22.5));
        assert!(error_rates(&recs(&[0.5], &[]), 0.5).unwrap_err().to_string().contains("spoof"));
        assert!(auc(&recs(&[], &[0.5])).unwrap_err().to_string().contains("live"));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&recs(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 100.0);
        assert_eq!(auc(&recs(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 50.0);
        assert_eq!(auc(&recs(&[0.9, 0.4], &[0.6, 0.1])).unwrap(), 75.0);
    }

    #[test]
    fn hter_examples() {
        let sep = recs(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(hter(&sep, eer_threshold(&sep).unwrap()).unwrap(), 0.0);
        // The EER candidate balances FAR = FRR = 50%; 25% is the minimum HTER.
        let r = recs(&[0.8, 0.6], &[0.7, 0.2]);
        assert_eq!(hter(&r, eer_threshold(&r).unwrap()).unwrap(), 50.0);
        let t = select_threshold(&r, ThresholdRule::MinHter).unwrap();
        assert_eq!(hter(&r, t).unwrap(), 25.0);
        assert_eq!(select_threshold(&r, ThresholdRule::Fixed(0.3)).unwrap(), 0.3);
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.tsv");
        let r = recs(&[0.9, 0.123_456_79], &[0.1]);
        write_scores(&p, &r).unwrap();
        assert_eq!(read_scores(&p).unwrap(), r);
        assert!(parse_scores("a\tA\tnone\t1\tnan\n").is_err());
        assert!(parse_scores("a\tA\tnone\t2\t0.5\n").is_err());
    }

    #[test]
    fn constant_and_oracle_scorers() {
        let samples: Vec<Sample> = (0..8)
            .map(|i| Sample {
                id: format!("s{i}"),
                image: Tensor::full(&[3, 2, 2], i as f32),
                y: (i % 2) as u8,
                attack: if i % 2 == 1 { Attack::None } else { Attack::Replay },
                domain: if i < 4 { "A" } else { "B" }.into(),
            })
            .collect();
        let cross = Protocol::Cross { held_out: "B".into() };
        let constant = |imgs: &Tensor| Ok(vec![0.5; imgs.shape()[0]]);
        let (res, _) = run_protocol(&samples, &cross, |_, _| Ok(constant), ThresholdRule::Eer, Exec::Sequential).unwrap();
        assert_eq!(res.aggregate.auc, 50.0);
        // Odd pixel values are live.
        let oracle = |imgs: &Tensor| {
            Ok((0..imgs.shape()[0]).map(|b| (imgs.data()[b * 12] as usize % 2) as f32).collect())
        };
        let (res, recs) = run_protocol(&samples, &cross, |_, tr| {
            assert!(tr.iter().all(|&i| i < 4));
            Ok(oracle)
        }, ThresholdRule::Eer, Exec::Parallel)
        .unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!((res.aggregate.auc, res.aggregate.hter), (100.0, 0.0));
        let missing = Protocol::Cross { held_out: "Z".into() };
        assert!(matches!(
            run_protocol(&samples, &missing, |_, _| Ok(constant), ThresholdRule::Eer, Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    fn arb_scores() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        let s = prop_oneof![0.0f32..1.0, (0u8..5).prop_map(|v| v as f32 / 4.0)];
        (prop::collection::vec(s.clone(), 1..20), prop::collection::vec(s, 1..20))
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle_and_is_monotone_invariant((l, s) in arb_scores()) {
            let a = auc(&recs(&l, &s)).unwrap();
            prop_assert!((a - brute_auc(&l, &s)).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&a));
            let f = |v: &f32| v * v * v + 2.0 * v;
            let t: (Vec<f32>, Vec<f32>) = (l.iter().map(f).collect(), s.iter().map(f).collect());
            prop_assert!((auc(&recs(&t.0, &t.1)).unwrap() - a).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_permutation_invariant((l, s) in arb_scores(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let r = recs(&l, &s);
            let mut p = r.clone();
            p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(compute_metrics(&r, ThresholdRule::Eer, 0.5).unwrap(), compute_metrics(&p, ThresholdRule::Eer, 0.5).unwrap());
        }

        #[test]
        fn acer_identities((l, s) in arb_scores(), t in -0.5f32..1.5) {
            let r = recs(&l, &s);
            let e = error_rates(&r, t).unwrap();
            prop_assert_eq!(e.acer, (e.apcer + e.bpcer) / 2.0);
            prop_assert_eq!(hter(&r, t).unwrap(), e.acer);
            let all_live = error_rates(&r, f32::NEG_INFINITY).unwrap();
            prop_assert_eq!((all_live.apcer, all_live.bpcer), (100.0, 0.0));
            let lo = l.iter().chain(&s).copied().fold(f32::INFINITY, f32::min);
            let hi = l.iter().chain(&s).copied().fold(f32::NEG_INFINITY, f32::max);
            let best = select_threshold(&r, ThresholdRule::MinHter).unwrap();
            prop_assert!(best >= lo && best <= hi.next_up().max(1.0));
            prop_assert!(hter(&r, best).unwrap() <= e.acer + 1e-9);
        }
    }
}
