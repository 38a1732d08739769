//! Biometric error metrics: APCER, BPCER, EER, BPCER at fixed APCER
//! operating points, and DET-curve export.
//!
//! Score orientation is fixed by the label convention: bona fide is the
//! positive class (label 1), so higher scores mean "more bona fide" and a
//! sample is classified bona fide when its score is at or above the
//! threshold. All rates are exact empirical counts; nothing is interpolated
//! between thresholds. Candidate thresholds are the distinct score values,
//! the midpoints between adjacent sorted scores, and below-min/above-max
//! sentinels, which together visit every achievable (APCER, BPCER) pair.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    /// 1 = bona fide, 0 = attack.
    pub label: u8,
    /// Bona fide score, higher = more bona fide.
    pub score: f64,
}

/// Scored evaluation set.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new() -> Self {
        ScoreSet::default()
    }

    pub fn push(&mut self, sample_id: impl Into<String>, label: u8, score: f64) -> Result<()> {
        if label > 1 {
            return Err(Error::Contract(format!("label must be 0 or 1, got {label}")));
        }
        if !score.is_finite() {
            return Err(Error::Contract(format!("score must be finite, got {score}")));
        }
        self.records.push(ScoreRecord {
            sample_id: sample_id.into(),
            label,
            score,
        });
        Ok(())
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn attack_count(&self) -> usize {
        self.records.iter().filter(|r| r.label == 0).count()
    }

    pub fn bona_fide_count(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    fn check_both_classes(&self) -> Result<()> {
        if self.attack_count() == 0 || self.bona_fide_count() == 0 {
            return Err(Error::Contract(format!(
                "threshold metrics need both classes: {} attacks, {} bona fide",
                self.attack_count(),
                self.bona_fide_count()
            )));
        }
        Ok(())
    }

    /// Distinct scores, adjacent midpoints, and ±sentinels, ascending.
    pub fn candidate_thresholds(&self) -> Vec<f64> {
        let mut scores: Vec<f64> = self.records.iter().map(|r| r.score).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
        scores.dedup();
        let lo = scores.first().copied().unwrap_or(0.0);
        let hi = scores.last().copied().unwrap_or(0.0);
        let mut thresholds = vec![lo - 1.0];
        for i in 0..scores.len() {
            thresholds.push(scores[i]);
            if i + 1 < scores.len() {
                thresholds.push((scores[i] + scores[i + 1]) / 2.0);
            }
        }
        thresholds.push(hi + 1.0);
        thresholds.dedup();
        thresholds
    }
}

/// One DET-curve point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Computed report, serialized as the JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    /// Keyed by the APCER target as written ("0.01", "0.20").
    pub bpcer_at_apcer: std::collections::BTreeMap<String, BpcerOperatingPoint>,
    pub counts: Counts,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BpcerOperatingPoint {
    pub bpcer: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Counts {
    pub attacks: usize,
    pub bona_fide: usize,
}

/// APCER = fraction of attacks scored ≥ threshold (classified bona fide);
/// BPCER = fraction of bona fide scored < threshold (classified attack).
pub fn apcer_bpcer_at(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    scores.check_both_classes()?;
    let mut attack_pass = 0usize;
    let mut bona_fide_fail = 0usize;
    for r in scores.records() {
        if r.label == 0 && r.score >= threshold {
            attack_pass += 1;
        }
        if r.label == 1 && r.score < threshold {
            bona_fide_fail += 1;
        }
    }
    Ok((
        attack_pass as f64 / scores.attack_count() as f64,
        bona_fide_fail as f64 / scores.bona_fide_count() as f64,
    ))
}

/// Threshold minimizing |APCER − BPCER| over the candidate grid (smallest
/// such threshold on ties); returns the midpoint rate there.
pub fn eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    scores.check_both_classes()?;
    let mut best: Option<(f64, f64, f64)> = None; // (gap, rate, threshold)
    for t in scores.candidate_thresholds() {
        let (apcer, bpcer) = apcer_bpcer_at(scores, t)?;
        let gap = (apcer - bpcer).abs();
        let better = match best {
            None => true,
            Some((best_gap, _, _)) => gap < best_gap,
        };
        if better {
            best = Some((gap, (apcer + bpcer) / 2.0, t));
        }
    }
    let (_, rate, threshold) = best.expect("candidate grid is never empty");
    Ok((rate, threshold))
}

/// Minimum BPCER over thresholds whose APCER does not exceed `target`.
/// Always attainable: above the maximum score APCER is zero.
pub fn bpcer_at_apcer(scores: &ScoreSet, target: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&target) || target == 0.0 {
        return Err(Error::Contract(format!(
            "APCER target must be in (0,1), got {target}"
        )));
    }
    scores.check_both_classes()?;
    // APCER is nonincreasing and BPCER nondecreasing in the threshold, so
    // the smallest qualifying threshold carries the minimum BPCER.
    for t in scores.candidate_thresholds() {
        let (apcer, bpcer) = apcer_bpcer_at(scores, t)?;
        if apcer <= target {
            return Ok((bpcer, t));
        }
    }
    unreachable!("the above-max sentinel has APCER 0");
}

/// One point per candidate threshold, ascending; includes the (1,0) and
/// (0,1) endpoints via the sentinels.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    scores.check_both_classes()?;
    scores
        .candidate_thresholds()
        .into_iter()
        .map(|threshold| {
            let (apcer, bpcer) = apcer_bpcer_at(scores, threshold)?;
            Ok(DetPoint {
                threshold,
                apcer,
                bpcer,
            })
        })
        .collect()
}

/// Full report at the two standard operating points (APCER 1% and 20%).
pub fn report(scores: &ScoreSet) -> Result<MetricsReport> {
    let (eer_value, eer_threshold) = eer(scores)?;
    let mut bpcer_at = std::collections::BTreeMap::new();
    for (key, target) in [("0.01", 0.01), ("0.20", 0.20)] {
        let (bpcer, threshold) = bpcer_at_apcer(scores, target)?;
        bpcer_at.insert(key.to_string(), BpcerOperatingPoint { bpcer, threshold });
    }
    Ok(MetricsReport {
        eer: eer_value,
        eer_threshold,
        bpcer_at_apcer: bpcer_at,
        counts: Counts {
            attacks: scores.attack_count(),
            bona_fide: scores.bona_fide_count(),
        },
    })
}

/// Write "sample_id,label,score" CSV.
pub fn write_scores_csv(scores: &ScoreSet, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,label,score\n");
    for r in scores.records() {
        out.push_str(&format!("{},{},{}\n", r.sample_id, r.label, r.score));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read the score CSV, reporting the line number of any malformed row.
pub fn read_scores_csv(path: &Path) -> Result<ScoreSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "sample_id,label,score")) => {}
        Some((i, header)) => return Err(parse_err(i + 1, format!("bad header {header:?}"))),
        None => return Err(parse_err(1, "empty score file".into())),
    }
    let mut scores = ScoreSet::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let label: u8 = fields[1]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad label {:?}", fields[1])))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad score {:?}", fields[2])))?;
        scores
            .push(fields[0], label, score)
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
    }
    Ok(scores)
}

/// Write the DET curve as "threshold,apcer,bpcer" CSV.
pub fn write_det_csv(points: &[DetPoint], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "threshold,apcer,bpcer").map_err(|e| Error::io(path, e))?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.apcer, p.bpcer).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn set(attacks: &[f64], bona_fide: &[f64]) -> ScoreSet {
        let mut s = ScoreSet::new();
        for (i, &v) in attacks.iter().enumerate() {
            s.push(format!("a{i}"), 0, v).unwrap();
        }
        for (i, &v) in bona_fide.iter().enumerate() {
            s.push(format!("b{i}"), 1, v).unwrap();
        }
        s
    }

    fn random_set(rng: &mut ChaCha8Rng, max: usize) -> ScoreSet {
        let n_attacks = rng.gen_range(1..=max / 2);
        let n_bona = rng.gen_range(1..=max / 2);
        // Quantized scores force plenty of ties.
        let attacks: Vec<f64> = (0..n_attacks)
            .map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0)
            .collect();
        let bona: Vec<f64> = (0..n_bona)
            .map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0)
            .collect();
        set(&attacks, &bona)
    }

    #[test]
    fn apcer_bpcer_basic_cases() {
        let s = set(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(apcer_bpcer_at(&s, 0.5).unwrap(), (0.0, 0.0));
        assert_eq!(apcer_bpcer_at(&s, 0.0).unwrap(), (1.0, 0.0));

        let mixed = set(&[0.2, 0.6], &[0.4, 0.9]);
        assert_eq!(apcer_bpcer_at(&mixed, 0.5).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn missing_class_is_a_contract_error() {
        let mut s = ScoreSet::new();
        s.push("a", 0, 0.5).unwrap();
        assert!(matches!(apcer_bpcer_at(&s, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn eer_separable_and_symmetric_cases() {
        let separable = set(&[0.1, 0.2], &[0.8, 0.9]);
        let (rate, _) = eer(&separable).unwrap();
        assert_eq!(rate, 0.0);

        let identical = set(&[0.3, 0.7], &[0.3, 0.7]);
        let (rate, _) = eer(&identical).unwrap();
        assert_eq!(rate, 0.5);
    }

    #[test]
    fn eer_matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let s = random_set(&mut rng, 20);
            let (got, _) = eer(&s).unwrap();
            let (expect, _) = oracle::eer(&s);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn bpcer_at_apcer_cases() {
        let separable = set(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(bpcer_at_apcer(&separable, 0.01).unwrap().0, 0.0);

        // Attacks above all bona fide: detector is inverted.
        let inverted = set(&[0.8, 0.9, 0.85, 0.95, 0.99], &[0.1, 0.2, 0.3, 0.15, 0.25]);
        let (got, _) = bpcer_at_apcer(&inverted, 0.20).unwrap();
        let (expect, _) = oracle::bpcer_at_apcer(&inverted, 0.20);
        assert_eq!(got, expect);
        assert!(got >= 0.8);

        let mixed = set(&[0.2, 0.6], &[0.4, 0.9]);
        let (got, _) = bpcer_at_apcer(&mixed, 0.20).unwrap();
        let (expect, _) = oracle::bpcer_at_apcer(&mixed, 0.20);
        assert_eq!(got, expect);
    }

    #[test]
    fn det_curve_shape_and_oracle_equality() {
        let s = set(&[0.1, 0.4], &[0.6, 0.9]);
        let points = det_curve(&s).unwrap();
        assert!(points.iter().any(|p| p.apcer == 0.0 && p.bpcer == 0.0));
        assert!(points.first().unwrap().apcer == 1.0 && points.first().unwrap().bpcer == 0.0);
        assert!(points.last().unwrap().apcer == 0.0 && points.last().unwrap().bpcer == 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let s = random_set(&mut rng, 50);
        let points = det_curve(&s).unwrap();
        for p in &points {
            assert_eq!((p.apcer, p.bpcer), oracle::rates(&s, p.threshold));
        }
        for w in points.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[0].apcer >= w[1].apcer);
            assert!(w[0].bpcer <= w[1].bpcer);
        }
    }

    #[test]
    fn scores_csv_round_trip_and_line_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let s = set(&[0.25, 0.5], &[0.75]);
        write_scores_csv(&s, &path).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(s.records(), back.records());

        std::fs::write(&path, "sample_id,label,score\nx,1,0.5\ny,bad,0.2\n").unwrap();
        match read_scores_csv(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn report_has_both_operating_points() {
        let s = set(&[0.1, 0.2, 0.3], &[0.7, 0.8, 0.9]);
        let r = report(&s).unwrap();
        assert!(r.bpcer_at_apcer.contains_key("0.01"));
        assert!(r.bpcer_at_apcer.contains_key("0.20"));
        assert_eq!(r.counts.attacks, 3);
        assert_eq!(r.counts.bona_fide, 3);
        assert_eq!(r.eer, 0.0);
    }

    proptest! {
        // Strictly increasing transforms preserve ranks, hence all metrics.
        #[test]
        fn rank_invariance_under_monotone_transforms(
            attacks in proptest::collection::vec(0.0f64..1.0, 1..15),
            bona in proptest::collection::vec(0.0f64..1.0, 1..15),
        ) {
            let s = set(&attacks, &bona);
            let transform = |v: f64| (3.0 * v).exp() / 10.0 + 0.5 * v;
            let t = set(
                &attacks.iter().map(|&v| transform(v)).collect::<Vec<_>>(),
                &bona.iter().map(|&v| transform(v)).collect::<Vec<_>>(),
            );
            prop_assert_eq!(eer(&s).unwrap().0, eer(&t).unwrap().0);
            prop_assert_eq!(
                bpcer_at_apcer(&s, 0.20).unwrap().0,
                bpcer_at_apcer(&t, 0.20).unwrap().0
            );
            let mut pairs_s: Vec<(f64, f64)> =
                det_curve(&s).unwrap().iter().map(|p| (p.apcer, p.bpcer)).collect();
            let mut pairs_t: Vec<(f64, f64)> =
                det_curve(&t).unwrap().iter().map(|p| (p.apcer, p.bpcer)).collect();
            pairs_s.dedup();
            pairs_t.dedup();
            prop_assert_eq!(pairs_s, pairs_t);
        }

        // Swapping labels and negating scores swaps the two error rates.
        #[test]
        fn label_swap_duality(
            attacks in proptest::collection::vec(0.0f64..1.0, 1..10),
            bona in proptest::collection::vec(0.0f64..1.0, 1..10),
            threshold in -0.5f64..1.5,
        ) {
            let s = set(&attacks, &bona);
            let mut swapped = ScoreSet::new();
            for r in s.records() {
                swapped.push(r.sample_id.clone(), 1 - r.label, -r.score).unwrap();
            }
            let (a, b) = apcer_bpcer_at(&s, threshold).unwrap();
            // Mirror: score ≥ t  ⇔  −score < −t is its complement, so use
            // the threshold just past −t to mirror the closed comparison.
            let mirrored = -threshold + f64::EPSILON * threshold.abs().max(1.0);
            let (a2, b2) = apcer_bpcer_at(&swapped, mirrored).unwrap();
            prop_assert_eq!(a, b2);
            prop_assert_eq!(b, a2);
        }
    }
}
