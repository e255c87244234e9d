use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::memory::FeatureGrid;
use crate::scalar::Scalar;

/// Per-frame fake probabilities with their episode and ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub fake: Vec<bool>,
    pub episodes: Vec<u32>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, fake: Vec<bool>, episodes: Vec<u32>) -> Result<Self> {
        if scores.len() != fake.len() || scores.len() != episodes.len() {
            return dim_err("score_set", "scores, labels and episode ids differ in length");
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Domain(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, fake, episodes })
    }

    pub fn push(&mut self, score: f64, fake: bool, episode: u32) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("score {score} outside [0, 1]")));
        }
        self.scores.push(score);
        self.fake.push(fake);
        self.episodes.push(episode);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let fakes = self.fake.iter().filter(|&&f| f).count();
        (fakes, self.len() - fakes)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

fn percent(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Percent of frames where `score ≥ threshold` agrees with the label being fake.
pub fn frame_accuracy(s: &ScoreSet, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if s.is_empty() {
        return Err(Error::Domain("frame accuracy of an empty score set".into()));
    }
    let hits = s
        .scores
        .iter()
        .zip(&s.fake)
        .filter(|(&x, &f)| (x >= threshold) == f)
        .count();
    Ok(percent(hits, s.len()))
}

/// Percent of episodes whose majority frame vote matches the label; ties vote fake.
pub fn video_accuracy(s: &ScoreSet, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if s.is_empty() {
        return Err(Error::Domain("video accuracy of an empty score set".into()));
    }
    // per episode: (fake votes, frames, label)
    let mut votes: BTreeMap<u32, (usize, usize, bool)> = BTreeMap::new();
    for ((&x, &f), &e) in s.scores.iter().zip(&s.fake).zip(&s.episodes) {
        let v = votes.entry(e).or_insert((0, 0, f));
        if v.2 != f {
            return Err(Error::Domain(format!("episode {e} mixes real and fake labels")));
        }
        v.0 += usize::from(x >= threshold);
        v.1 += 1;
    }
    let hits = votes
        .values()
        .filter(|(fake_votes, n, label)| (2 * fake_votes >= *n) == *label)
        .count();
    Ok(percent(hits, votes.len()))
}

/// `(APCER, BPCER)` in percent: fakes scored below `threshold`, reals at or above it.
pub fn apcer_bpcer(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    check_threshold(threshold)?;
    let (fakes, reals) = s.class_counts();
    if fakes == 0 || reals == 0 {
        return Err(Error::Domain("APCER/BPCER need both classes".into()));
    }
    let mut missed = 0;
    let mut false_alarms = 0;
    for (&x, &f) in s.scores.iter().zip(&s.fake) {
        if f && x < threshold {
            missed += 1;
        }
        if !f && x >= threshold {
            false_alarms += 1;
        }
    }
    Ok((percent(missed, fakes), percent(false_alarms, reals)))
}

/// Equal error rate in percent and the threshold attaining it.
///
/// Every distinct score is tried as a threshold; the one minimising
/// `|APCER - BPCER|` wins (lowest threshold on ties) and the rate reported
/// there is their mean.
pub fn eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let (fakes, reals) = s.class_counts();
    if fakes == 0 || reals == 0 {
        return Err(Error::Domain("EER needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Sweep thresholds upward; below the current threshold lie `fakes_below` fakes
    // and `reals_below` reals.
    let (mut fakes_below, mut reals_below) = (0usize, 0usize);
    let mut best: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        let apcer = percent(fakes_below, fakes);
        let bpcer = percent(reals - reals_below, reals);
        let gap = (apcer - bpcer).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (apcer + bpcer) / 2.0, t));
        }
        while i < order.len() && s.scores[order[i]] == t {
            if s.fake[order[i]] {
                fakes_below += 1;
            } else {
                reals_below += 1;
            }
            i += 1;
        }
    }
    let (_, rate, t) = best.expect("non-empty score set");
    Ok((rate, t))
}

/// Mean squared difference over every value of every grid pair.
pub fn future_mse<T: Scalar>(pred: &[FeatureGrid<T>], truth: &[FeatureGrid<T>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return dim_err("future_mse", format!("{} predictions for {} targets", pred.len(), truth.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.data().len() != t.data().len() {
            return dim_err("future_mse", "grid shapes differ");
        }
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            sum += d * d;
        }
        n += p.data().len();
    }
    Ok(sum / n as f64)
}

/// All rates in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frame_acc: f64,
    pub video_acc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub future_mse: f64,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn compute(s: &ScoreSet, threshold: f64, future_mse: f64) -> Result<Self> {
        let (eer, eer_threshold) = eer(s)?;
        let (apcer, bpcer) = apcer_bpcer(s, threshold)?;
        Ok(Self {
            frame_acc: frame_accuracy(s, threshold)?,
            video_acc: video_accuracy(s, threshold)?,
            eer,
            eer_threshold,
            apcer,
            bpcer,
            future_mse,
            threshold,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_reports_csv<W: Write>(mut w: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    writeln!(w, "variant,frame_acc,video_acc,eer,eer_threshold,apcer,bpcer,future_mse,threshold")?;
    for (name, r) in rows {
        writeln!(
            w,
            "{name},{},{},{},{},{},{},{},{}",
            r.frame_acc, r.video_acc, r.eer, r.eer_threshold, r.apcer, r.bpcer, r.future_mse, r.threshold
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], fake: &[bool]) -> ScoreSet {
        ScoreSet::new(scores.to_vec(), fake.to_vec(), (0..scores.len() as u32).collect()).unwrap()
    }

    #[test]
    fn perfect_and_flipped_accuracy() {
        let s = set(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(frame_accuracy(&s, 0.5).unwrap(), 100.0);
        let s2 = set(&[0.1, 0.6, 0.8, 0.4], &[false, false, true, true]);
        let flipped = set(&[0.1, 0.6, 0.8, 0.4], &[true, true, false, false]);
        let a = frame_accuracy(&s2, 0.5).unwrap();
        assert_eq!(frame_accuracy(&flipped, 0.5).unwrap(), 100.0 - a);
    }

    #[test]
    fn ten_frame_hand_count() {
        let scores = [0.05, 0.3, 0.5, 0.49, 0.7, 0.95, 0.2, 0.51, 0.6, 0.1];
        let fake = [false, false, true, true, true, true, true, false, false, false];
        let s = set(&scores, &fake);
        // correct: 0,1,2,4,5,9 → 6 of 10
        assert_eq!(frame_accuracy(&s, 0.5).unwrap(), 60.0);
        // fakes below 0.5: 0.49, 0.2 → 2 of 5; reals at or above: 0.51, 0.6 → 2 of 5
        assert_eq!(apcer_bpcer(&s, 0.5).unwrap(), (40.0, 40.0));
    }

    #[test]
    fn apcer_bpcer_extremes() {
        let s = set(&[0.1, 0.9], &[false, true]);
        assert_eq!(apcer_bpcer(&s, 0.5).unwrap(), (0.0, 0.0));
        let all_real = set(&[0.1, 0.2, 0.3], &[false, true, true]);
        assert_eq!(apcer_bpcer(&all_real, 0.5).unwrap(), (100.0, 0.0));
        assert!(apcer_bpcer(&set(&[0.1], &[true]), 0.5).is_err());
    }

    #[test]
    fn video_votes() {
        let s = ScoreSet::new(
            vec![0.9, 0.8, 0.1, 0.2, 0.3, 0.6, 0.4],
            vec![true, true, true, false, false, true, true],
            vec![0, 0, 0, 1, 1, 2, 2],
        )
        .unwrap();
        // episode 0 votes (fake, fake, real) → fake; 1 all real → real; 2 tie → fake
        assert_eq!(video_accuracy(&s, 0.5).unwrap(), 100.0);
        let order: Vec<usize> = vec![6, 2, 0, 4, 5, 1, 3];
        let shuffled = ScoreSet::new(
            order.iter().map(|&i| s.scores[i]).collect(),
            order.iter().map(|&i| s.fake[i]).collect(),
            order.iter().map(|&i| s.episodes[i]).collect(),
        )
        .unwrap();
        assert_eq!(video_accuracy(&shuffled, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn eer_limits() {
        let s = set(&[0.1, 0.2, 0.7, 0.9], &[false, false, true, true]);
        assert_eq!(eer(&s).unwrap().0, 0.0);
        let flat = set(&[0.5; 6], &[false, true, false, true, false, true]);
        assert_eq!(eer(&flat).unwrap().0, 50.0);
        assert!(eer(&set(&[0.3, 0.4], &[true, true])).is_err());
    }

    #[test]
    fn eer_threshold_reproduces_rates() {
        let s = set(
            &[0.1, 0.35, 0.4, 0.8, 0.45, 0.6, 0.7, 0.2],
            &[false, false, true, true, false, true, false, true],
        );
        let (rate, t) = eer(&s).unwrap();
        let (a, b) = apcer_bpcer(&s, t).unwrap();
        assert_eq!(rate, (a + b) / 2.0);
    }

    #[test]
    fn mse_cases() {
        let a = FeatureGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = FeatureGrid::new(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(future_mse(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        assert_eq!(future_mse(&[b], &[a]).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_scores() {
        assert!(ScoreSet::new(vec![1.2], vec![true], vec![0]).is_err());
        assert!(frame_accuracy(&set(&[0.5], &[true]), 1.5).is_err());
    }

    #[test]
    fn report_serialises() {
        let s = set(&[0.1, 0.9], &[false, true]);
        let r = MetricsReport::compute(&s, 0.5, 0.25).unwrap();
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[("full".into(), r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("full,100,100,0,"));
    }
}
