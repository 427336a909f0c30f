use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DatasetIndex, LEVELS, LEVEL_MIN};
use crate::{Error, Result};

/// Refinement passes before giving up on further swaps.
pub const SPLIT_PASSES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub histogram_distance: f64,
}

impl SplitSpec {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Frame-level valence and arousal counts over the 21 levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaHistogram {
    pub valence: [f64; LEVELS],
    pub arousal: [f64; LEVELS],
}

impl Default for VaHistogram {
    fn default() -> Self {
        Self {
            valence: [0.0; LEVELS],
            arousal: [0.0; LEVELS],
        }
    }
}

impl VaHistogram {
    pub fn of_clip(clip: &ClipRecord) -> Self {
        let mut h = Self::default();
        for a in &clip.annotations {
            h.valence[(a.valence - LEVEL_MIN) as usize] += 1.0;
            h.arousal[(a.arousal - LEVEL_MIN) as usize] += 1.0;
        }
        h
    }

    fn add(&mut self, other: &Self, sign: f64) {
        for i in 0..LEVELS {
            self.valence[i] += sign * other.valence[i];
            self.arousal[i] += sign * other.arousal[i];
        }
    }
}

fn chi_square(p: &[f64; LEVELS], q: &[f64; LEVELS]) -> f64 {
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    if sp == 0.0 || sq == 0.0 {
        return if sp == sq { 0.0 } else { 2.0 };
    }
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let (a, b) = (a / sp, b / sq);
            if a + b > 0.0 {
                (a - b).powi(2) / (a + b)
            } else {
                0.0
            }
        })
        .sum()
}

/// Chi-square distance between normalized histograms, valence plus arousal.
pub fn chi_square_distance(a: &VaHistogram, b: &VaHistogram) -> f64 {
    chi_square(&a.valence, &b.valence) + chi_square(&a.arousal, &b.arousal)
}

pub fn make_split(index: &DatasetIndex, test_fraction: f64, seed: u64) -> Result<SplitSpec> {
    make_split_traced(index, test_fraction, seed).map(|(s, _)| s)
}

/// Seeded random split refined by greedy train/test swaps that reduce the
/// chi-square distance between the frame-level label histograms. Also returns
/// the distance after the initial split and after every accepted swap.
pub fn make_split_traced(
    index: &DatasetIndex,
    test_fraction: f64,
    seed: u64,
) -> Result<(SplitSpec, Vec<f64>)> {
    let n = index.clips.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "splitting needs at least 2 clips, found {n}"
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let hists: Vec<VaHistogram> = index.clips.iter().map(VaHistogram::of_clip).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();

    let total = |ids: &[usize]| {
        let mut h = VaHistogram::default();
        for &i in ids {
            h.add(&hists[i], 1.0);
        }
        h
    };
    let mut h_train = total(&train);
    let mut h_test = total(&test);
    let mut dist = chi_square_distance(&h_train, &h_test);
    let mut trace = vec![dist];

    for _ in 0..SPLIT_PASSES {
        let mut improved = false;
        for ti in 0..test.len() {
            let mut best: Option<(usize, f64)> = None;
            for (ri, &r) in train.iter().enumerate() {
                let t = test[ti];
                let mut a = h_train;
                a.add(&hists[r], -1.0);
                a.add(&hists[t], 1.0);
                let mut b = h_test;
                b.add(&hists[t], -1.0);
                b.add(&hists[r], 1.0);
                let d = chi_square_distance(&a, &b);
                if d < best.map_or(dist, |(_, bd)| bd) - 1e-12 {
                    best = Some((ri, d));
                }
            }
            if let Some((ri, d)) = best {
                let (t, r) = (test[ti], train[ri]);
                h_train.add(&hists[r], -1.0);
                h_train.add(&hists[t], 1.0);
                h_test.add(&hists[t], -1.0);
                h_test.add(&hists[r], 1.0);
                test[ti] = r;
                train[ri] = t;
                dist = d;
                trace.push(dist);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    let ids = |v: &[usize]| {
        let mut s: Vec<String> = v.iter().map(|&i| index.clips[i].clip_id.clone()).collect();
        s.sort();
        s
    };
    Ok((
        SplitSpec {
            seed,
            train_ids: ids(&train),
            test_ids: ids(&test),
            histogram_distance: dist,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FrameAnnotation;
    use std::path::PathBuf;

    fn clip(id: &str, labels: &[(i32, i32)]) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            frames: labels.iter().map(|_| PathBuf::new()).collect(),
            annotations: labels
                .iter()
                .map(|&(v, a)| FrameAnnotation {
                    valence: v,
                    arousal: a,
                    landmarks: vec![[0.0; 2]; 68],
                })
                .collect(),
            fps: 30,
            width: 1,
            height: 1,
        }
    }

    fn index(n: usize, seed: u64) -> DatasetIndex {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clips = (0..n)
            .map(|i| {
                let len = rng.gen_range(2..12);
                let labels: Vec<(i32, i32)> = (0..len)
                    .map(|_| (rng.gen_range(-10..=10), rng.gen_range(-10..=10)))
                    .collect();
                clip(&format!("clip{i:04}"), &labels)
            })
            .collect();
        DatasetIndex {
            root: PathBuf::new(),
            clips,
        }
    }

    #[test]
    fn full_scale_split_sizes() {
        let idx = index(600, 1);
        let s = make_split(&idx, 1.0 / 6.0, 7).unwrap();
        assert_eq!(s.train_ids.len(), 500);
        assert_eq!(s.test_ids.len(), 100);
    }

    #[test]
    fn identical_clips_have_zero_distance() {
        let idx = DatasetIndex {
            root: PathBuf::new(),
            clips: vec![clip("a", &[(1, 2), (3, -4)]), clip("b", &[(1, 2), (3, -4)])],
        };
        let s = make_split(&idx, 0.5, 0).unwrap();
        assert_eq!(s.histogram_distance, 0.0);
    }

    #[test]
    fn deterministic_disjoint_and_monotone() {
        let idx = index(80, 2);
        let (a, trace) = make_split_traced(&idx, 0.25, 11).unwrap();
        let b = make_split(&idx, 0.25, 11).unwrap();
        assert_eq!(a, b);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.histogram_distance, *trace.last().unwrap());
        let mut all: Vec<&String> = a.train_ids.iter().chain(&a.test_ids).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 80);
    }

    #[test]
    fn rejects_tiny_index_and_bad_fraction() {
        let one = DatasetIndex {
            root: PathBuf::new(),
            clips: vec![clip("a", &[(0, 0), (0, 0)])],
        };
        assert!(make_split(&one, 0.5, 0).is_err());
        assert!(make_split(&index(4, 0), 1.0, 0).is_err());
    }
}
