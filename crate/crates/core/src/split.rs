//! Subject-level train/validation/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestRow};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{s}' (train|val|test)")))
    }
}

/// Reference proportions of the three splits.
pub const REFERENCE_SIZES: [usize; 3] = [910, 242, 186];

/// Image counts proportional to [`REFERENCE_SIZES`] summing to `total`.
pub fn default_sizes(total: usize) -> [usize; 3] {
    let sum: usize = REFERENCE_SIZES.iter().sum();
    let train = (total * REFERENCE_SIZES[0] + sum / 2) / sum;
    let val = (total * REFERENCE_SIZES[1] + sum / 2) / sum;
    [train, val, total - train - val]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentRow {
    subject_id: String,
    split: Split,
}

impl SplitAssignment {
    pub fn get(&self, subject: &str) -> Option<Split> {
        self.map.get(subject).copied()
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<String> {
        self.map.iter().filter(|(_, &s)| s == split).map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for (subject_id, &split) in &self.map {
            w.serialize(AssignmentRow { subject_id: subject_id.clone(), split })
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut map = BTreeMap::new();
        for row in r.deserialize::<AssignmentRow>() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            if map.insert(row.subject_id.clone(), row.split).is_some() {
                return Err(Error::format(path, format!("subject {} assigned twice", row.subject_id)));
            }
        }
        Ok(Self { map })
    }

    /// Manifest rows of one split, in manifest order. Every manifest subject
    /// must be assigned.
    pub fn rows<'a>(&self, manifest: &'a Manifest, split: Split) -> Result<Vec<&'a ManifestRow>> {
        let mut out = Vec::new();
        for r in &manifest.rows {
            let s = self
                .get(&r.subject_id)
                .ok_or_else(|| Error::Data(format!("subject {} has no split assignment", r.subject_id)))?;
            if s == split {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Fails if any subject's images land in more than one split.
    pub fn check_no_leakage(&self, manifest: &Manifest) -> Result<()> {
        let mut seen: [BTreeSet<&str>; 3] = Default::default();
        for s in Split::ALL {
            seen[s.index()] = self.rows(manifest, s)?.iter().map(|r| r.subject_id.as_str()).collect();
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(x) = seen[a].intersection(&seen[b]).next() {
                return Err(Error::Data(format!("subject {x} appears in two splits")));
            }
        }
        Ok(())
    }
}

fn deviation(totals: &[usize; 3], targets: &[usize; 3]) -> usize {
    totals.iter().zip(targets).map(|(&t, &g)| t.abs_diff(g)).sum()
}

/// Greedy randomized assignment of whole subjects to image-count targets,
/// followed by single-subject moves and pairwise swaps while they reduce the
/// total deviation.
pub fn split_by_subject(manifest: &Manifest, sizes: [usize; 3], seed: u64) -> Result<SplitAssignment> {
    let counts = manifest.subject_counts();
    let total: usize = counts.values().sum();
    if sizes.iter().sum::<usize>() != total {
        return Err(Error::InvalidArgument(format!(
            "split sizes {sizes:?} sum to {} but the manifest has {total} images",
            sizes.iter().sum::<usize>()
        )));
    }
    let wanted = sizes.iter().filter(|&&s| s > 0).count();
    if wanted > counts.len() {
        return Err(Error::InvalidArgument(format!(
            "{wanted} nonempty splits requested but only {} subjects",
            counts.len()
        )));
    }
    let mut subjects: Vec<(String, usize)> = counts.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    // Largest subjects first keeps the greedy fill tight; ties keep the
    // shuffled order.
    subjects.sort_by(|a, b| b.1.cmp(&a.1));

    let mut assign = vec![0usize; subjects.len()];
    let mut totals = [0usize; 3];
    for (i, (_, n)) in subjects.iter().enumerate() {
        let best = (0..3)
            .max_by_key(|&s| (sizes[s] as i64 - totals[s] as i64, std::cmp::Reverse(s)))
            .expect("three splits");
        assign[i] = best;
        totals[best] += n;
    }

    let nonempty_after = |totals: &[usize; 3]| (0..3).all(|s| sizes[s] == 0 || totals[s] > 0);
    loop {
        let current = deviation(&totals, &sizes);
        let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
        for i in 0..subjects.len() {
            for to in 0..3 {
                if to == assign[i] {
                    continue;
                }
                let mut t = totals;
                t[assign[i]] -= subjects[i].1;
                t[to] += subjects[i].1;
                let d = deviation(&t, &sizes);
                if d < current && nonempty_after(&t) && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    best = Some((d, vec![(i, to)]));
                }
            }
            for j in i + 1..subjects.len() {
                let (a, b) = (assign[i], assign[j]);
                if a == b || subjects[i].1 == subjects[j].1 {
                    continue;
                }
                let mut t = totals;
                t[a] = t[a] - subjects[i].1 + subjects[j].1;
                t[b] = t[b] - subjects[j].1 + subjects[i].1;
                let d = deviation(&t, &sizes);
                if d < current && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    best = Some((d, vec![(i, b), (j, a)]));
                }
            }
        }
        let Some((_, moves)) = best else { break };
        for (i, to) in moves {
            totals[assign[i]] -= subjects[i].1;
            totals[to] += subjects[i].1;
            assign[i] = to;
        }
    }

    let map = subjects
        .into_iter()
        .zip(assign)
        .map(|((id, _), s)| (id, Split::ALL[s]))
        .collect();
    Ok(SplitAssignment { map })
}
