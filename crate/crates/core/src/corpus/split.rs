use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Session};
use crate::numerics::SeedStream;

pub const DEFAULT_RATIOS: [f64; 3] = [0.75, 0.125, 0.125];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Sessions of one part, in corpus order.
    pub fn select<'a>(&self, sessions: &'a [Session], part: &[String]) -> Vec<&'a Session> {
        let set: std::collections::BTreeSet<&str> = part.iter().map(String::as_str).collect();
        sessions.iter().filter(|s| set.contains(s.id.as_str())).collect()
    }
}

/// Largest-remainder allocation with every part holding at least one item.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 && ratios[i] > 0.0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Session-level shuffle-and-cut.
pub fn split_corpus(sessions: &[Session], ratios: [f64; 3], seed: u64) -> Result<Split, CorpusError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Invalid(format!("split ratios {ratios:?} must sum to 1")));
    }
    if sessions.len() < 3 {
        return Err(CorpusError::Invalid(format!(
            "{} sessions cannot fill 3 splits",
            sessions.len()
        )));
    }
    let mut ids: Vec<String> = sessions.iter().map(|s| s.id.clone()).collect();
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(CorpusError::Invalid(format!("duplicate session id {dup}")));
    }
    ids.shuffle(&mut SeedStream::new(seed).keyed("split", 0));
    let [a, b, _] = allocate(ids.len(), &ratios);
    let test = ids.split_off(a + b);
    let val = ids.split_off(a);
    Ok(Split { train: ids, val, test })
}
