use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Global 0-based position of a sample in a corpus enumeration.
pub type SampleIndex = u32;

/// Strictly increasing set of sample indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PostingList(Vec<SampleIndex>);

impl PostingList {
    pub const EMPTY: PostingList = PostingList(Vec::new());

    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(mut indices: Vec<SampleIndex>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// Wraps indices that are already strictly increasing.
    ///
    /// Returns `None` if they are not.
    pub fn from_sorted(indices: Vec<SampleIndex>) -> Option<Self> {
        indices
            .windows(2)
            .all(|w| w[0] < w[1])
            .then_some(Self(indices))
    }

    /// Appends an index; ignored if it equals the last one.
    ///
    /// # Panics
    /// If `index` is smaller than the last element.
    pub fn push(&mut self, index: SampleIndex) {
        match self.0.last() {
            Some(&last) if last == index => {}
            Some(&last) => {
                assert!(
                    last < index,
                    "posting list push out of order: {index} after {last}"
                );
                self.0.push(index);
            }
            None => self.0.push(index),
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[SampleIndex] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<SampleIndex> {
        self.0
    }

    pub fn contains(&self, index: SampleIndex) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleIndex> + '_ {
        self.0.iter().copied()
    }

    pub fn last(&self) -> Option<SampleIndex> {
        self.0.last().copied()
    }

    pub fn is_subset(&self, other: &PostingList) -> bool {
        self.len() <= other.len()
            && intersect_pair(self.as_slice(), other.as_slice()).len() == self.len()
    }
}

impl<'a> IntoIterator for &'a PostingList {
    type Item = SampleIndex;
    type IntoIter = std::iter::Copied<std::slice::Iter<'a, SampleIndex>>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter().copied()
    }
}

/// Intersects posting lists. `None` for an empty input.
///
/// Lists are processed shortest first; each step gallops through the longer
/// list so the cost is bounded by the shortest list times a log factor.
pub fn intersect(lists: &[&PostingList]) -> Option<PostingList> {
    let mut order: Vec<&PostingList> = lists.to_vec();
    order.sort_by_key(|l| l.len());
    let (first, rest) = order.split_first()?;
    let mut acc = first.as_slice().to_vec();
    for list in rest {
        if acc.is_empty() {
            break;
        }
        acc = intersect_pair(&acc, list.as_slice());
    }
    Some(PostingList(acc))
}

fn intersect_pair(small: &[SampleIndex], large: &[SampleIndex]) -> Vec<SampleIndex> {
    let (small, large) = if small.len() <= large.len() {
        (small, large)
    } else {
        (large, small)
    };
    let mut out = Vec::with_capacity(small.len());
    if small.len() * 16 < large.len() {
        let mut lo = 0;
        for &v in small {
            lo += gallop(&large[lo..], v);
            if lo >= large.len() {
                break;
            }
            if large[lo] == v {
                out.push(v);
                lo += 1;
            }
        }
    } else {
        let (mut i, mut j) = (0, 0);
        while i < small.len() && j < large.len() {
            match small[i].cmp(&large[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    out.push(small[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    out
}

/// Position of the first element `>= target`.
fn gallop(slice: &[SampleIndex], target: SampleIndex) -> usize {
    let mut bound = 1;
    while bound < slice.len() && slice[bound] < target {
        bound *= 2;
    }
    let lo = bound / 2;
    let hi = (bound + 1).min(slice.len());
    lo + slice[lo..hi].partition_point(|&x| x < target)
}
