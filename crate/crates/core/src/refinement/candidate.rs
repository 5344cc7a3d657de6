use std::fmt;

/// Maximum number of classes a [`CandidateSet`] can hold.
pub const MAX_CLASSES: usize = 64;

/// Set of candidate labels, stored as a bitmask (bit `c` set ⇔ `c ∈ S`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CandidateSet(u64);

impl CandidateSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn singleton(c: usize) -> Self {
        debug_assert!(c < MAX_CLASSES);
        Self(1u64 << c)
    }

    /// All classes `0..num_classes`.
    pub fn full(num_classes: usize) -> Self {
        if num_classes >= MAX_CLASSES {
            Self(u64::MAX)
        } else {
            Self((1u64 << num_classes) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        Self(bits)
    }

    pub fn from_classes(classes: &[usize]) -> Self {
        classes.iter().fold(Self(0), |s, &c| s.with(c))
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, c: usize) -> bool {
        c < MAX_CLASSES && self.0 & (1u64 << c) != 0
    }

    pub fn insert(&mut self, c: usize) {
        debug_assert!(c < MAX_CLASSES);
        self.0 |= 1u64 << c;
    }

    pub fn with(mut self, c: usize) -> Self {
        self.insert(c);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: CandidateSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let c = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(c)
        })
    }

    /// 0/1 membership vector of length `num_classes`.
    pub fn indicator(self, num_classes: usize) -> Vec<f64> {
        (0..num_classes).map(|c| if self.contains(c) { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Debug for CandidateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}
