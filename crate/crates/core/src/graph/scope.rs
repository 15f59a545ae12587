use std::fmt;

/// Set of variable indices covered by a node.
///
/// Variables are flattened row-major over the input grid. The capacity is
/// fixed when the scope is created and every scope of one network shares it.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Scope {
    capacity: usize,
    words: Box<[u64]>,
}

impl Scope {
    pub fn empty(capacity: usize) -> Self {
        Scope {
            capacity,
            words: vec![0u64; capacity.div_ceil(64)].into_boxed_slice(),
        }
    }

    pub fn singleton(capacity: usize, var: usize) -> Self {
        let mut s = Scope::empty(capacity);
        s.insert(var);
        s
    }

    pub fn full(capacity: usize) -> Self {
        let mut s = Scope::empty(capacity);
        for v in 0..capacity {
            s.insert(v);
        }
        s
    }

    pub fn from_vars(capacity: usize, vars: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Scope::empty(capacity);
        for v in vars {
            s.insert(v);
        }
        s
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, var: usize) {
        assert!(
            var < self.capacity,
            "variable {var} out of scope capacity {}",
            self.capacity
        );
        self.words[var / 64] |= 1u64 << (var % 64);
    }

    pub fn contains(&self, var: usize) -> bool {
        var < self.capacity && self.words[var / 64] & (1u64 << (var % 64)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &Scope) {
        debug_assert_eq!(self.capacity, other.capacity);
        for (a, b) in self.words.iter_mut().zip(other.words.iter()) {
            *a |= *b;
        }
    }

    pub fn union(&self, other: &Scope) -> Scope {
        let mut s = self.clone();
        s.union_with(other);
        s
    }

    pub fn intersection(&self, other: &Scope) -> Scope {
        let mut s = self.clone();
        for (a, b) in s.words.iter_mut().zip(other.words.iter()) {
            *a &= *b;
        }
        s
    }

    pub fn is_disjoint(&self, other: &Scope) -> bool {
        self.words.iter().zip(other.words.iter()).all(|(a, b)| a & b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
        })
    }
}

impl fmt::Debug for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, v) in self.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}
