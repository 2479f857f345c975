//! Mixed-radix maps between coordinate tuples and flat table indices.
//!
//! Global states and actions are tuples of per-agent coordinates. Tables are
//! stored flat in row-major order with the last coordinate varying fastest;
//! every file format and checkpoint in this crate uses the same convention.

/// Row-major codec over a fixed list of per-coordinate sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedRadix {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl MixedRadix {
    pub fn new(sizes: &[usize]) -> Self {
        assert!(sizes.iter().all(|&s| s > 0), "coordinate sizes must be positive");
        let mut strides = vec![1usize; sizes.len()];
        for k in (0..sizes.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * sizes[k + 1];
        }
        let len = sizes.iter().product::<usize>().max(1);
        Self { sizes: sizes.to_vec(), strides, len }
    }

    /// Number of flat indices (1 for the empty tuple).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn arity(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Extract one coordinate of a flat index.
    pub fn coordinate(&self, flat: usize, k: usize) -> usize {
        (flat / self.strides[k]) % self.sizes[k]
    }

    pub fn encode(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.sizes.len());
        let mut flat = 0;
        for (k, &c) in coords.iter().enumerate() {
            debug_assert!(c < self.sizes[k]);
            flat += c * self.strides[k];
        }
        flat
    }

    pub fn decode_into(&self, flat: usize, out: &mut [usize]) {
        debug_assert!(flat < self.len);
        debug_assert_eq!(out.len(), self.sizes.len());
        let mut rem = flat;
        for k in 0..self.sizes.len() {
            out[k] = rem / self.strides[k];
            rem %= self.strides[k];
        }
    }

    pub fn decode(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.sizes.len()];
        self.decode_into(flat, &mut out);
        out
    }
}

/// Flat indexing of the coordinates belonging to a fixed agent subset.
///
/// `members` must be sorted ascending; the sub-tuple keeps that order.
#[derive(Clone, Debug)]
pub struct SubsetIndexer {
    members: Vec<usize>,
    radix: MixedRadix,
}

impl SubsetIndexer {
    pub fn new(members: &[usize], full_sizes: &[usize]) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]), "members must be sorted");
        let sizes: Vec<usize> = members.iter().map(|&m| full_sizes[m]).collect();
        Self { members: members.to_vec(), radix: MixedRadix::new(&sizes) }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.radix.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn radix(&self) -> &MixedRadix {
        &self.radix
    }

    /// Encode the member coordinates of a full global tuple.
    pub fn encode_global(&self, global: &[usize]) -> usize {
        let mut flat = 0;
        for (k, &m) in self.members.iter().enumerate() {
            flat += global[m] * self.radix.strides[k];
        }
        flat
    }

    /// Decode a sub-index into the member slots of a full global tuple,
    /// leaving the other slots untouched.
    pub fn scatter_into(&self, flat: usize, global: &mut [usize]) {
        let mut rem = flat;
        for k in 0..self.members.len() {
            global[self.members[k]] = rem / self.radix.strides[k];
            rem %= self.radix.strides[k];
        }
    }
}
