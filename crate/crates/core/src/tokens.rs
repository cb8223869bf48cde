//! Reserved ids shared by the unit and text vocabularies.

/// Unit vocabulary: reserved ids first, then `n_semantic × units_per_semantic` units.
pub mod unit {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const FIRST: usize = 3;
    pub const RESERVED: usize = 3;
}

/// Text vocabulary: CTC blank at 0, then pad/bos/eos, then semantic tokens.
pub mod text {
    pub const BLANK: usize = 0;
    pub const PAD: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    pub const FIRST: usize = 4;
    pub const RESERVED: usize = 4;

    pub fn from_semantic(s: usize) -> usize {
        s + FIRST
    }

    pub fn to_semantic(t: usize) -> Option<usize> {
        t.checked_sub(FIRST)
    }
}
