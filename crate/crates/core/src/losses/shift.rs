use crate::autodiff::Segment;
use crate::error::{Error, Result};
use crate::tokens::unit::{BOS, EOS, PAD};

/// `U^{+1}`: prepend bos and drop the final element.
///
/// `u` must end with eos, optionally followed by pad tokens.
pub fn right_shift(u: &[usize]) -> Result<Vec<usize>> {
    let last = u.iter().rposition(|&t| t != PAD);
    match last {
        None => Err(Error::contract("right_shift needs a non-empty, non-pad sequence")),
        Some(i) if u[i] != EOS => Err(Error::contract("right_shift input must end with eos")),
        Some(_) => {
            let mut out = Vec::with_capacity(u.len());
            out.push(BOS);
            out.extend_from_slice(&u[..u.len() - 1]);
            Ok(out)
        }
    }
}

/// `U^{-k}` with its loss mask: drop the first `k` elements and append `k`
/// pads. Pad positions (shifted in or already present) are masked out.
pub fn left_shift(u: &[usize], k: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if k > u.len() {
        return Err(Error::contract(format!(
            "shift {k} exceeds sequence length {}",
            u.len()
        )));
    }
    let mut out = Vec::with_capacity(u.len());
    out.extend_from_slice(&u[k..]);
    out.resize(u.len(), PAD);
    let mask = out.iter().map(|&t| t != PAD).collect();
    Ok((out, mask))
}

/// Left shift applied per segment of a packed batch.
pub fn left_shift_packed(units: &[usize], segs: &[Segment], k: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut targets = Vec::with_capacity(units.len());
    let mut mask = Vec::with_capacity(units.len());
    for s in segs {
        let u = units
            .get(s.offset..s.end())
            .ok_or_else(|| Error::contract("segment exceeds packed units"))?;
        let (t, m) = left_shift(u, k.min(u.len()))?;
        targets.extend(t);
        mask.extend(m);
    }
    Ok((targets, mask))
}
