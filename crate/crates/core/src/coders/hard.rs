use super::{check_dims, encode_columns, sq_dists_to_atoms, ColumnCode, Codes};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::support::SupportSet;

/// One-hot code on the nearest atom; ties go to the lowest atom index.
pub fn encode_ha(x: &Matrix, atoms: &Matrix) -> Result<Codes> {
    check_dims("encode_ha", x, atoms)?;
    encode_columns(x, atoms, |_, col, atoms_t| {
        let d = sq_dists_to_atoms(col, atoms_t);
        let j = nearest(&d);
        Ok(ColumnCode {
            entries: vec![(j, 1.0)],
            support: Some(SupportSet::new(vec![j])),
            flagged: false,
        })
    })
}

pub(crate) fn nearest(d: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in d.iter().enumerate().skip(1) {
        if *v < d[best] {
            best = j;
        }
    }
    best
}
