//! Shape arithmetic: row-major strides and trailing-dimension broadcasting.

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Broadcast shape of two operands under trailing-dimension rules, or
/// `None` when they are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Per-dimension strides of `shape` aligned to `out_shape`, with stride 0
/// on broadcast dimensions.
pub(crate) fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let offset = rank - shape.len();
    let mut out = vec![0; rank];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 { 0 } else { own[i] };
    }
    out
}

/// Visits every element of the broadcast output once, yielding flat indices
/// into the output and both inputs.
pub(crate) fn for_each_bcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..n {
            visit(i, i, i);
        }
        return;
    }
    let rank = out_shape.len();
    let sa = bcast_strides(a_shape, out_shape);
    let sb = bcast_strides(b_shape, out_shape);
    let mut index = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for out_i in 0..n {
        visit(out_i, ai, bi);
        for d in (0..rank).rev() {
            index[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if index[d] < out_shape[d] {
                break;
            }
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
            index[d] = 0;
        }
    }
}

/// Decomposes a shape around `axis` into (outer, len, inner) such that the
/// elements of one lane along `axis` sit at `base + k * inner`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[1], &[5, 5]), Some(vec![5, 5]));
    }

    #[test]
    fn bcast_iteration_covers_all_pairs() {
        // [2,1] against [1,3] -> [2,3]
        let mut seen = Vec::new();
        for_each_bcast2(&[2, 3], &[2, 1], &[1, 3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]
        );
    }

    #[test]
    fn lane_decomposition() {
        assert_eq!(lanes(&[2, 3, 4], 1), (2, 3, 4));
        assert_eq!(lanes(&[5], 0), (1, 5, 1));
    }
}
