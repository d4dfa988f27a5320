//! Speaker permutations.
//!
//! A permutation `p` assigns output stream `p[s]` to reference speaker `s`.

pub type Permutation = Vec<usize>;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Permutation> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot has a successor");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

pub fn identity(n: usize) -> Permutation {
    (0..n).collect()
}

/// Index of the smallest cost, keeping the earliest on ties.
pub(crate) fn argmin(costs: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in costs.into_iter().enumerate() {
        if best.map_or(true, |(_, b)| c < b) {
            best = Some((i, c));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_enumeration() {
        assert_eq!(
            permutations(3),
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn validity() {
        assert!(is_permutation(&[1, 0, 2]));
        assert!(!is_permutation(&[1, 1]));
        assert!(!is_permutation(&[2, 0]));
    }

    #[test]
    fn argmin_keeps_first_tie() {
        assert_eq!(argmin([3.0, 1.0, 1.0]), Some((1, 1.0)));
        assert_eq!(argmin(std::iter::empty()), None);
    }
}
