//! Maximum-weight assignment on small square matrices.
//!
//! Block-matching problems here have q <= ~16: below 9 an exhaustive scan is
//! instant and gives the lexicographically-least argmax (the documented
//! tie-break); above, the Hungarian algorithm in O(q^3) takes over (ties
//! then resolve arbitrarily and are not flagged).

/// Result of a maximum assignment: `perm[i]` is the column matched to row
/// `i`, `total` the achieved weight sum. `tied` reports whether another
/// permutation achieves the same total (known only on the exhaustive path).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total: i64,
    pub tied: Option<bool>,
}

/// Maximize `sum_i w[i][perm[i]]` over permutations; `w` is row-major q x q.
pub fn max_assignment(w: &[i64], q: usize) -> Assignment {
    debug_assert_eq!(w.len(), q * q);
    if q <= 8 {
        exhaustive(w, q)
    } else {
        hungarian(w, q)
    }
}

fn exhaustive(w: &[i64], q: usize) -> Assignment {
    let mut perm: Vec<usize> = (0..q).collect();
    let mut best: Option<(i64, Vec<usize>)> = None;
    let mut ties = false;
    // Lexicographic permutation enumeration keeps the first argmax minimal.
    loop {
        let total: i64 = perm.iter().enumerate().map(|(i, &j)| w[i * q + j]).sum();
        match &best {
            Some((bt, _)) if total == *bt => ties = true,
            Some((bt, _)) if total > *bt => {
                best = Some((total, perm.clone()));
                ties = false;
            }
            None => best = Some((total, perm.clone())),
            _ => {}
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (total, perm) = best.unwrap();
    Assignment {
        perm,
        total,
        tied: Some(ties),
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Hungarian algorithm (shortest augmenting paths with potentials), on the
/// minimization of `max_w - w`.
fn hungarian(w: &[i64], q: usize) -> Assignment {
    let max_w = *w.iter().max().unwrap_or(&0);
    let cost = |i: usize, j: usize| max_w - w[i * q + j];

    // 1-based arrays in the classical formulation.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; q + 1];
    let mut v = vec![0i64; q + 1];
    let mut match_col = vec![0usize; q + 1]; // row matched to each column

    for i in 1..=q {
        let mut links = vec![0usize; q + 1];
        let mut mins = vec![inf; q + 1];
        let mut visited = vec![false; q + 1];
        let mut marked_col = 0usize;
        match_col[0] = i;
        loop {
            visited[marked_col] = true;
            let row = match_col[marked_col];
            let mut delta = inf;
            let mut next_col = 0usize;
            for col in 1..=q {
                if visited[col] {
                    continue;
                }
                let reduced = cost(row - 1, col - 1) - u[row] - v[col];
                if reduced < mins[col] {
                    mins[col] = reduced;
                    links[col] = marked_col;
                }
                if mins[col] < delta {
                    delta = mins[col];
                    next_col = col;
                }
            }
            for col in 0..=q {
                if visited[col] {
                    u[match_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    mins[col] -= delta;
                }
            }
            marked_col = next_col;
            if match_col[marked_col] == 0 {
                break;
            }
        }
        // Augment along the found path.
        while marked_col != 0 {
            let prev = links[marked_col];
            match_col[marked_col] = match_col[prev];
            marked_col = prev;
        }
    }

    let mut perm = vec![0usize; q];
    for col in 1..=q {
        if match_col[col] > 0 {
            perm[match_col[col] - 1] = col - 1;
        }
    }
    let total = perm.iter().enumerate().map(|(i, &j)| w[i * q + j]).sum();
    Assignment {
        perm,
        total,
        tied: None,
    }
}
