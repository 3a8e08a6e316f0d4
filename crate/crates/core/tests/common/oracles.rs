//! Independent reference implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::emulator::MovementClass;
use teleop_core::workflow::edit_distance;

/// Levenshtein distance by memoised recursion over prefixes.
pub fn reference_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut [Option<usize>]) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        let key = i * (b.len() + 1) + j;
        if let Some(d) = memo[key] {
            return d;
        }
        let delete = go(a, b, i - 1, j, memo) + 1;
        let insert = go(a, b, i, j - 1, memo) + 1;
        let replace = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
        let d = delete.min(insert).min(replace);
        memo[key] = Some(d);
        d
    }
    go(a, b, a.len(), b.len(), &mut vec![None; (a.len() + 1) * (b.len() + 1)])
}

/// Every sequence over `alphabet` symbols with length at most `max_len`.
fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Compare against the reference on every pair over two symbols up to length
/// 9 and over three symbols up to length 5, then on random pairs of movement
/// sequences up to length 9. Returns the number of pairs checked.
pub fn exhaustive_edit_distance_check() -> Result<usize, String> {
    let mut pairs = 0;
    for (alphabet, max_len) in [(2u8, 9usize), (3, 5)] {
        let seqs = all_sequences(alphabet, max_len);
        for a in &seqs {
            for b in &seqs {
                let (got, want) = (edit_distance(a, b), reference_edit_distance(a, b));
                if got != want {
                    return Err(format!("edit_distance({a:?}, {b:?}) = {got}, reference {want}"));
                }
                pairs += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100_000 {
        let mut draw = || -> Vec<MovementClass> {
            let n = rng.gen_range(0..=9);
            (0..n).map(|_| MovementClass::ALL[rng.gen_range(0..7)]).collect()
        };
        let (a, b) = (draw(), draw());
        let (got, want) = (edit_distance(&a, &b), reference_edit_distance(&a, &b));
        if got != want {
            return Err(format!("edit_distance({a:?}, {b:?}) = {got}, reference {want}"));
        }
        pairs += 1;
    }
    Ok(pairs)
}
