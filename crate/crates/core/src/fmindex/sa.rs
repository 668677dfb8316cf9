//! Suffix array construction by prefix doubling with radix sorting.
//!
//! Each round is linear, and the number of rounds is logarithmic in the
//! longest repeated substring, so construction is O(n log n) worst case.

/// Suffix array of `text`, whose symbols must all be below `sigma`.
///
/// The text is expected to end with a unique, strictly smallest sentinel so
/// that suffix order is total; without one, shorter suffixes sort first.
pub fn suffix_array(text: &[u32], sigma: usize) -> Vec<u32> {
    let n = text.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(n < u32::MAX as usize, "text too long for 32-bit suffix array");

    // Initial order by first symbol.
    let mut counts = vec![0usize; sigma + 1];
    for &c in text {
        counts[c as usize + 1] += 1;
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let mut sa = vec![0u32; n];
    for (i, &c) in text.iter().enumerate() {
        sa[counts[c as usize]] = i as u32;
        counts[c as usize] += 1;
    }
    let mut rank = vec![0u32; n];
    let mut classes = 1usize;
    for j in 1..n {
        if text[sa[j] as usize] != text[sa[j - 1] as usize] {
            classes += 1;
        }
        rank[sa[j] as usize] = (classes - 1) as u32;
    }

    let mut tmp = vec![0u32; n];
    let mut new_rank = vec![0u32; n];
    let mut k = 1usize;
    while classes < n && k < n {
        // Order by the second half: suffixes whose second half is empty first.
        let mut p = 0;
        for i in n - k..n {
            tmp[p] = i as u32;
            p += 1;
        }
        for &s in &sa {
            if s as usize >= k {
                tmp[p] = s - k as u32;
                p += 1;
            }
        }
        // Stable counting sort by the first half.
        let mut bucket = vec![0usize; classes + 1];
        for &s in &tmp {
            bucket[rank[s as usize] as usize + 1] += 1;
        }
        for i in 1..bucket.len() {
            bucket[i] += bucket[i - 1];
        }
        for &s in &tmp {
            let r = rank[s as usize] as usize;
            sa[bucket[r]] = s;
            bucket[r] += 1;
        }

        let second = |i: usize, rank: &[u32]| -> i64 {
            if i + k < n {
                rank[i + k] as i64
            } else {
                -1
            }
        };
        classes = 1;
        new_rank[sa[0] as usize] = 0;
        for j in 1..n {
            let (prev, cur) = (sa[j - 1] as usize, sa[j] as usize);
            if rank[prev] != rank[cur] || second(prev, &rank) != second(cur, &rank) {
                classes += 1;
            }
            new_rank[cur] = (classes - 1) as u32;
        }
        std::mem::swap(&mut rank, &mut new_rank);
        k <<= 1;
    }
    sa
}
