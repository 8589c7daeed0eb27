//! Signed integer-log distance buckets relative to an entity span.

use super::instance::Span;

/// Buckets are clipped to `[-POSITION_CLIP, POSITION_CLIP]`; ±9 covers
/// distances up to 511 tokens.
pub const POSITION_CLIP: i32 = 9;

/// Rows needed in a position embedding table.
pub const POSITION_ROWS: usize = (2 * POSITION_CLIP + 1) as usize;

fn floor_log2(x: usize) -> i32 {
    debug_assert!(x >= 1);
    (usize::BITS - 1 - x.leading_zeros()) as i32
}

/// Unclipped bucket of 1-based token `i` relative to the span `s1..=s2`:
/// `-⌊log₂(s1−i)⌋−1` before it, `0` inside, `⌊log₂(i−s2)⌋+1` after it.
pub fn binary_position(i: usize, s1: usize, s2: usize) -> i32 {
    if i < s1 {
        -floor_log2(s1 - i) - 1
    } else if i <= s2 {
        0
    } else {
        floor_log2(i - s2) + 1
    }
}

/// Bucket clipped to the table range.
pub fn clipped_position(i: usize, span: Span) -> i32 {
    binary_position(i, span.start, span.end).clamp(-POSITION_CLIP, POSITION_CLIP)
}

/// Table row for every token of an `n`-token sentence.
pub fn position_rows(n: usize, span: Span) -> Vec<usize> {
    (1..=n)
        .map(|i| (clipped_position(i, span) + POSITION_CLIP) as usize)
        .collect()
}
