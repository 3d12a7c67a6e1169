//! Feature hashing of unigrams and adjacent bigrams.
//!
//! Tokens are hashed with 32-bit MurmurHash3 (x86 variant, seed 0) over their
//! UTF-8 bytes; a bigram is the two tokens joined by a single space. The
//! bucket is the low `bits` bits of the hash. Counts are unsigned and
//! colliding tokens add up.

use std::collections::BTreeMap;

use crate::sparse::SparseVec;
use crate::{Error, Result};

pub const MAX_HASH_BITS: u32 = 30;

/// MurmurHash3_x86_32.
pub fn murmur3_32(data: &[u8], seed: u32) -> u32 {
    const C1: u32 = 0xcc9e_2d51;
    const C2: u32 = 0x1b87_3593;

    let mut h = seed;
    let mut blocks = data.chunks_exact(4);
    for block in &mut blocks {
        let mut k = u32::from_le_bytes([block[0], block[1], block[2], block[3]]);
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
        h = h.rotate_left(13).wrapping_mul(5).wrapping_add(0xe654_6b64);
    }
    let tail = blocks.remainder();
    let mut k = 0u32;
    if tail.len() >= 3 {
        k ^= (tail[2] as u32) << 16;
    }
    if tail.len() >= 2 {
        k ^= (tail[1] as u32) << 8;
    }
    if !tail.is_empty() {
        k ^= tail[0] as u32;
        h ^= k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
    }

    h ^= data.len() as u32;
    h ^= h >> 16;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^ (h >> 16)
}

pub fn bucket(token: &str, bits: u32) -> u32 {
    murmur3_32(token.as_bytes(), 0) & ((1u32 << bits) - 1)
}

/// Hashed unigram + bigram counts for a token sequence.
pub fn hash_features<S: AsRef<str>>(tokens: &[S], bits: u32) -> Result<SparseVec> {
    if !(1..=MAX_HASH_BITS).contains(&bits) {
        return Err(Error::invalid(format!(
            "hash bits must be in 1..={MAX_HASH_BITS}, got {bits}"
        )));
    }
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    let mut bigram = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        *counts.entry(bucket(tok, bits)).or_default() += 1.0;
        if i > 0 {
            bigram.clear();
            bigram.push_str(tokens[i - 1].as_ref());
            bigram.push(' ');
            bigram.push_str(tok);
            *counts.entry(bucket(&bigram, bits)).or_default() += 1.0;
        }
    }
    SparseVec::from_pairs(counts)
}
