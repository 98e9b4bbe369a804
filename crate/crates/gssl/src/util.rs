//! Seed derivation and little-endian binary IO helpers shared across modules.

use std::io::{self, Read, Write};

/// SplitMix64 finalizer. Bijective on u64, good avalanche; used to derive
/// decorrelated child seeds from a root seed plus context words.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` for a named stream plus context words
/// (epoch number, iteration number, ...). Same inputs always give the same
/// seed; distinct streams give unrelated sequences. This is what makes
/// dropout masks and epoch schedules independent of worker count: they are
/// keyed by global iteration index, never by thread identity.
pub fn derive_seed(root: u64, stream: u64, words: &[u64]) -> u64 {
    let mut s = splitmix64(root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for &w in words {
        s = splitmix64(s ^ w);
    }
    s
}

/// Stream tags for `derive_seed`. Values are arbitrary but fixed; they only
/// need to be distinct.
pub mod streams {
    /// Synthetic data generation (CLI stage seed).
    pub const DATA_GEN: u64 = 0x4441_5441;
    /// Label subsampling (CLI stage seed).
    pub const LABEL_DROP: u64 = 0x4452_4F50;
    /// Parameter initialization (CLI stage seed).
    pub const INIT: u64 = 0x494E_4954;
    /// Graph partitioning (CLI stage seed).
    pub const PARTITION: u64 = 0x5041_5254;
    /// Meta-batch plan construction (CLI stage seed).
    pub const PLAN: u64 = 0x504C_414E;
    /// Per-epoch schedule shuffling and pairing.
    pub const EPOCH: u64 = 0x4550_4F43;
    /// Per-iteration dropout masks.
    pub const DROPOUT: u64 = 0x444F_5554;
}

pub fn write_u32_le<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64_le<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_i32_le<W: Write>(w: &mut W, v: i32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32_le<W: Write>(w: &mut W, v: f32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64_le<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32_le<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64_le<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_i32_le<R: Read>(r: &mut R) -> io::Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

pub fn read_f32_le<R: Read>(r: &mut R) -> io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f64_le<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
