//! Deterministic keyed randomness.
//!
//! Every cipher stage draws from its own [`KeyStream`], derived as
//! `SHA-256(key ‖ stage tag ‖ index_le64)` and expanded with IETF ChaCha20
//! (zero nonce, block counter 0). Uniform integers come from little-endian
//! 32-bit reads with rejection sampling, and permutations from a fixed
//! Fisher–Yates convention, so independent implementations agree bit for bit.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chacha20::cipher::{KeyIvInit, StreamCipher, StreamCipherSeek};
use chacha20::ChaCha20;
use rand::rngs::OsRng;
use rand::TryRngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KEY_LEN: usize = 32;

/// A 32-byte secret. The fingerprint is the first 8 hex characters of its SHA-256.
#[derive(Clone, PartialEq, Eq)]
pub struct MasterKey {
    bytes: [u8; KEY_LEN],
}

impl MasterKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self { bytes }
    }

    /// Draws a fresh key from the operating system entropy source.
    pub fn generate() -> Result<Self> {
        let mut bytes = [0u8; KEY_LEN];
        OsRng
            .try_fill_bytes(&mut bytes)
            .map_err(|e| Error::invalid(format!("os entropy source failed: {e}")))?;
        Ok(Self { bytes })
    }

    pub fn from_hex(text: &str) -> Result<Self> {
        let text = text.trim_end_matches(['\n', '\r']);
        if text.len() != 2 * KEY_LEN
            || !text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
        {
            return Err(Error::Format {
                what: "key",
                detail: format!("expected {} lowercase hex characters", 2 * KEY_LEN),
            });
        }
        let mut bytes = [0u8; KEY_LEN];
        hex::decode_to_slice(text, &mut bytes).map_err(|e| Error::Format {
            what: "key",
            detail: e.to_string(),
        })?;
        Ok(Self { bytes })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    pub fn key_id(&self) -> String {
        let digest = Sha256::digest(self.bytes);
        hex::encode(&digest[..4])
    }

    /// Returns a copy with bit `bit` (0 = LSB of byte 0) inverted.
    pub fn with_flipped_bit(&self, bit: usize) -> Self {
        assert!(bit < KEY_LEN * 8, "bit index {bit} out of range");
        let mut bytes = self.bytes;
        bytes[bit / 8] ^= 1 << (bit % 8);
        Self { bytes }
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_hex(&text)
    }

    /// Writes `<key_id>.key` into `dir`, refusing to clobber unless `force`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>, force: bool) -> Result<PathBuf> {
        let path = dir.as_ref().join(format!("{}.key", self.key_id()));
        self.write_file(&path, force)?;
        Ok(path)
    }

    pub fn write_file(&self, path: impl AsRef<Path>, force: bool) -> Result<()> {
        let path = path.as_ref();
        if path.exists() && !force {
            return Err(Error::invalid(format!(
                "{} already exists (use --force to overwrite)",
                path.display()
            )));
        }
        fs::write(path, format!("{}\n", self.to_hex())).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MasterKey")
            .field("key_id", &self.key_id())
            .finish_non_exhaustive()
    }
}

/// Cipher stage selector used for domain separation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageTag {
    PixelScramble,
    BlockShuffle,
    NegPos,
    ChannelShuffle,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [
        StageTag::PixelScramble,
        StageTag::BlockShuffle,
        StageTag::NegPos,
        StageTag::ChannelShuffle,
    ];

    pub fn tag_bytes(self) -> &'static [u8] {
        match self {
            StageTag::PixelScramble => b"pixscr",
            StageTag::BlockShuffle => b"blkshf",
            StageTag::NegPos => b"negpos",
            StageTag::ChannelShuffle => b"chnshf",
        }
    }
}

const BUF_LEN: usize = 256;

/// Sequential keystream. Not meant to be shared between consumers; derive
/// one stream per worker with distinct indices instead.
pub struct KeyStream {
    seed: [u8; 32],
    position: u64,
    cipher: ChaCha20,
    buf: [u8; BUF_LEN],
    buf_pos: usize,
}

impl Clone for KeyStream {
    fn clone(&self) -> Self {
        let mut cipher = ChaCha20::new(&self.seed.into(), &[0u8; 12].into());
        cipher.seek(self.cipher.current_pos::<u64>());
        Self {
            seed: self.seed,
            position: self.position,
            cipher,
            buf: self.buf,
            buf_pos: self.buf_pos,
        }
    }
}

impl fmt::Debug for KeyStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyStream")
            .field("seed", &hex::encode(self.seed))
            .field("position", &self.position)
            .finish()
    }
}

impl KeyStream {
    /// Keystream keyed directly by `seed`, starting at byte 0.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let cipher = ChaCha20::new(&seed.into(), &[0u8; 12].into());
        Self {
            seed,
            position: 0,
            cipher,
            buf: [0u8; BUF_LEN],
            buf_pos: BUF_LEN,
        }
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    /// Number of bytes consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        let mut written = 0;
        while written < out.len() {
            if self.buf_pos == BUF_LEN {
                self.buf = [0u8; BUF_LEN];
                self.cipher.apply_keystream(&mut self.buf);
                self.buf_pos = 0;
            }
            let take = (BUF_LEN - self.buf_pos).min(out.len() - written);
            out[written..written + take]
                .copy_from_slice(&self.buf[self.buf_pos..self.buf_pos + take]);
            self.buf_pos += take;
            written += take;
        }
        self.position += out.len() as u64;
    }

    pub fn read_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut out = vec![0u8; n];
        self.fill(&mut out);
        out
    }

    pub fn next_u32(&mut self) -> u32 {
        let mut word = [0u8; 4];
        self.fill(&mut word);
        u32::from_le_bytes(word)
    }

    /// Unbiased draw from `[0, n)`; rejects 32-bit reads at or above the
    /// largest multiple of `n` that fits in 2^32.
    pub fn next_uniform(&mut self, n: u32) -> Result<u32> {
        if n == 0 {
            return Err(Error::invalid("next_uniform requires n >= 1"));
        }
        let n64 = u64::from(n);
        let limit = ((1u64 << 32) / n64) * n64;
        loop {
            let v = u64::from(self.next_u32());
            if v < limit {
                return Ok((v % n64) as u32);
            }
        }
    }

    /// Fisher–Yates over `0..n`: for i from n-1 down to 1, swap i with
    /// `next_uniform(i + 1)`.
    pub fn permutation(&mut self, n: usize) -> Result<Permutation> {
        if n == 0 {
            return Err(Error::invalid("permutation length must be >= 1"));
        }
        let bound =
            u32::try_from(n).map_err(|_| Error::invalid("permutation length exceeds u32"))?;
        let mut mapping: Vec<usize> = (0..n).collect();
        for i in (1..bound).rev() {
            let j = self.next_uniform(i + 1)? as usize;
            mapping.swap(i as usize, j);
        }
        Ok(Permutation { mapping })
    }

    /// `count` bits, each the low bit of one `next_uniform(2)` draw.
    pub fn bits(&mut self, count: usize) -> Vec<bool> {
        (0..count)
            .map(|_| self.next_uniform(2).expect("n = 2 is valid") & 1 == 1)
            .collect()
    }
}

/// Keystream for `stage` at `index` (block ordinal, or 0 for image-wide stages).
pub fn derive_stream(key: &MasterKey, stage: StageTag, index: u64) -> KeyStream {
    let mut hasher = Sha256::new();
    hasher.update(key.as_bytes());
    hasher.update(stage.tag_bytes());
    hasher.update(index.to_le_bytes());
    let seed: [u8; 32] = hasher.finalize().into();
    KeyStream::from_seed(seed)
}

/// A bijection on `0..n`, stored as its image table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn from_vec(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid(format!("not a permutation: {mapping:?}")));
            }
        }
        Ok(Self { mapping })
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `out[j] = items[self[j]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        self.check_len(items.len())?;
        Ok(self.mapping.iter().map(|&m| items[m].clone()).collect())
    }

    /// Undoes [`Permutation::apply`]: `out[self[j]] = items[j]`.
    pub fn apply_inverse<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        self.inverse().apply(items)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.mapping.len() {
            return Err(Error::dims(format!(
                "permutation of length {} applied to {} items",
                self.mapping.len(),
                n
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Permutation {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.mapping[i]
    }
}
