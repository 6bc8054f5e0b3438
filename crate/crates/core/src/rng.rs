//! Deterministic, splittable random streams.
//!
//! A [`RandomStream`] is identified by a seed and a path of (label, index)
//! pairs; identical paths give identical draws regardless of thread count or
//! evaluation order, so every Monte Carlo sample and every solver noise draw
//! has its own substream. The scalar generator is counter-based: output n is
//! a strong integer mix of (128-bit stream key, n), with no sequential state
//! beyond the counter.

use crate::error::{Error, Result};
use crate::tensor::TensorGrid;
use rand::RngCore;
use rand_distr::{Distribution, Poisson, StandardNormal};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
// First 128 bits of pi, split into salts that decorrelate the two key lanes.
const SALT: [u64; 4] = [
    0x243f_6a88_85a3_08d3,
    0x1319_8a2e_0370_7344,
    0xa409_3822_299f_31d0,
    0x082e_fa98_ec4e_6c89,
];

/// SplitMix64 finalizer: full-avalanche bijection on u64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, finished with a mix round.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

/// Handle to one deterministic substream. Derive children with
/// [`RandomStream::child`]; draw helpers consume the stream so a substream is
/// used for exactly one sequence of draws.
#[derive(Debug, Clone)]
pub struct RandomStream {
    key: [u64; 2],
}

impl RandomStream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self {
            key: [
                mix64(mix64(seed ^ SALT[0]) ^ SALT[1]),
                mix64(mix64(seed ^ SALT[2]) ^ SALT[3]),
            ],
        }
    }

    /// Substream for (label, index). Identical arguments always produce the
    /// identical stream; distinct arguments produce independent streams.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let lh = hash_label(label);
        Self {
            key: [
                mix64(mix64(self.key[0] ^ lh ^ SALT[0]) ^ index),
                mix64(
                    mix64(self.key[1] ^ lh.rotate_left(32) ^ SALT[2]) ^ index.wrapping_mul(GOLDEN),
                ),
            ],
        }
    }

    /// Raw counter-based generator over this stream.
    pub fn rng(self) -> StreamRng {
        StreamRng {
            k0: self.key[0],
            k1: self.key[1],
            ctr: 0,
        }
    }

    /// `n` i.i.d. standard normal scalars.
    pub fn standard_normal_vec(self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Tensor of i.i.d. standard normals with the given shape.
    pub fn standard_normal(self, shape: &[usize]) -> TensorGrid {
        let count = shape.iter().product();
        let data = self.standard_normal_vec(count);
        TensorGrid::new(shape.to_vec(), data).expect("normal draws are finite")
    }

    /// One uniform draw in [0, 1).
    pub fn uniform(self) -> f64 {
        let mut rng = self.rng();
        rand::Rng::random::<f64>(&mut rng)
    }

    /// Independent Poisson counts, one per entry of `rates`. A zero rate
    /// yields an exact zero; negative rates are an error.
    pub fn poisson(self, rates: &TensorGrid) -> Result<TensorGrid> {
        let mut rng = self.rng();
        let mut out = Vec::with_capacity(rates.len());
        for (idx, &rate) in rates.data().iter().enumerate() {
            if rate < 0.0 {
                return Err(Error::InvalidOperator(format!(
                    "negative Poisson rate {rate} at entry {idx}"
                )));
            }
            if rate == 0.0 {
                out.push(0.0);
            } else {
                let dist = Poisson::new(rate)
                    .map_err(|e| Error::InvalidOperator(format!("poisson rate {rate}: {e}")))?;
                out.push(dist.sample(&mut rng));
            }
        }
        TensorGrid::new(rates.shape().to_vec(), out)
    }
}

/// Counter-mode generator: output n is mix64(mix64(n·φ + k0) ^ k1).
#[derive(Debug, Clone)]
pub struct StreamRng {
    k0: u64,
    k1: u64,
    ctr: u64,
}

impl RngCore for StreamRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let c = self.ctr;
        self.ctr = c.wrapping_add(1);
        mix64(mix64(c.wrapping_mul(GOLDEN).wrapping_add(self.k0)) ^ self.k1)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
