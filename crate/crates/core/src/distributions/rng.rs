//! Counter-based random streams.
//!
//! Each stream is a Philox4x32-10 block cipher keyed by a 64-bit seed and
//! driven by a 128-bit counter, so the `n`-th draw depends only on
//! `(seed, n)`. Independent streams are forked by seed derivation, never by
//! sharing a stream between consumers.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Ten rounds of Philox4x32 on `ctr` under `key`.
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u128,
    buffered: Option<u64>,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            buffered: None,
            spare_normal: None,
        }
    }

    /// An independent child stream identified by `tag`.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    /// Child stream for a path of tags, e.g. `(step, example)`.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(self.clone_root(), |s, &t| s.derive(t))
    }

    fn clone_root(&self) -> Self {
        Self::new(self.seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of Philox blocks consumed so far.
    pub fn counter(&self) -> u128 {
        self.counter
    }

    fn next_block(&mut self) -> [u32; 4] {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        let ctr = [c as u32, (c >> 32) as u32, (c >> 64) as u32, (c >> 96) as u32];
        philox4x32_10(ctr, [self.seed as u32, (self.seed >> 32) as u32])
    }

    pub fn next_u64(&mut self) -> u64 {
        if let Some(v) = self.buffered.take() {
            return v;
        }
        let b = self.next_block();
        self.buffered = Some(u64::from(b[2]) | (u64::from(b[3]) << 32));
        u64::from(b[0]) | (u64::from(b[1]) << 32)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box–Muller; the second variate is kept for the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = self.open01();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngStream::new(43);
        assert_ne!(RngStream::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn frozen_first_draws() {
        // Pinned so any change to the stream layout is caught.
        let mut r = RngStream::new(0);
        assert_eq!(r.next_u64(), 0xe169_c58d_6627_e8d5);
        assert_eq!(r.next_u64(), 0x9b00_dbd8_bc57_ac4c);
    }

    #[test]
    fn derived_streams_differ() {
        let root = RngStream::new(7);
        let mut a = root.derive(1);
        let mut b = root.derive(2);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = root.derive_path(&[3, 4]);
        let mut d = root.derive(3).derive(4);
        assert_eq!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut r = RngStream::new(99);
        let n = 200_000;
        let u: Vec<f64> = (0..n).map(|_| r.next_f64()).collect();
        let mean = u.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.0f64 / 12.0 / n as f64).sqrt() * 1.5);
        let z = r.normal_vec(n);
        let m = z.iter().sum::<f64>() / n as f64;
        let v = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut r = RngStream::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = r.below(7) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
