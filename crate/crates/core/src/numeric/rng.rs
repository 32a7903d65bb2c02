use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the toolkit.
pub type Rng = ChaCha8Rng;

/// Root of a tree of independent, reproducible random streams.
///
/// Streams are addressed by a label path; the same `(seed, path)` always
/// yields the same ChaCha stream, independent of how many other streams were
/// drawn before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child node for a textual label.
    pub fn child(&self, label: &str) -> Self {
        Self {
            seed: splitmix(self.seed ^ splitmix(fnv1a(label.as_bytes()))),
        }
    }

    /// Child node for an integer index.
    pub fn index(&self, i: u64) -> Self {
        Self {
            seed: splitmix(self.seed.wrapping_add(splitmix(i ^ 0xA5A5_A5A5_A5A5_A5A5))),
        }
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
