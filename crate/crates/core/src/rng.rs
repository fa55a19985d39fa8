//! Counter-based random streams for reproducible experiments.
//!
//! A [`Stream`] is a 64-bit key derived from a master seed and a path of
//! integer parts (trial index, stream role, ...). Values are produced by
//! mixing the key with a counter, so any `(stream, counter)` address yields
//! the same value regardless of evaluation order or thread. This is what
//! makes common random numbers work: every policy run against the same
//! `(seed, trial)` sees the same signal and the same noise at the same
//! `(stage, component)` address, even though the allocations differ.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; full-period bijection on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Role of a random stream within one trial, used as a derivation part so
/// the signal, channel noise, and policy-internal draws never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Signal,
    Noise,
    Policy,
    Scene,
    Pulse,
}

impl Role {
    #[inline]
    fn tag(self) -> u64 {
        match self {
            Role::Signal => 0x5349_474e,
            Role::Noise => 0x4e4f_4953,
            Role::Policy => 0x504f_4c49,
            Role::Scene => 0x5343_454e,
            Role::Pulse => 0x5055_4c53,
        }
    }
}

/// A stateless, counter-addressed random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    /// Derive a stream from a master seed and a path of parts.
    pub fn derive(master: u64, parts: &[u64]) -> Stream {
        let mut key = mix(master ^ GOLDEN);
        for &p in parts {
            key = Stream::fold(key, p);
        }
        Stream { key }
    }

    /// Derive the per-trial stream for a given role.
    pub fn for_trial(master: u64, trial: u64, role: Role) -> Stream {
        Stream::derive(master, &[trial, role.tag()])
    }

    /// Fold one more part into the key (order-sensitive).
    #[inline]
    fn fold(key: u64, part: u64) -> u64 {
        mix(key.rotate_left(17) ^ mix(part.wrapping_add(GOLDEN)))
    }

    /// Fork a sub-stream by extending the derivation path.
    pub fn substream(&self, parts: &[u64]) -> Stream {
        let mut key = self.key;
        for &p in parts {
            key = Stream::fold(key, p);
        }
        Stream { key }
    }

    /// Raw 64-bit value at a counter address.
    #[inline]
    pub fn value_at(&self, ctr: u64) -> u64 {
        mix(self.key.wrapping_add(ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) at a counter address.
    #[inline]
    pub fn uniform_at(&self, ctr: u64) -> f64 {
        (self.value_at(ctr) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal at a counter address (Box-Muller on two sub-draws).
    #[inline]
    pub fn normal_at(&self, ctr: u64) -> f64 {
        self.normal_from(2 * ctr, 2 * ctr + 1)
    }

    #[inline]
    fn normal_from(&self, ctr1: u64, ctr2: u64) -> f64 {
        // open-interval uniform in (0, 1] so the log is finite
        let u1 = ((self.value_at(ctr1) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform_at(ctr2);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sequential adapter over this stream.
    pub fn sequence(&self) -> SeqStream {
        SeqStream {
            stream: *self,
            ctr: 0,
        }
    }
}

/// Sequential view of a [`Stream`]: draws advance an internal counter.
#[derive(Debug, Clone)]
pub struct SeqStream {
    stream: Stream,
    ctr: u64,
}

impl SeqStream {
    pub fn next_u64(&mut self) -> u64 {
        let v = self.stream.value_at(self.ctr);
        self.ctr += 1;
        v
    }

    pub fn next_uniform(&mut self) -> f64 {
        let v = self.stream.uniform_at(self.ctr);
        self.ctr += 1;
        v
    }

    pub fn next_normal(&mut self) -> f64 {
        // consumes two consecutive raw addresses so mixed uniform/normal
        // sequences never revisit an address
        let v = self.stream.normal_from(self.ctr, self.ctr + 1);
        self.ctr += 2;
        v
    }
}
