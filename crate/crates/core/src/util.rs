use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub(crate) fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub(crate) fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Incremental SHA-256 over tagged float arrays.
#[derive(Default)]
pub(crate) struct WeightHasher(Sha256);

impl WeightHasher {
    pub fn tag(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn floats<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for v in values {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
