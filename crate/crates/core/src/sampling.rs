use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform sample of `n` items without replacement, deterministic in `seed`.
/// Selected items keep their input order; `n >= len` returns everything.
pub fn sample_subset<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, items.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}
