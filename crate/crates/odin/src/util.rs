//! Deterministic RNG substreams and the worker-thread helper.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; used to mix stream tags into seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream derived from a base seed and up to two tags.
/// Identical arguments always yield an identical stream, so per-image work
/// can run on any number of workers without changing results.
pub fn substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let s = mix(seed ^ mix(tag ^ mix(index)));
    ChaCha8Rng::seed_from_u64(s)
}

/// Worker-thread cap from `ODIN_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("ODIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Map `f` over `0..n`, splitting the indices over up to `threads` workers.
/// Output order is by index, independent of the worker count.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(t * chunk + i));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("worker filled every slot")).collect()
}
