//! Runs independent seeds on a pool of scoped threads.
//!
//! Every seed owns its random stream, so results do not depend on the number
//! of threads or the order in which they finish.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use unitnorm_core::data::MnistDataset;
use unitnorm_core::optimizer::{run_seed, EpochRecord};
use unitnorm_core::{NetworkConfig, Result, RunResult, TrainConfig};

/// Called with the seed and each epoch record as runs progress.
pub type Observer<'a> = dyn Fn(u64, &EpochRecord) + Sync + 'a;

/// Full protocol (search, then training) for each seed, on up to `parallel`
/// threads. Results come back in seed order.
pub fn run_seeds(
    dataset: &MnistDataset,
    net: &NetworkConfig,
    train: &TrainConfig,
    seeds: &[u64],
    parallel: usize,
    observer: &Observer<'_>,
) -> Result<Vec<(u64, RunResult)>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new(seeds.iter().map(|_| None).collect());
    let workers = parallel.clamp(1, seeds.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let result = run_seed(dataset, net, train, seed, &mut |r| observer(seed, r));
                slots.lock().expect("a worker panicked")[i] = Some(result);
            });
        }
    });
    let slots = slots.into_inner().expect("a worker panicked");
    seeds.iter().zip(slots).map(|(&seed, r)| r.expect("every seed is claimed").map(|run| (seed, run))).collect()
}
