use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DomainCorpus, TrainingExample};
use crate::error::{Error, Result};

/// Position of an example: `corpora[corpus].train[index]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExampleRef {
    pub corpus: usize,
    pub index: usize,
}

pub type Batch = Vec<ExampleRef>;

pub fn resolve<'a>(corpora: &'a [DomainCorpus], r: ExampleRef) -> &'a TrainingExample {
    &corpora[r.corpus].train[r.index]
}

/// Without-replacement index stream over `len` items, reshuffled at every
/// epoch boundary. A partial tail that cannot fill a draw is skipped.
#[derive(Clone, Debug)]
struct EpochQueue {
    len: usize,
    seed: u64,
    stream: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochQueue {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut q = EpochQueue {
            len,
            seed,
            stream,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        q.shuffle();
        q
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stream << 32) | self.epoch);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn draw(&mut self, n: usize) -> &[usize] {
        if self.cursor + n > self.len {
            self.epoch += 1;
            self.shuffle();
        }
        let out = &self.order[self.cursor..self.cursor + n];
        self.cursor += n;
        out
    }
}

/// Batch stream holding exactly `n` examples of every corpus per batch,
/// interleaved round-robin in corpus order.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    n: usize,
    queues: Vec<EpochQueue>,
}

pub fn balanced_batches(corpora: &[DomainCorpus], n: usize, seed: u64) -> Result<BalancedSampler> {
    if n == 0 {
        return Err(Error::Sampler("per-domain batch size must be positive".into()));
    }
    if corpora.is_empty() {
        return Err(Error::Sampler("no corpora".into()));
    }
    for c in corpora {
        if c.train.len() < n {
            return Err(Error::Sampler(format!(
                "{} corpus has {} examples, fewer than {n} per batch",
                c.domain,
                c.train.len()
            )));
        }
    }
    Ok(BalancedSampler {
        n,
        queues: corpora
            .iter()
            .enumerate()
            .map(|(i, c)| EpochQueue::new(c.train.len(), seed, i as u64 + 1))
            .collect(),
    })
}

impl Iterator for BalancedSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let n = self.n;
        let draws: Vec<Vec<usize>> = self.queues.iter_mut().map(|q| q.draw(n).to_vec()).collect();
        let mut batch = Vec::with_capacity(n * draws.len());
        for slot in 0..n {
            for (corpus, d) in draws.iter().enumerate() {
                batch.push(ExampleRef {
                    corpus,
                    index: d[slot],
                });
            }
        }
        Some(batch)
    }
}

/// Batch stream over the pooled corpora with no per-domain quota: the
/// natural-mixing baseline.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    batch_size: usize,
    pool: Vec<ExampleRef>,
    queue: EpochQueue,
}

pub fn mixed_batches(corpora: &[DomainCorpus], batch_size: usize, seed: u64) -> Result<MixedSampler> {
    let pool: Vec<ExampleRef> = corpora
        .iter()
        .enumerate()
        .flat_map(|(corpus, c)| (0..c.train.len()).map(move |index| ExampleRef { corpus, index }))
        .collect();
    if batch_size == 0 || pool.len() < batch_size {
        return Err(Error::Sampler(format!(
            "cannot draw batches of {batch_size} from {} examples",
            pool.len()
        )));
    }
    Ok(MixedSampler {
        batch_size,
        queue: EpochQueue::new(pool.len(), seed, 0),
        pool,
    })
}

impl Iterator for MixedSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.queue.draw(self.batch_size);
        Some(idx.iter().map(|&i| self.pool[i]).collect())
    }
}
