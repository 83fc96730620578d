use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::SeqBatch;
use crate::tokenize::{BOS_ID, EOS_ID, PAD_ID};

/// One id-encoded training pair. `src` already carries its trailing EOS;
/// `tgt` has neither BOS nor EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn new(src_tokens: Vec<usize>, tgt: Vec<usize>) -> Self {
        let mut src = src_tokens;
        src.push(EOS_ID);
        Example { src, tgt }
    }
}

/// Padded, teacher-forced batch: `tgt_in = BOS + y`, `tgt_out = y + EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: SeqBatch,
    pub tgt_in: SeqBatch,
    /// Same shape as `tgt_in.ids`, padded with `PAD_ID`.
    pub tgt_out: Array2<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Batch {
        let srcs: Vec<&[usize]> = examples.iter().map(|e| e.src.as_slice()).collect();
        let tgt_in: Vec<Vec<usize>> =
            examples.iter().map(|e| std::iter::once(BOS_ID).chain(e.tgt.iter().copied()).collect()).collect();
        let tgt_out: Vec<Vec<usize>> =
            examples.iter().map(|e| e.tgt.iter().copied().chain(std::iter::once(EOS_ID)).collect()).collect();
        let tgt_in = SeqBatch::from_seqs(&tgt_in);
        let tgt_out = SeqBatch::from_seqs(&tgt_out).ids;
        Batch { src: SeqBatch::from_seqs(&srcs), tgt_in, tgt_out }
    }

    pub fn len(&self) -> usize {
        self.src.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major target ids, aligned with the rows of the training logits.
    pub fn targets(&self) -> Vec<usize> {
        self.tgt_out.iter().copied().collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD_ID).count()
    }

    pub fn pad_count(&self) -> usize {
        self.src.pad_count() + self.tgt_in.pad_count()
    }
}

/// Groups examples of similar target (then source) length into batches and
/// shuffles the batch order. Ties in length are broken by a seeded shuffle,
/// so the whole result is a function of `seed`.
pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (examples[i].tgt.len(), examples[i].src.len()));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&members)
        })
        .collect();
    batches.shuffle(&mut rng);
    batches
}
