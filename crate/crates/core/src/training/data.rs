//! Batches of generated sequences and a background producer.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::datagen::{generate_sequence, AnnotatedSequence, DatasetSpec, DigitGlyphSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frames and targets for a batch of whole sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    /// `[B, T, 3, H, W]`
    pub frames: Tensor<S>,
    /// `[B, T, 1, h, w]`
    pub mid: Tensor<S>,
    /// `[B, T, 2 * n_digits]`
    pub high: Tensor<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn collate(sequences: &[AnnotatedSequence]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Argument("cannot collate an empty batch".into()));
        }
        let stack = |f: fn(&AnnotatedSequence) -> &Tensor<f32>| -> Result<Tensor<S>> {
            let parts: Vec<Tensor<S>> = sequences.iter().map(|s| f(s).cast()).collect();
            Tensor::stack(&parts)
        };
        Ok(Batch { frames: stack(|s| &s.frames)?, mid: stack(|s| &s.mid_targets)?, high: stack(|s| &s.high_targets)? })
    }

    pub fn size(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn len(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First `n` timesteps of the frames.
    pub fn seed_frames(&self, n: usize) -> Tensor<S> {
        let s = self.frames.shape();
        let inner: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(s[0] * n * inner);
        for b in 0..s[0] {
            let base = b * s[1] * inner;
            data.extend_from_slice(&self.frames.data()[base..base + n * inner]);
        }
        let mut shape = s.to_vec();
        shape[1] = n;
        Tensor::from_vec(&shape, data).expect("seed slice")
    }
}

/// Sequence indices making up training batch `k`.
pub fn batch_indices(k: u64, batch_size: usize) -> std::ops::Range<u64> {
    let b = batch_size as u64;
    k * b..(k + 1) * b
}

pub fn make_batch<S: Scalar>(spec: &DatasetSpec, glyphs: &DigitGlyphSet, k: u64, batch_size: usize) -> Result<Batch<S>> {
    let seqs = batch_indices(k, batch_size)
        .map(|i| generate_sequence(spec, glyphs, i))
        .collect::<Result<Vec<_>>>()?;
    Batch::collate(&seqs)
}

/// Generates training batches `start, start + 1, ...` on a worker thread.
///
/// The queue is bounded, so the producer stays at most `depth` batches
/// ahead. Batch contents depend only on the `DatasetSpec` and batch number.
pub struct BatchProducer<S: Scalar> {
    rx: Option<Receiver<Result<Batch<S>>>>,
    handle: Option<JoinHandle<()>>,
}

impl<S: Scalar> BatchProducer<S> {
    pub fn spawn(spec: DatasetSpec, glyphs: Arc<DigitGlyphSet>, batch_size: usize, start: u64, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            let mut k = start;
            loop {
                let batch = make_batch(&spec, &glyphs, k, batch_size);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
                k += 1;
            }
        });
        BatchProducer { rx: Some(rx), handle: Some(handle) }
    }

    pub fn next_batch(&mut self) -> Result<Batch<S>> {
        self.rx
            .as_ref()
            .and_then(|rx| rx.recv().ok())
            .unwrap_or_else(|| Err(Error::State("batch producer stopped".into())))
    }
}

impl<S: Scalar> Drop for BatchProducer<S> {
    fn drop(&mut self) {
        // closing the receiver unblocks the producer's send
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
