//! Attention bookkeeping for rollout analysis.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// How an encoder sub-step combines with its neighbours during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Modality-only attention, no bottleneck attached.
    Independent,
    /// One link of a sequential fusion chain; composes serially.
    Sequential,
    /// One of the per-modality blocks of a mean-fused layer. Consecutive
    /// entries of the same layer read the same bottleneck and their
    /// bottleneck rows are averaged.
    MeanParallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub sub_step: usize,
    pub layer: usize,
    pub modality: Modality,
    pub mode: StepMode,
    /// Global token index of every local row/column of `attention`, in
    /// block input order (bottleneck first when attached).
    pub participants: Vec<usize>,
    /// Head-averaged attention, `participants.len()` square, row-major.
    pub attention: Vec<f64>,
}

/// Encoder attention of one forward pass over the global token space
/// `[audio frames | video frames | bottleneck tokens]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub audio_frames: usize,
    pub video_frames: usize,
    pub bottleneck_len: usize,
    pub entries: Vec<TraceEntry>,
}

impl AttentionTrace {
    pub fn new(audio_frames: usize, video_frames: usize, bottleneck_len: usize) -> Self {
        AttentionTrace {
            audio_frames,
            video_frames,
            bottleneck_len,
            entries: Vec::new(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.audio_frames + self.video_frames + self.bottleneck_len
    }

    pub fn audio_indices(&self) -> Vec<usize> {
        (0..self.audio_frames).collect()
    }

    pub fn video_indices(&self) -> Vec<usize> {
        (self.audio_frames..self.audio_frames + self.video_frames).collect()
    }

    pub fn bottleneck_indices(&self) -> Vec<usize> {
        let start = self.audio_frames + self.video_frames;
        (start..start + self.bottleneck_len).collect()
    }

    pub fn modality_indices(&self, m: Modality) -> Vec<usize> {
        match m {
            Modality::Audio => self.audio_indices(),
            Modality::Video => self.video_indices(),
        }
    }

    pub(crate) fn push(
        &mut self,
        layer: usize,
        modality: Modality,
        mode: StepMode,
        with_bottleneck: bool,
        attention: Vec<f64>,
    ) {
        let mut participants = Vec::new();
        if with_bottleneck {
            participants.extend(self.bottleneck_indices());
        }
        participants.extend(self.modality_indices(modality));
        debug_assert_eq!(participants.len().pow(2), attention.len());
        let sub_step = self.entries.len();
        self.entries.push(TraceEntry {
            sub_step,
            layer,
            modality,
            mode,
            participants,
            attention,
        });
    }
}
