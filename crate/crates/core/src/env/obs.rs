use std::cell::Cell;
use std::collections::VecDeque;

use super::{IMAGE_SIZE, TAXEL_GRID};

/// Values per RGB frame.
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * 3;
/// Values per pad per frame (shear_x, shear_y, pressure).
pub const TAXEL_LEN: usize = TAXEL_GRID * TAXEL_GRID * 3;

thread_local! {
    static TACTILE_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of tactile-array reads through [`StackedObs`] on this thread.
pub fn tactile_reads() -> u64 {
    TACTILE_READS.with(Cell::get)
}

/// Records tactile reads that bypass [`StackedObs::tactile`], such as rollout storage.
pub(crate) fn note_tactile_read(n: u64) {
    TACTILE_READS.with(|c| c.set(c.get() + n));
}

pub fn reset_tactile_reads() {
    TACTILE_READS.with(|c| c.set(0));
}

/// One timestep: RGB image and two taxel maps, all height x width x channel.
#[derive(Clone, Debug, PartialEq)]
pub struct VisuoTactileObs {
    /// 64x64x3 in [0, 1].
    pub image: Vec<f32>,
    /// 32x32x3, channels shear_x, shear_y, pressure, each in [-1, 1].
    pub tactile_left: Vec<f32>,
    pub tactile_right: Vec<f32>,
}

/// `k` frames concatenated along channels, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedObs {
    k: usize,
    image: Vec<f32>,
    tactile_left: Vec<f32>,
    tactile_right: Vec<f32>,
}

fn interleave(frames: &[&[f32]], pixels: usize) -> Vec<f32> {
    let k = frames.len();
    let mut out = Vec::with_capacity(pixels * 3 * k);
    for p in 0..pixels {
        for f in frames {
            out.extend_from_slice(&f[p * 3..p * 3 + 3]);
        }
    }
    out
}

impl StackedObs {
    pub fn from_frames(frames: &[&VisuoTactileObs]) -> Self {
        let images: Vec<&[f32]> = frames.iter().map(|f| f.image.as_slice()).collect();
        let left: Vec<&[f32]> = frames.iter().map(|f| f.tactile_left.as_slice()).collect();
        let right: Vec<&[f32]> = frames.iter().map(|f| f.tactile_right.as_slice()).collect();
        Self {
            k: frames.len(),
            image: interleave(&images, IMAGE_SIZE * IMAGE_SIZE),
            tactile_left: interleave(&left, TAXEL_GRID * TAXEL_GRID),
            tactile_right: interleave(&right, TAXEL_GRID * TAXEL_GRID),
        }
    }

    pub fn frames(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        3 * self.k
    }

    /// 64x64x3k image stack.
    pub fn image(&self) -> &[f32] {
        &self.image
    }

    /// 32x32x3k taxel stacks (left, right). Every call is counted.
    pub fn tactile(&self) -> (&[f32], &[f32]) {
        TACTILE_READS.with(|c| c.set(c.get() + 1));
        (&self.tactile_left, &self.tactile_right)
    }

    /// Extracts frame `i` (0 = oldest).
    pub fn frame(&self, i: usize) -> VisuoTactileObs {
        self.frame_with(i, true)
    }

    /// Frame `i` with empty taxel maps unless `touch`; only a `touch` extraction counts as a tactile read.
    pub fn frame_with(&self, i: usize, touch: bool) -> VisuoTactileObs {
        let pick = |stack: &[f32], pixels: usize| {
            (0..pixels).flat_map(|p| stack[p * 3 * self.k + 3 * i..p * 3 * self.k + 3 * i + 3].iter().copied()).collect()
        };
        if !touch {
            return VisuoTactileObs { image: pick(&self.image, IMAGE_SIZE * IMAGE_SIZE), tactile_left: Vec::new(), tactile_right: Vec::new() };
        }
        TACTILE_READS.with(|c| c.set(c.get() + 1));
        VisuoTactileObs {
            image: pick(&self.image, IMAGE_SIZE * IMAGE_SIZE),
            tactile_left: pick(&self.tactile_left, TAXEL_GRID * TAXEL_GRID),
            tactile_right: pick(&self.tactile_right, TAXEL_GRID * TAXEL_GRID),
        }
    }
}

/// Rolling window of the last `k` observations.
#[derive(Clone, Debug)]
pub struct FrameStack {
    k: usize,
    frames: VecDeque<VisuoTactileObs>,
}

impl FrameStack {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "frame stack needs at least one frame");
        Self { k, frames: VecDeque::with_capacity(k) }
    }

    /// Fills every slot with `first`.
    pub fn reset(&mut self, first: VisuoTactileObs) {
        self.frames.clear();
        for _ in 1..self.k {
            self.frames.push_back(first.clone());
        }
        self.frames.push_back(first);
    }

    pub fn push(&mut self, obs: VisuoTactileObs) {
        if self.frames.len() == self.k {
            self.frames.pop_front();
        }
        self.frames.push_back(obs);
    }

    pub fn stacked(&self) -> StackedObs {
        let frames: Vec<&VisuoTactileObs> = self.frames.iter().collect();
        StackedObs::from_frames(&frames)
    }
}
