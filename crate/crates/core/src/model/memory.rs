use crate::gpm::PropagationMemoryEntry;

/// Per-layer memory entries of one frame at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMemory {
    pub frame_index: usize,
    pub layers: Vec<PropagationMemoryEntry>,
}

/// Long-term frames (reference first, then sampled frames in index order)
/// and the short-term previous frame for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMemory {
    pub stride: usize,
    pub long_term: Vec<FrameMemory>,
    pub short_term: Option<FrameMemory>,
}

impl StageMemory {
    pub fn new(stride: usize) -> Self {
        Self {
            stride,
            long_term: Vec::new(),
            short_term: None,
        }
    }

    /// Long-term entries of one layer.
    pub fn long_term_layer(&self, layer: usize) -> Vec<PropagationMemoryEntry> {
        self.long_term.iter().map(|f| f.layers[layer].clone()).collect()
    }

    pub fn long_term_indices(&self) -> Vec<usize> {
        self.long_term.iter().map(|f| f.frame_index).collect()
    }

    fn insert(&mut self, frame: FrameMemory, to_long_term: bool) {
        if to_long_term {
            self.long_term.push(frame.clone());
            self.long_term.sort_by_key(|f| f.frame_index);
        }
        self.short_term = Some(frame);
    }
}

/// Memory of one in-flight sequence, for both propagation stages.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub stage16: StageMemory,
    pub stage8: StageMemory,
    pub update_interval: usize,
}

impl MemoryBank {
    pub fn new(update_interval: usize) -> Self {
        assert!(update_interval >= 1, "memory update interval must be ≥ 1");
        Self {
            stage16: StageMemory::new(16),
            stage8: StageMemory::new(8),
            update_interval,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.stage16.long_term.is_empty() || self.stage8.long_term.is_empty()
    }

    /// Whether frame `index` joins the long-term memory.
    pub fn samples(&self, index: usize) -> bool {
        index.is_multiple_of(self.update_interval)
    }

    /// Stores a frame: it always becomes the short-term entry, and joins the
    /// long-term list when its index is a multiple of the update interval.
    pub fn insert(&mut self, frame16: FrameMemory, frame8: FrameMemory) {
        let long = self.samples(frame16.frame_index);
        self.stage16.insert(frame16, long);
        self.stage8.insert(frame8, long);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(i: usize) -> FrameMemory {
        FrameMemory {
            frame_index: i,
            layers: vec![],
        }
    }

    #[test]
    fn sampling_schedule() {
        let mut m = MemoryBank::new(5);
        for t in 0..=12 {
            m.insert(frame(t), frame(t));
            assert_eq!(m.stage16.short_term.as_ref().unwrap().frame_index, t);
            // 1 + ⌊t/N⌋ long-term frames after frame t
            assert_eq!(m.stage16.long_term.len(), 1 + t / 5);
        }
        assert_eq!(m.stage16.long_term_indices(), vec![0, 5, 10]);
        assert_eq!(m.stage8.long_term_indices(), vec![0, 5, 10]);
    }
}
