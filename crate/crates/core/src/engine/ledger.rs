use std::mem::size_of;

/// Handle to a buffer recorded in a [`MemoryLedger`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Buffer {
    name: String,
    floats: usize,
    indices: usize,
    live: bool,
}

/// Exact byte accounting of numeric buffers.
///
/// Every allocation is declared with its float and index element counts.
/// Live totals are tracked at two widths: native (`float_width` and
/// `size_of::<usize>()`) and compact (4 bytes for both, the 32-bit
/// equivalent). The peak is taken over native bytes; the breakdown of
/// buffers live at that moment is kept.
#[derive(Clone, Debug)]
pub struct MemoryLedger {
    float_width: usize,
    buffers: Vec<Buffer>,
    live_native: usize,
    live_compact: usize,
    peak_native: usize,
    peak_compact: usize,
    phase: String,
    peak_phase: String,
    peak_breakdown: Vec<(String, usize)>,
    budget: Option<usize>,
    overflow: bool,
}

impl MemoryLedger {
    pub fn new(float_width: usize) -> Self {
        Self {
            float_width,
            buffers: Vec::new(),
            live_native: 0,
            live_compact: 0,
            peak_native: 0,
            peak_compact: 0,
            phase: "setup".into(),
            peak_phase: "setup".into(),
            peak_breakdown: Vec::new(),
            budget: None,
            overflow: false,
        }
    }

    pub fn for_scalar<T>() -> Self {
        Self::new(size_of::<T>())
    }

    pub fn with_budget(mut self, budget_bytes: usize) -> Self {
        self.budget = Some(budget_bytes);
        self
    }

    pub fn native_bytes(&self, floats: usize, indices: usize) -> usize {
        floats * self.float_width + indices * size_of::<usize>()
    }

    pub fn set_phase(&mut self, phase: impl Into<String>) {
        self.phase = phase.into();
    }

    /// True when allocating `floats`/`indices` more elements would push the
    /// live total past the budget.
    pub fn would_exceed(&self, floats: usize, indices: usize) -> bool {
        self.budget
            .is_some_and(|b| self.live_native + self.native_bytes(floats, indices) > b)
    }

    pub fn alloc(&mut self, name: impl Into<String>, floats: usize, indices: usize) -> BufferId {
        let native = self.native_bytes(floats, indices);
        self.live_native += native;
        self.live_compact += 4 * (floats + indices);
        self.buffers.push(Buffer {
            name: name.into(),
            floats,
            indices,
            live: true,
        });
        if self.budget.is_some_and(|b| self.live_native > b) {
            self.overflow = true;
        }
        if self.live_native > self.peak_native {
            self.peak_native = self.live_native;
            self.peak_compact = self.live_compact;
            self.peak_phase.clone_from(&self.phase);
            self.peak_breakdown = self.live_breakdown();
        }
        BufferId(self.buffers.len() - 1)
    }

    pub fn free(&mut self, id: BufferId) {
        let (floats, indices) = {
            let b = &mut self.buffers[id.0];
            if !b.live {
                return;
            }
            b.live = false;
            (b.floats, b.indices)
        };
        self.live_native -= self.native_bytes(floats, indices);
        self.live_compact -= 4 * (floats + indices);
    }

    pub fn live_bytes(&self) -> usize {
        self.live_native
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_native
    }

    /// Peak with every element counted at 4 bytes.
    pub fn peak_bytes_compact(&self) -> usize {
        self.peak_compact
    }

    pub fn peak_phase(&self) -> &str {
        &self.peak_phase
    }

    /// Buffers live at the peak, in allocation order.
    pub fn peak_breakdown(&self) -> &[(String, usize)] {
        &self.peak_breakdown
    }

    pub fn exceeded_budget(&self) -> bool {
        self.overflow
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    fn live_breakdown(&self) -> Vec<(String, usize)> {
        self.buffers
            .iter()
            .filter(|b| b.live)
            .map(|b| (b.name.clone(), self.native_bytes(b.floats, b.indices)))
            .collect()
    }
}
