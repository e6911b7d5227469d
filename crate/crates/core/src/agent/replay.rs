//! Prioritized experience replay backed by a sum tree.

use rand::Rng;

use super::AgentError;

/// Floor added to every absolute TD error so no transition becomes unsampleable.
pub const PRIORITY_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Complete binary tree over `capacity` leaves keeping subtree sums of
/// `priority^alpha` and subtree maxima of the raw priority.
#[derive(Clone, Debug, PartialEq)]
struct SumTree {
    leaves: usize,
    sums: Vec<f64>,
    maxes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            sums: vec![0.0; 2 * leaves],
            maxes: vec![0.0; 2 * leaves],
        }
    }

    fn set(&mut self, index: usize, weight: f64, priority: f64) {
        let mut node = index + self.leaves;
        self.sums[node] = weight;
        self.maxes[node] = priority;
        while node > 1 {
            node /= 2;
            self.sums[node] = self.sums[2 * node] + self.sums[2 * node + 1];
            self.maxes[node] = self.maxes[2 * node].max(self.maxes[2 * node + 1]);
        }
    }

    fn total(&self) -> f64 {
        self.sums[1]
    }

    fn max(&self) -> f64 {
        self.maxes[1]
    }

    fn weight(&self, index: usize) -> f64 {
        self.sums[index + self.leaves]
    }

    /// Leaf whose cumulative-weight interval contains `mass`.
    fn find(&self, mut mass: f64, len: usize) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            if mass < self.sums[left] || self.sums[left + 1] <= 0.0 {
                node = left;
            } else {
                mass -= self.sums[left];
                node = left + 1;
            }
        }
        // Rounding can land on an empty leaf past the filled range.
        (node - self.leaves).min(len - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Importance-sampling weights normalized by the batch maximum.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrioritizedReplay {
    capacity: usize,
    alpha: f64,
    items: Vec<Transition>,
    priorities: Vec<f64>,
    next: usize,
    tree: SumTree,
}

impl PrioritizedReplay {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self, AgentError> {
        if capacity == 0 {
            return Err(AgentError::InvalidArgument("replay capacity must be positive".into()));
        }
        if !(alpha >= 0.0) {
            return Err(AgentError::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self {
            capacity,
            alpha,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            priorities: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            tree: SumTree::new(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.items[index]
    }

    pub fn priority(&self, index: usize) -> f64 {
        self.priorities[index]
    }

    /// Sampling probability of slot `index`.
    pub fn probability(&self, index: usize) -> f64 {
        self.tree.weight(index) / self.tree.total()
    }

    fn set_priority(&mut self, index: usize, priority: f64) {
        self.priorities[index] = priority;
        self.tree.set(index, priority.powf(self.alpha), priority);
    }

    /// Inserts at the highest priority currently stored (1 when empty),
    /// overwriting the oldest entry once full. Returns the slot used.
    pub fn push(&mut self, transition: Transition) -> usize {
        let priority = if self.is_empty() { 1.0 } else { self.tree.max() };
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(transition);
            self.priorities.push(priority);
        } else {
            self.items[slot] = transition;
        }
        self.set_priority(slot, priority);
        self.next = (self.next + 1) % self.capacity;
        slot
    }

    /// Draws `batch_size` slots with replacement, `P(i) ~ p_i^alpha`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<Batch, AgentError> {
        if batch_size == 0 || self.len() < batch_size {
            return Err(AgentError::NotReady {
                have: self.len(),
                need: batch_size.max(1),
            });
        }
        let total = self.tree.total();
        let n = self.len() as f64;
        let indices: Vec<usize> = (0..batch_size)
            .map(|_| self.tree.find(rng.random::<f64>() * total, self.len()))
            .collect();
        let mut weights: Vec<f64> = indices
            .iter()
            .map(|&i| (n * self.tree.weight(i) / total).powf(-beta))
            .collect();
        let max = weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in &mut weights {
            *w /= max;
        }
        Ok(Batch { indices, weights })
    }

    /// Sets `p_i = |delta_i| + PRIORITY_EPSILON`.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<(), AgentError> {
        if indices.len() != td_errors.len() {
            return Err(AgentError::InvalidArgument(
                "indices and td_errors differ in length".into(),
            ));
        }
        for (&i, &d) in indices.iter().zip(td_errors) {
            if i >= self.len() {
                return Err(AgentError::InvalidArgument(format!("replay index {i} out of range")));
            }
            self.set_priority(i, d.abs() + PRIORITY_EPSILON);
        }
        Ok(())
    }
}
