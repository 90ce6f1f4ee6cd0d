//! Exact two-nearest-neighbour search over descriptors.
//!
//! Small sets are scanned linearly; larger ones go through a vantage-point tree. Both
//! routes rank candidates by `(distance, index)` so they return identical answers.

/// Sets below this size are searched by linear scan.
pub const BRUTE_FORCE_BELOW: usize = 2000;

#[inline]
pub fn descriptor_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The two best candidates found so far, ordered by `(distance, index)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoNearest {
    pub first: Option<(f64, u32)>,
    pub second: Option<(f64, u32)>,
}

impl TwoNearest {
    fn new() -> Self {
        Self {
            first: None,
            second: None,
        }
    }

    #[inline]
    fn better(a: (f64, u32), b: (f64, u32)) -> bool {
        a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    fn offer(&mut self, cand: (f64, u32)) {
        match self.first {
            None => self.first = Some(cand),
            Some(f) if Self::better(cand, f) => {
                self.second = self.first;
                self.first = Some(cand);
            }
            Some(_) => match self.second {
                None => self.second = Some(cand),
                Some(s) if Self::better(cand, s) => self.second = Some(cand),
                Some(_) => {}
            },
        }
    }

    /// Current pruning radius: distance of the second-best, or infinity.
    #[inline]
    fn radius(&self) -> f64 {
        self.second.map_or(f64::INFINITY, |s| s.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    item: u32,
    threshold: f64,
    // children as node indices; u32::MAX means none
    inside: u32,
    outside: u32,
}

const NONE: u32 = u32::MAX;

/// Nearest-neighbour index over a subset of descriptors of one keypoint set.
pub struct DescriptorIndex<'a> {
    descriptors: Vec<&'a [f32]>,
    items: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

impl<'a> DescriptorIndex<'a> {
    /// Indexes `items`, whose descriptors are given by `descriptor(item)`.
    pub fn build(items: Vec<u32>, descriptor: impl Fn(u32) -> &'a [f32]) -> Self {
        let descriptors: Vec<&[f32]> = items.iter().map(|&i| descriptor(i)).collect();
        let mut index = Self {
            descriptors,
            items,
            nodes: Vec::new(),
            root: NONE,
        };
        if index.items.len() >= BRUTE_FORCE_BELOW {
            let mut slots: Vec<u32> = (0..index.items.len() as u32).collect();
            index.nodes.reserve(slots.len());
            index.root = index.build_node(&mut slots);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn build_node(&mut self, slots: &mut [u32]) -> u32 {
        if slots.is_empty() {
            return NONE;
        }
        // deterministic vantage point: first slot
        let vp = slots[0];
        let rest = &mut slots[1..];
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            item: vp,
            threshold: 0.0,
            inside: NONE,
            outside: NONE,
        });
        if rest.is_empty() {
            return id;
        }
        let vd = self.descriptors[vp as usize];
        let mut keyed: Vec<(f64, u32)> = rest
            .iter()
            .map(|&s| (descriptor_distance(vd, self.descriptors[s as usize]), s))
            .collect();
        let mid = keyed.len() / 2;
        keyed.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let threshold = keyed[mid].0;
        for (slot, k) in rest.iter_mut().zip(&keyed) {
            *slot = k.1;
        }
        let (inside, outside) = rest.split_at_mut(mid + 1);
        let inside_id = self.build_node(inside);
        let outside_id = self.build_node(outside);
        let node = &mut self.nodes[id as usize];
        node.threshold = threshold;
        node.inside = inside_id;
        node.outside = outside_id;
        id
    }

    /// Two nearest indexed items (original item ids) passing `accept`.
    pub fn two_nearest(&self, query: &[f32], accept: impl Fn(u32) -> bool) -> TwoNearest {
        let mut best = TwoNearest::new();
        if self.nodes.is_empty() {
            for (slot, d) in self.descriptors.iter().enumerate() {
                let item = self.items[slot];
                if accept(item) {
                    best.offer((descriptor_distance(query, d), item));
                }
            }
            return best;
        }
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if id == NONE {
                continue;
            }
            let node = self.nodes[id as usize];
            let item = self.items[node.item as usize];
            let d = descriptor_distance(query, self.descriptors[node.item as usize]);
            if accept(item) {
                best.offer((d, item));
            }
            let tau = best.radius();
            // push the far side first so the near side is explored first
            let go_in = d - tau <= node.threshold;
            let go_out = d + tau >= node.threshold;
            if d <= node.threshold {
                if go_out {
                    stack.push(node.outside);
                }
                if go_in {
                    stack.push(node.inside);
                }
            } else {
                if go_in {
                    stack.push(node.inside);
                }
                if go_out {
                    stack.push(node.outside);
                }
            }
        }
        best
    }
}
