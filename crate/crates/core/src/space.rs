//! The tree search space over configurations.
//!
//! Children of a node are numbered in a fixed order so that any child can be
//! instantiated from its index alone, without building its siblings:
//! all tilings, then interchanges, thread parallelizations, unrolls,
//! reversals and packings. Within a kind, targets follow pre-order over the
//! current nest and parameters follow their list order.
//!
//! Pruning is structural: a parallelized loop and its subtree are frozen, a
//! partially unrolled loop cannot be unrolled again, a reversed loop cannot
//! be reversed again, and each (loop, array) pair is packed at most once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loop_model::{apply, Configuration, Loop, LoopNest, Transformation, UnrollFactor};

/// Perfect nests up to this depth get every non-identity permutation as an
/// interchange child; deeper nests only get adjacent swaps.
pub const FULL_INTERCHANGE_DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceParams {
    pub tile_sizes: Vec<u32>,
    pub unroll_factors: Vec<u32>,
    pub peel_variants: Vec<bool>,
    pub d_max: usize,
}

impl Default for SpaceParams {
    fn default() -> Self {
        SpaceParams {
            tile_sizes: vec![2, 3, 4, 5, 8, 16, 32, 64, 128, 256],
            unroll_factors: vec![2, 4, 8],
            peel_variants: vec![false, true],
            d_max: 5,
        }
    }
}

impl SpaceParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 {
            return Err(Error::Config("d_max must be positive".into()));
        }
        if self.tile_sizes.contains(&0) || self.unroll_factors.contains(&0) {
            return Err(Error::Config("tile sizes and unroll factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceNode {
    pub config: Configuration,
    pub nest: LoopNest,
}

impl SpaceNode {
    pub fn root(nest: LoopNest) -> Self {
        SpaceNode { config: Configuration::root(), nest }
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    pub fn key(&self) -> String {
        self.config.key()
    }
}

/// Interchange permutations offered for a perfect nest of depth `k`.
pub fn interchange_permutations(k: usize) -> Vec<Vec<usize>> {
    if k < 2 {
        return Vec::new();
    }
    if k > FULL_INTERCHANGE_DEPTH {
        return (0..k - 1)
            .map(|p| {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.swap(p, p + 1);
                perm
            })
            .collect();
    }
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..k).collect();
    // Lexicographic order; the first permutation is the identity.
    while next_permutation(&mut perm) {
        out.push(perm.clone());
    }
    out
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn interchange_count(k: usize) -> usize {
    match k {
        0 | 1 => 0,
        k if k > FULL_INTERCHANGE_DEPTH => k - 1,
        k => (1..=k).product::<usize>() - 1,
    }
}

/// One group of consecutive children sharing a kind and a target.
enum Slot<'a> {
    Tile(&'a [String]),
    Interchange(&'a [String]),
    Parallelize(&'a Loop),
    Unroll(&'a Loop),
    Reverse(&'a Loop),
    Pack(&'a Loop, Vec<&'a str>),
}

impl Slot<'_> {
    fn count(&self, params: &SpaceParams) -> usize {
        match self {
            Slot::Tile(_) => params.tile_sizes.len() * params.peel_variants.len(),
            Slot::Interchange(chain) => interchange_count(chain.len()),
            Slot::Parallelize(_) | Slot::Reverse(_) => 1,
            Slot::Unroll(_) => 1 + params.unroll_factors.len(),
            Slot::Pack(_, arrays) => arrays.len(),
        }
    }

    fn nth(&self, i: usize, params: &SpaceParams) -> Transformation {
        match self {
            Slot::Tile(chain) => {
                let peels = params.peel_variants.len();
                Transformation::Tile {
                    nest_top: chain[0].clone(),
                    size: params.tile_sizes[i / peels],
                    peel: params.peel_variants[i % peels],
                }
            }
            Slot::Interchange(chain) => Transformation::Interchange {
                nest_top: chain[0].clone(),
                permutation: interchange_permutations(chain.len()).swap_remove(i),
            },
            Slot::Parallelize(l) => Transformation::ParallelizeThread { target: l.id.clone() },
            Slot::Unroll(l) => Transformation::Unroll {
                target: l.id.clone(),
                factor: if i == 0 {
                    UnrollFactor::Full
                } else {
                    UnrollFactor::Partial(params.unroll_factors[i - 1])
                },
            },
            Slot::Reverse(l) => Transformation::Reverse { target: l.id.clone() },
            Slot::Pack(l, arrays) => Transformation::Pack {
                target: l.id.clone(),
                array: arrays[i].to_string(),
            },
        }
    }

    /// Position of `t` within this slot, if it belongs here.
    fn position(&self, t: &Transformation, params: &SpaceParams) -> Option<usize> {
        match (self, t) {
            (Slot::Tile(chain), Transformation::Tile { nest_top, size, peel }) if chain[0] == *nest_top => {
                let s = params.tile_sizes.iter().position(|x| x == size)?;
                let p = params.peel_variants.iter().position(|x| x == peel)?;
                Some(s * params.peel_variants.len() + p)
            }
            (Slot::Interchange(chain), Transformation::Interchange { nest_top, permutation })
                if chain[0] == *nest_top =>
            {
                interchange_permutations(chain.len()).iter().position(|p| p == permutation)
            }
            (Slot::Parallelize(l), Transformation::ParallelizeThread { target }) if l.id == *target => Some(0),
            (Slot::Unroll(l), Transformation::Unroll { target, factor }) if l.id == *target => match factor {
                UnrollFactor::Full => Some(0),
                UnrollFactor::Partial(f) => params.unroll_factors.iter().position(|x| x == f).map(|p| p + 1),
            },
            (Slot::Reverse(l), Transformation::Reverse { target }) if l.id == *target => Some(0),
            (Slot::Pack(l, arrays), Transformation::Pack { target, array }) if l.id == *target => {
                arrays.iter().position(|a| a == array)
            }
            _ => None,
        }
    }
}

fn with_slots<R>(nest: &LoopNest, f: impl FnOnce(&[Slot<'_>]) -> R) -> R {
    let chains = nest.perfect_nests();
    let loops: Vec<&Loop> = nest.preorder().into_iter().filter(|l| l.transformable).collect();
    let mut slots = Vec::new();
    slots.extend(chains.iter().map(|c| Slot::Tile(c)));
    slots.extend(chains.iter().filter(|c| c.len() >= 2).map(|c| Slot::Interchange(c)));
    slots.extend(loops.iter().map(|l| Slot::Parallelize(l)));
    slots.extend(loops.iter().filter(|l| l.unrollable).map(|l| Slot::Unroll(l)));
    slots.extend(loops.iter().filter(|l| !l.reversed).map(|l| Slot::Reverse(l)));
    for l in &loops {
        let arrays: Vec<&str> = nest
            .arrays
            .iter()
            .filter(|a| !l.packed.contains(a))
            .map(String::as_str)
            .collect();
        if !arrays.is_empty() {
            slots.push(Slot::Pack(l, arrays));
        }
    }
    f(&slots)
}

/// Number of children of `node`, computed from the nest shape alone.
pub fn child_count(node: &SpaceNode, params: &SpaceParams) -> usize {
    with_slots(&node.nest, |slots| slots.iter().map(|s| s.count(params)).sum())
}

/// The transformation that leads to child `index`.
pub fn child_transformation(node: &SpaceNode, index: usize, params: &SpaceParams) -> Result<Transformation> {
    with_slots(&node.nest, |slots| {
        let mut rest = index;
        for s in slots {
            let n = s.count(params);
            if rest < n {
                return Ok(s.nth(rest, params));
            }
            rest -= n;
        }
        Err(Error::IndexOutOfRange {
            index,
            count: index - rest,
        })
    })
}

/// Instantiates child `index` of `node`.
pub fn child(node: &SpaceNode, index: usize, params: &SpaceParams) -> Result<SpaceNode> {
    let t = child_transformation(node, index, params)?;
    let nest = apply(&node.nest, &t)?;
    Ok(SpaceNode {
        config: node.config.extended(t),
        nest,
    })
}

/// Inverse of [`child_transformation`]: the index under which `t` appears
/// among the children of `node`.
pub fn child_index(node: &SpaceNode, t: &Transformation, params: &SpaceParams) -> Option<usize> {
    with_slots(&node.nest, |slots| {
        let mut offset = 0;
        for s in slots {
            if let Some(p) = s.position(t, params) {
                return Some(offset + p);
            }
            offset += s.count(params);
        }
        None
    })
}

/// Child indices leading from `root` to `config`, or `None` if some step is
/// not a child in this space.
pub fn index_path(root: &SpaceNode, config: &Configuration, params: &SpaceParams) -> Option<Vec<usize>> {
    let mut node = root.clone();
    let mut path = Vec::with_capacity(config.depth());
    for t in &config.steps {
        let i = child_index(&node, t, params)?;
        node = child(&node, i, params).ok()?;
        path.push(i);
    }
    Some(path)
}

/// Walks up to `depth` uniformly random child edges, stopping early at a
/// node without children.
pub fn random_walk<R: Rng + ?Sized>(node: &SpaceNode, depth: usize, params: &SpaceParams, rng: &mut R) -> SpaceNode {
    let mut cur = node.clone();
    for _ in 0..depth {
        let n = child_count(&cur, params);
        if n == 0 {
            break;
        }
        cur = child(&cur, rng.gen_range(0..n), params).expect("index below child count");
    }
    cur
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DepthStats {
    pub depth: usize,
    pub nodes: u64,
    pub min_children: usize,
    pub max_children: usize,
}

/// Node counts per depth, by exhaustive traversal up to `max_depth`.
pub fn depth_profile(root: &SpaceNode, params: &SpaceParams, max_depth: usize) -> Vec<DepthStats> {
    let mut stats: Vec<DepthStats> = (0..=max_depth)
        .map(|depth| DepthStats {
            depth,
            nodes: 0,
            min_children: usize::MAX,
            max_children: 0,
        })
        .collect();
    fn visit(node: &SpaceNode, params: &SpaceParams, max_depth: usize, stats: &mut [DepthStats]) {
        let d = node.depth();
        let n = child_count(node, params);
        let s = &mut stats[d];
        s.nodes += 1;
        s.min_children = s.min_children.min(n);
        s.max_children = s.max_children.max(n);
        if d < max_depth {
            if d + 1 == max_depth {
                // Leaves only need counting, not instantiating.
                let leaf = &mut stats[d + 1];
                leaf.nodes += n as u64;
                return;
            }
            for i in 0..n {
                let c = child(node, i, params).expect("index below child count");
                visit(&c, params, max_depth, stats);
            }
        }
    }
    visit(root, params, max_depth, &mut stats);
    for s in &mut stats {
        if s.min_children == usize::MAX {
            s.min_children = 0;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_model::load_loop_nest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(doc: &str) -> SpaceNode {
        SpaceNode::root(load_loop_nest(doc).unwrap())
    }

    #[test]
    fn single_loop_has_26_children() {
        let n = node("[[loops]]\nid = \"i\"\n");
        assert_eq!(child_count(&n, &SpaceParams::default()), 26);
    }

    #[test]
    fn first_child_is_smallest_tile() {
        let n = node("[[loops]]\nid = \"i\"\n");
        let t = child_transformation(&n, 0, &SpaceParams::default()).unwrap();
        assert_eq!(t, Transformation::Tile { nest_top: "i".into(), size: 2, peel: false });
        let t = child_transformation(&n, 1, &SpaceParams::default()).unwrap();
        assert_eq!(t, Transformation::Tile { nest_top: "i".into(), size: 2, peel: true });
    }

    #[test]
    fn out_of_range_index() {
        let n = node("[[loops]]\nid = \"i\"\n");
        let err = child(&n, 26, &SpaceParams::default()).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 26, count: 26 }));
    }

    #[test]
    fn frozen_nest_has_no_children() {
        let n = node("[[loops]]\nid = \"i\"\ntransformable = false\n");
        assert_eq!(child_count(&n, &SpaceParams::default()), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let walked = random_walk(&n, 3, &SpaceParams::default(), &mut rng);
        assert_eq!(walked, n);
    }

    #[test]
    fn permutations_ordered_and_capped() {
        assert_eq!(interchange_permutations(2), vec![vec![1, 0]]);
        assert_eq!(interchange_permutations(3).len(), 5);
        assert_eq!(interchange_permutations(3)[0], vec![0, 2, 1]);
        assert_eq!(interchange_permutations(4).len(), 23);
        assert_eq!(interchange_permutations(5).len(), 4);
        assert!(interchange_permutations(1).is_empty());
    }

    #[test]
    fn index_roundtrip_on_triple_nest() {
        let n = node(
            "arrays = [\"A\", \"B\"]\n[[loops]]\nid = \"i\"\n[[loops.children]]\nid = \"j\"\n[[loops.children.children]]\nid = \"k\"\n",
        );
        let params = SpaceParams::default();
        for i in 0..child_count(&n, &params) {
            let t = child_transformation(&n, i, &params).unwrap();
            assert_eq!(child_index(&n, &t, &params), Some(i));
        }
    }

    #[test]
    fn walk_depth_one_single_child() {
        let n = node("[[loops]]\nid = \"i\"\n");
        let params = SpaceParams {
            tile_sizes: vec![],
            unroll_factors: vec![],
            peel_variants: vec![false],
            d_max: 5,
        };
        // parallelize, full unroll, reverse
        assert_eq!(child_count(&n, &params), 3);
        let narrow = SpaceNode { config: Configuration::root(), nest: apply(&n.nest, &Transformation::Reverse { target: "i".into() }).unwrap() };
        let narrow = SpaceNode { config: Configuration::root(), nest: apply(&narrow.nest, &Transformation::Unroll { target: "i".into(), factor: UnrollFactor::Partial(2) }).unwrap() };
        assert_eq!(child_count(&narrow, &params), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let walked = random_walk(&narrow, 1, &params, &mut rng);
        assert_eq!(walked.config.steps, vec![Transformation::ParallelizeThread { target: "i".into() }]);
    }

    #[test]
    fn profile_counts_levels() {
        let n = node("[[loops]]\nid = \"i\"\n");
        let prof = depth_profile(&n, &SpaceParams::default(), 1);
        assert_eq!(prof[0].nodes, 1);
        assert_eq!(prof[1].nodes, 26);
    }
}
