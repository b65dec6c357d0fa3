#![allow(dead_code)]

//! Test support: an exhaustive child enumerator written from the documented
//! ordering rules, random nest generation and small fixed landscapes.

use std::collections::BTreeMap;

use pragma_mcts::loop_model::{load_loop_nest, Loop, LoopNest, Transformation, UnrollFactor};
use pragma_mcts::space::SpaceParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loops in pre-order with their parent.
fn flatten<'a>(loops: &'a [Loop], parent: Option<&'a Loop>, out: &mut Vec<(&'a Loop, Option<&'a Loop>)>) {
    for l in loops {
        out.push((l, parent));
        flatten(&l.children, Some(l), out);
    }
}

/// All permutations of `0..k` in lexicographic order.
fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for x in 0..k {
            if !prefix.contains(&x) {
                prefix.push(x);
                rec(prefix, k, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), k, &mut out);
    out
}

/// Every legal child transformation of `nest`, in child-index order.
///
/// Rules: a perfect chain starts at a transformable loop unless its parent is
/// transformable with it as the only child, and extends through single
/// transformable children. Kinds come in the order tile, interchange,
/// parallelize, unroll, reverse, pack; targets in pre-order; tile sizes vary
/// slowest, then peel; unroll lists full first; interchange offers all
/// non-identity permutations in lexicographic order for chains of at most
/// four loops and adjacent swaps beyond.
pub fn oracle_children(nest: &LoopNest, params: &SpaceParams) -> Vec<Transformation> {
    let mut loops = Vec::new();
    flatten(&nest.roots, None, &mut loops);
    let mut chains: Vec<Vec<&Loop>> = Vec::new();
    for &(l, parent) in &loops {
        if !l.transformable {
            continue;
        }
        let continues = parent.is_some_and(|p| p.transformable && p.children.len() == 1);
        if continues {
            continue;
        }
        let mut chain = vec![l];
        while chain.last().unwrap().children.len() == 1 && chain.last().unwrap().children[0].transformable {
            let next = &chain.last().unwrap().children[0];
            chain.push(next);
        }
        chains.push(chain);
    }
    let live: Vec<&Loop> = loops.iter().map(|(l, _)| *l).filter(|l| l.transformable).collect();

    let mut out = Vec::new();
    for c in &chains {
        for &size in &params.tile_sizes {
            for &peel in &params.peel_variants {
                out.push(Transformation::Tile { nest_top: c[0].id.clone(), size, peel });
            }
        }
    }
    for c in &chains {
        let k = c.len();
        if k < 2 {
            continue;
        }
        let identity: Vec<usize> = (0..k).collect();
        let perms: Vec<Vec<usize>> = if k <= 4 {
            all_permutations(k).into_iter().filter(|p| *p != identity).collect()
        } else {
            (0..k - 1)
                .map(|i| {
                    let mut p = identity.clone();
                    p.swap(i, i + 1);
                    p
                })
                .collect()
        };
        for permutation in perms {
            out.push(Transformation::Interchange { nest_top: c[0].id.clone(), permutation });
        }
    }
    for l in &live {
        out.push(Transformation::ParallelizeThread { target: l.id.clone() });
    }
    for l in live.iter().filter(|l| l.unrollable) {
        out.push(Transformation::Unroll { target: l.id.clone(), factor: UnrollFactor::Full });
        for &f in &params.unroll_factors {
            out.push(Transformation::Unroll { target: l.id.clone(), factor: UnrollFactor::Partial(f) });
        }
    }
    for l in live.iter().filter(|l| !l.reversed) {
        out.push(Transformation::Reverse { target: l.id.clone() });
    }
    for l in &live {
        for a in &nest.arrays {
            if !l.packed.contains(a) {
                out.push(Transformation::Pack { target: l.id.clone(), array: a.clone() });
            }
        }
    }
    out
}

/// Loop count after `t`, from the shape rules alone.
pub fn expected_loop_count(nest: &LoopNest, t: &Transformation) -> usize {
    let n = nest.loop_count();
    match t {
        Transformation::Tile { nest_top, .. } => {
            let mut k = 1;
            let mut cur = nest.find(nest_top).unwrap();
            while cur.children.len() == 1 && cur.children[0].transformable {
                k += 1;
                cur = &cur.children[0];
            }
            n + k
        }
        Transformation::Unroll { factor: UnrollFactor::Full, .. } => n - 1,
        _ => n,
    }
}

/// Random nest description with at most `max_loops` loops.
pub fn random_nest_toml(seed: u64, max_loops: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_arrays = rng.gen_range(0..=3);
    let arrays: Vec<String> = (0..n_arrays).map(|i| format!("\"{}\"", (b'A' + i as u8) as char)).collect();
    let target = rng.gen_range(1..=max_loops);
    // parent index per loop, -1 for roots; only earlier loops can be parents.
    let mut parents: Vec<Option<usize>> = Vec::new();
    let mut depth = Vec::new();
    for i in 0..target {
        let p = if i == 0 || rng.gen_bool(0.15) {
            None
        } else {
            // Favour chains: attach to the most recent loop most of the time.
            let cand = if rng.gen_bool(0.6) { i - 1 } else { rng.gen_range(0..i) };
            (depth[cand] < 4).then_some(cand)
        };
        depth.push(p.map_or(0, |q: usize| depth[q] + 1));
        parents.push(p);
    }
    let transformable: Vec<bool> = (0..target).map(|_| rng.gen_bool(0.85)).collect();
    let mut children: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in parents.iter().enumerate() {
        children.entry(*p).or_default().push(i);
    }
    fn emit(i: usize, path: &str, children: &BTreeMap<Option<usize>, Vec<usize>>, tf: &[bool], out: &mut String) {
        out.push_str(&format!("[[{path}]]\nid = \"l{i}\"\n"));
        if !tf[i] {
            out.push_str("transformable = false\n");
        }
        for &c in children.get(&Some(i)).map(Vec::as_slice).unwrap_or(&[]) {
            emit(c, &format!("{path}.children"), children, tf, out);
        }
    }
    let mut out = format!("arrays = [{}]\n", arrays.join(", "));
    for &r in &children[&None] {
        emit(r, "loops", &children, &transformable, &mut out);
    }
    out
}

pub fn random_nest(seed: u64, max_loops: usize) -> LoopNest {
    load_loop_nest(&random_nest_toml(seed, max_loops)).expect("generated nest parses")
}

pub const GEMM: &str = r#"
arrays = ["A", "B", "C"]
[[loops]]
id = "i"
[[loops.children]]
id = "j"
[[loops.children.children]]
id = "k"
"#;

pub fn gemm() -> LoopNest {
    load_loop_nest(GEMM).unwrap()
}
