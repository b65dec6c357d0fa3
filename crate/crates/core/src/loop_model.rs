//! Loop nests, the six pragma transformations, and pragma rendering.
//!
//! A [`LoopNest`] only records loop structure: ids, nesting, whether a loop
//! may still be transformed, and which arrays are available for packing.
//! Loop bodies are not modeled; legality is left to the compiler behind the
//! evaluator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which transformation produced a loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Floor,
    Tile,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Floor => "floor",
            Origin::Tile => "tile",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loop {
    pub id: String,
    pub children: Vec<Loop>,
    pub transformable: bool,
    pub origin: Option<Origin>,
    /// Set after a reversal; reversing again would restore the original order.
    pub reversed: bool,
    /// Cleared after a partial unroll.
    pub unrollable: bool,
    /// Arrays already packed in this loop.
    pub packed: Vec<String>,
    /// Template anchor this loop sits directly below, if any. Pragmas for a
    /// loop that heads an anchor need no explicit loop id.
    pub line: Option<String>,
    /// Source loop this loop was derived from.
    pub anchor: String,
}

impl Loop {
    fn source(id: &str, transformable: bool, children: Vec<Loop>) -> Self {
        Loop {
            id: id.to_string(),
            children,
            transformable,
            origin: None,
            reversed: false,
            unrollable: true,
            packed: Vec::new(),
            line: Some(id.to_string()),
            anchor: id.to_string(),
        }
    }

    fn derived(id: String, origin: Origin, anchor: &str) -> Self {
        Loop {
            id,
            children: Vec::new(),
            transformable: true,
            origin: Some(origin),
            reversed: false,
            unrollable: true,
            packed: Vec::new(),
            line: None,
            anchor: anchor.to_string(),
        }
    }

    fn freeze(&mut self) {
        self.transformable = false;
        for c in &mut self.children {
            c.freeze();
        }
    }

    /// Number of loops in this subtree, including `self`.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Loop::size).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopNest {
    pub roots: Vec<Loop>,
    pub arrays: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NestDoc {
    #[serde(default)]
    arrays: Vec<String>,
    loops: Vec<LoopDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoopDoc {
    id: String,
    #[serde(default)]
    children: Vec<LoopDoc>,
    #[serde(default = "default_true")]
    transformable: bool,
}

fn default_true() -> bool {
    true
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses a loop-nest description document (TOML).
///
/// ```toml
/// arrays = ["A", "B", "C"]
///
/// [[loops]]
/// id = "i"
/// [[loops.children]]
/// id = "j"
/// ```
pub fn load_loop_nest(description: &str) -> Result<LoopNest> {
    let doc: NestDoc = toml::from_str(description).map_err(|e| Error::Parse(e.to_string()))?;
    let mut seen = HashSet::new();
    fn build(doc: LoopDoc, seen: &mut HashSet<String>) -> Result<Loop> {
        if !is_identifier(&doc.id) {
            return Err(Error::BadId(doc.id));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        let children = doc
            .children
            .into_iter()
            .map(|c| build(c, seen))
            .collect::<Result<Vec<_>>>()?;
        Ok(Loop::source(&doc.id, doc.transformable, children))
    }
    let roots = doc
        .loops
        .into_iter()
        .map(|l| build(l, &mut seen))
        .collect::<Result<Vec<_>>>()?;
    let mut arrays = Vec::new();
    for a in doc.arrays {
        if !is_identifier(&a) {
            return Err(Error::Parse(format!("invalid array name `{a}`")));
        }
        if !arrays.contains(&a) {
            arrays.push(a);
        }
    }
    Ok(LoopNest { roots, arrays })
}

impl LoopNest {
    /// All loops in pre-order (parents before children, siblings in order).
    pub fn preorder(&self) -> Vec<&Loop> {
        fn walk<'a>(l: &'a Loop, out: &mut Vec<&'a Loop>) {
            out.push(l);
            for c in &l.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, &mut out);
        }
        out
    }

    pub fn loop_count(&self) -> usize {
        self.roots.iter().map(Loop::size).sum()
    }

    pub fn find(&self, id: &str) -> Option<&Loop> {
        self.preorder().into_iter().find(|l| l.id == id)
    }

    /// Path of loops from a root down to `id`, inclusive.
    pub fn ancestry(&self, id: &str) -> Option<Vec<&Loop>> {
        fn walk<'a>(l: &'a Loop, id: &str, path: &mut Vec<&'a Loop>) -> bool {
            path.push(l);
            if l.id == id || l.children.iter().any(|c| walk(c, id, path)) {
                return true;
            }
            path.pop();
            false
        }
        let mut path = Vec::new();
        self.roots
            .iter()
            .any(|r| walk(r, id, &mut path))
            .then_some(path)
    }

    /// Maximal perfect nests over transformable loops, ordered by the
    /// pre-order position of their outermost loop. A loop continues a chain
    /// when its parent is transformable and has it as its only child.
    pub fn perfect_nests(&self) -> Vec<Vec<String>> {
        fn walk(l: &Loop, continues: bool, out: &mut Vec<Vec<String>>) {
            if l.transformable && !continues {
                let mut chain = vec![l.id.clone()];
                let mut cur = l;
                while let [only] = cur.children.as_slice() {
                    if !only.transformable {
                        break;
                    }
                    chain.push(only.id.clone());
                    cur = only;
                }
                out.push(chain);
            }
            let links = l.transformable && l.children.len() == 1;
            for c in &l.children {
                walk(c, links && c.transformable, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, false, &mut out);
        }
        out
    }

    /// The perfect nest whose outermost loop is `top`.
    pub fn chain_from(&self, top: &str) -> Option<Vec<String>> {
        self.perfect_nests().into_iter().find(|c| c[0] == top)
    }

    fn ids(&self) -> HashSet<String> {
        self.preorder().into_iter().map(|l| l.id.clone()).collect()
    }
}

fn find_mut<'a>(loops: &'a mut [Loop], id: &str) -> Option<&'a mut Loop> {
    for l in loops {
        if l.id == id {
            return Some(l);
        }
        if let Some(found) = find_mut(&mut l.children, id) {
            return Some(found);
        }
    }
    None
}

/// The sibling list containing `id` and its position in it.
fn container_of<'a>(loops: &'a mut Vec<Loop>, id: &str) -> Option<(&'a mut Vec<Loop>, usize)> {
    if let Some(pos) = loops.iter().position(|l| l.id == id) {
        return Some((loops, pos));
    }
    for l in loops.iter_mut() {
        if let Some(found) = container_of(&mut l.children, id) {
            return Some(found);
        }
    }
    None
}

fn fresh_id(taken: &mut HashSet<String>, base: String) -> String {
    let mut candidate = base.clone();
    let mut n = 2;
    while taken.contains(&candidate) {
        candidate = format!("{base}_{n}");
        n += 1;
    }
    taken.insert(candidate.clone());
    candidate
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnrollFactor {
    Full,
    Partial(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transformation {
    Tile { nest_top: String, size: u32, peel: bool },
    Interchange { nest_top: String, permutation: Vec<usize> },
    ParallelizeThread { target: String },
    Unroll { target: String, factor: UnrollFactor },
    Reverse { target: String },
    Pack { target: String, array: String },
}

/// A transformation with its loop reference erased. Two steps on different
/// branches of the search tree are "the same pragma" when these compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pragma {
    Tile { size: u32, peel: bool },
    Interchange { permutation: Vec<usize> },
    ParallelizeThread,
    Unroll { factor: UnrollFactor },
    Reverse,
    Pack { array: String },
}

impl Transformation {
    /// The loop this transformation is attached to.
    pub fn target(&self) -> &str {
        match self {
            Transformation::Tile { nest_top, .. } | Transformation::Interchange { nest_top, .. } => {
                nest_top
            }
            Transformation::ParallelizeThread { target }
            | Transformation::Unroll { target, .. }
            | Transformation::Reverse { target }
            | Transformation::Pack { target, .. } => target,
        }
    }

    pub fn pragma(&self) -> Pragma {
        match self {
            Transformation::Tile { size, peel, .. } => Pragma::Tile { size: *size, peel: *peel },
            Transformation::Interchange { permutation, .. } => Pragma::Interchange {
                permutation: permutation.clone(),
            },
            Transformation::ParallelizeThread { .. } => Pragma::ParallelizeThread,
            Transformation::Unroll { factor, .. } => Pragma::Unroll { factor: *factor },
            Transformation::Reverse { .. } => Pragma::Reverse,
            Transformation::Pack { array, .. } => Pragma::Pack { array: array.clone() },
        }
    }
}

impl fmt::Display for Transformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transformation::Tile { nest_top, size, peel } => {
                write!(f, "tile({nest_top},{size}")?;
                if *peel {
                    write!(f, ",peel")?;
                }
                write!(f, ")")
            }
            Transformation::Interchange { nest_top, permutation } => {
                let p: Vec<String> = permutation.iter().map(usize::to_string).collect();
                write!(f, "interchange({nest_top},{})", p.join(":"))
            }
            Transformation::ParallelizeThread { target } => write!(f, "parallelize({target})"),
            Transformation::Unroll { target, factor } => match factor {
                UnrollFactor::Full => write!(f, "unroll({target},full)"),
                UnrollFactor::Partial(n) => write!(f, "unroll({target},{n})"),
            },
            Transformation::Reverse { target } => write!(f, "reverse({target})"),
            Transformation::Pack { target, array } => write!(f, "pack({target},{array})"),
        }
    }
}

/// An ordered transformation sequence; the empty sequence is the original program.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub steps: Vec<Transformation>,
}

impl Configuration {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn is_root(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extended(&self, t: Transformation) -> Self {
        let mut steps = self.steps.clone();
        steps.push(t);
        Configuration { steps }
    }

    /// Canonical key; the root is the empty string. Loop ids and array names
    /// are identifiers, so the punctuation makes the encoding injective.
    pub fn key(&self) -> String {
        self.steps
            .iter()
            .map(Transformation::to_string)
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Folds the steps over `root`.
    pub fn resolve(&self, root: &LoopNest) -> Result<LoopNest> {
        self.steps.iter().try_fold(root.clone(), |nest, t| apply(&nest, t))
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidTarget(msg.into())
}

fn transformable_target<'a>(nest: &'a LoopNest, id: &str) -> Result<&'a Loop> {
    let l = nest.find(id).ok_or_else(|| invalid(format!("no loop `{id}`")))?;
    if !l.transformable {
        return Err(invalid(format!("loop `{id}` is not transformable")));
    }
    Ok(l)
}

fn is_valid_permutation(p: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    p.len() == k
        && p.iter().all(|&i| i < k && !std::mem::replace(&mut seen[i], true))
        && p.iter().enumerate().any(|(pos, &i)| pos != i)
}

/// Checks that `t` can be applied to `nest` and returns the perfect nest it
/// covers (a single loop for the non-nest transformations).
fn validate(nest: &LoopNest, t: &Transformation) -> Result<Vec<String>> {
    match t {
        Transformation::Tile { nest_top, size, .. } => {
            if *size == 0 {
                return Err(invalid("tile size must be positive"));
            }
            transformable_target(nest, nest_top)?;
            nest.chain_from(nest_top)
                .ok_or_else(|| invalid(format!("`{nest_top}` does not head a perfect nest")))
        }
        Transformation::Interchange { nest_top, permutation } => {
            transformable_target(nest, nest_top)?;
            let chain = nest
                .chain_from(nest_top)
                .ok_or_else(|| invalid(format!("`{nest_top}` does not head a perfect nest")))?;
            if !is_valid_permutation(permutation, chain.len()) {
                return Err(invalid(format!(
                    "{permutation:?} is not a non-identity permutation of a depth-{} nest",
                    chain.len()
                )));
            }
            Ok(chain)
        }
        Transformation::ParallelizeThread { target } => {
            transformable_target(nest, target)?;
            Ok(vec![target.clone()])
        }
        Transformation::Unroll { target, factor } => {
            let l = transformable_target(nest, target)?;
            if !l.unrollable {
                return Err(invalid(format!("loop `{target}` was already unrolled")));
            }
            if *factor == UnrollFactor::Partial(0) {
                return Err(invalid("unroll factor must be positive"));
            }
            Ok(vec![target.clone()])
        }
        Transformation::Reverse { target } => {
            if transformable_target(nest, target)?.reversed {
                return Err(invalid(format!("loop `{target}` was already reversed")));
            }
            Ok(vec![target.clone()])
        }
        Transformation::Pack { target, array } => {
            let l = transformable_target(nest, target)?;
            if !nest.arrays.contains(array) {
                return Err(invalid(format!("unknown array `{array}`")));
            }
            if l.packed.contains(array) {
                return Err(invalid(format!("`{array}` already packed in `{target}`")));
            }
            Ok(vec![target.clone()])
        }
    }
}

/// Applies one transformation, returning the transformed nest.
pub fn apply(nest: &LoopNest, t: &Transformation) -> Result<LoopNest> {
    let chain = validate(nest, t)?;
    let mut out = nest.clone();
    match t {
        Transformation::Tile { nest_top, .. } => {
            let mut taken = out.ids();
            let (siblings, pos) = container_of(&mut out.roots, nest_top).expect("validated");
            // Unlink the chain from its position.
            let mut chain_loops = Vec::with_capacity(chain.len());
            let mut cur = siblings.remove(pos);
            loop {
                let next = if chain_loops.len() + 1 < chain.len() {
                    cur.children.pop()
                } else {
                    None
                };
                chain_loops.push(cur);
                match next {
                    Some(n) => cur = n,
                    None => break,
                }
            }
            let body = std::mem::take(&mut chain_loops.last_mut().unwrap().children);
            let mut floors = Vec::new();
            let mut tiles = Vec::new();
            for l in &chain_loops {
                floors.push(Loop::derived(
                    fresh_id(&mut taken, format!("{}1", l.id)),
                    Origin::Floor,
                    &l.anchor,
                ));
            }
            for l in &chain_loops {
                tiles.push(Loop::derived(
                    fresh_id(&mut taken, format!("{}2", l.id)),
                    Origin::Tile,
                    &l.anchor,
                ));
            }
            floors[0].line = chain_loops[0].line.clone();
            let mut inner = body;
            for mut l in floors.into_iter().chain(tiles).rev() {
                l.children = inner;
                inner = vec![l];
            }
            siblings.insert(pos, inner.pop().unwrap());
        }
        Transformation::Interchange { nest_top, permutation } => {
            let (siblings, pos) = container_of(&mut out.roots, nest_top).expect("validated");
            let mut chain_loops = Vec::with_capacity(chain.len());
            let mut cur = siblings.remove(pos);
            loop {
                let next = if chain_loops.len() + 1 < chain.len() {
                    cur.children.pop()
                } else {
                    None
                };
                chain_loops.push(cur);
                match next {
                    Some(n) => cur = n,
                    None => break,
                }
            }
            let body = std::mem::take(&mut chain_loops.last_mut().unwrap().children);
            let top_line = chain_loops[0].line.take();
            let mut slots: Vec<Option<Loop>> = chain_loops.into_iter().map(Some).collect();
            let mut ordered: Vec<Loop> = permutation
                .iter()
                .map(|&i| slots[i].take().expect("permutation validated"))
                .collect();
            for l in &mut ordered {
                l.line = None;
            }
            ordered[0].line = top_line;
            let mut inner = body;
            for mut l in ordered.into_iter().rev() {
                l.children = inner;
                inner = vec![l];
            }
            siblings.insert(pos, inner.pop().unwrap());
        }
        Transformation::ParallelizeThread { target } => {
            find_mut(&mut out.roots, target).expect("validated").freeze();
        }
        Transformation::Unroll { target, factor } => match factor {
            UnrollFactor::Full => {
                let (siblings, pos) = container_of(&mut out.roots, target).expect("validated");
                let removed = siblings.remove(pos);
                for (i, c) in removed.children.into_iter().enumerate() {
                    siblings.insert(pos + i, c);
                }
            }
            UnrollFactor::Partial(_) => {
                find_mut(&mut out.roots, target).expect("validated").unrollable = false;
            }
        },
        Transformation::Reverse { target } => {
            find_mut(&mut out.roots, target).expect("validated").reversed = true;
        }
        Transformation::Pack { target, array } => {
            find_mut(&mut out.roots, target)
                .expect("validated")
                .packed
                .push(array.clone());
        }
    }
    Ok(out)
}

/// Where a pragma goes in the template, and its text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedPragma {
    pub anchor: String,
    pub text: String,
}

/// Places `t` relative to the template anchors of `nest` (the nest before
/// `t` is applied). A loop heading an anchor gets a bare directive; any other
/// loop is named explicitly and the directive goes above the nearest
/// enclosing loop that heads an anchor.
pub fn place_pragma(nest: &LoopNest, t: &Transformation) -> Result<PlacedPragma> {
    let chain = validate(nest, t)?;
    let path = nest.ancestry(t.target()).expect("validated");
    let target = *path.last().unwrap();
    let explicit = target.line.is_none();
    let anchor = path
        .iter()
        .rev()
        .find_map(|l| l.line.clone())
        .unwrap_or_else(|| target.anchor.clone());
    let prefix = if explicit {
        format!("#pragma clang loop({})", target.id)
    } else {
        "#pragma clang loop".to_string()
    };
    let text = match t {
        Transformation::Tile { size, peel, .. } => {
            let sizes = vec![size.to_string(); chain.len()].join(",");
            let peel = if *peel { " peel(rectangular)" } else { "" };
            format!("{prefix} tile sizes({sizes}){peel}")
        }
        Transformation::Interchange { permutation, .. } => {
            let ids: Vec<&str> = permutation.iter().map(|&i| chain[i].as_str()).collect();
            format!("{prefix} interchange permutation({})", ids.join(","))
        }
        Transformation::ParallelizeThread { .. } => format!("{prefix} parallelize_thread"),
        Transformation::Unroll { factor: UnrollFactor::Full, .. } => {
            format!("{prefix} unrolling full")
        }
        Transformation::Unroll { factor: UnrollFactor::Partial(n), .. } => {
            format!("{prefix} unrolling factor({n})")
        }
        Transformation::Reverse { .. } => format!("{prefix} reverse"),
        Transformation::Pack { array, .. } => format!("{prefix} pack array({array})"),
    };
    Ok(PlacedPragma { anchor, text })
}

/// Pragmas of a configuration in application order.
pub fn placed_pragmas(root: &LoopNest, config: &Configuration) -> Result<Vec<PlacedPragma>> {
    let mut nest = root.clone();
    let mut out = Vec::with_capacity(config.steps.len());
    for t in &config.steps {
        out.push(place_pragma(&nest, t)?);
        nest = apply(&nest, t)?;
    }
    Ok(out)
}

const ANCHOR_OPEN: &str = "/*@loop:";

fn anchors_in(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = line;
    while let Some(start) = rest.find(ANCHOR_OPEN) {
        let after = &rest[start + ANCHOR_OPEN.len()..];
        match after.find("*/") {
            Some(end) => {
                out.push(after[..end].trim());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

/// Inserts the configuration's pragmas below the `/*@loop:<id>*/` anchor
/// line of each loop. Directives apply to the next line, so the most recently
/// applied transformation is emitted first.
pub fn render_pragmas(root: &LoopNest, config: &Configuration, template: &str) -> Result<String> {
    let placed = placed_pragmas(root, config)?;
    let mut by_anchor: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in &placed {
        by_anchor.entry(&p.anchor).or_default().push(&p.text);
    }
    let present: HashSet<&str> = template.lines().flat_map(anchors_in).collect();
    if let Some(missing) = by_anchor.keys().find(|a| !present.contains(*a)) {
        return Err(Error::MissingAnchor(missing.to_string()));
    }
    let mut out = String::with_capacity(template.len() + 64 * placed.len());
    for line in template.split_inclusive('\n') {
        out.push_str(line);
        let indent: String = line.chars().take_while(|c| *c == ' ' || *c == '\t').collect();
        for anchor in anchors_in(line) {
            if let Some(texts) = by_anchor.remove(anchor) {
                if !out.ends_with('\n') {
                    out.push('\n');
                }
                for text in texts.iter().rev() {
                    out.push_str(&indent);
                    out.push_str(text);
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIPLE: &str = r#"
arrays = ["A", "B", "C"]
[[loops]]
id = "i"
[[loops.children]]
id = "j"
[[loops.children.children]]
id = "k"
"#;

    fn single() -> LoopNest {
        load_loop_nest("[[loops]]\nid = \"i\"\n").unwrap()
    }

    fn tile(top: &str, size: u32) -> Transformation {
        Transformation::Tile { nest_top: top.into(), size, peel: false }
    }

    fn par(t: &str) -> Transformation {
        Transformation::ParallelizeThread { target: t.into() }
    }

    #[test]
    fn loads_triple_nest() {
        let nest = load_loop_nest(TRIPLE).unwrap();
        assert_eq!(nest.roots.len(), 1);
        assert_eq!(nest.arrays, vec!["A", "B", "C"]);
        assert_eq!(nest.perfect_nests(), vec![vec!["i", "j", "k"]]);
        assert!(nest.preorder().iter().all(|l| l.transformable));
    }

    #[test]
    fn loads_siblings_and_flags() {
        let nest = load_loop_nest(
            "[[loops]]\nid = \"a\"\n[[loops]]\nid = \"b\"\ntransformable = false\n",
        )
        .unwrap();
        assert_eq!(nest.roots.len(), 2);
        assert!(!nest.find("b").unwrap().transformable);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        let dup = "[[loops]]\nid = \"i\"\n[[loops.children]]\nid = \"i\"\n";
        assert!(matches!(load_loop_nest(dup), Err(Error::DuplicateId(id)) if id == "i"));
        assert!(matches!(load_loop_nest("loops = 3"), Err(Error::Parse(_))));
        assert!(matches!(
            load_loop_nest("[[loops]]\nid = \"a b\"\n"),
            Err(Error::BadId(_))
        ));
    }

    #[test]
    fn tile_single_loop_gives_floor_and_tile() {
        let nest = single();
        let out = apply(&nest, &tile("i", 32)).unwrap();
        let ids: Vec<_> = out.preorder().iter().map(|l| l.id.clone()).collect();
        assert_eq!(ids, vec!["i1", "i2"]);
        assert_eq!(out.find("i1").unwrap().origin, Some(Origin::Floor));
        assert_eq!(out.find("i2").unwrap().origin, Some(Origin::Tile));
        // input untouched
        assert_eq!(nest, single());
    }

    #[test]
    fn tile_doubles_perfect_nest() {
        let nest = load_loop_nest(TRIPLE).unwrap();
        let out = apply(&nest, &tile("i", 8)).unwrap();
        assert_eq!(out.loop_count(), 6);
        let ids: Vec<_> = out.preorder().iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, vec!["i1", "j1", "k1", "i2", "j2", "k2"]);
        assert_eq!(out.perfect_nests().len(), 1);
    }

    #[test]
    fn tile_id_collision_gets_suffix() {
        let nest = load_loop_nest(
            "[[loops]]\nid = \"i\"\n[[loops]]\nid = \"i1\"\n",
        )
        .unwrap();
        let out = apply(&nest, &tile("i", 4)).unwrap();
        assert!(out.find("i1_2").is_some());
        assert_eq!(out.loop_count(), 3);
    }

    #[test]
    fn parallelize_freezes_subtree() {
        let nest = load_loop_nest(TRIPLE).unwrap();
        let out = apply(&nest, &par("j")).unwrap();
        assert!(out.find("i").unwrap().transformable);
        assert!(!out.find("j").unwrap().transformable);
        assert!(!out.find("k").unwrap().transformable);
        assert!(apply(&out, &Transformation::Reverse { target: "k".into() }).is_err());
        let frozen = apply(&nest, &par("i")).unwrap();
        assert!(frozen.perfect_nests().is_empty());
    }

    #[test]
    fn identity_interchange_rejected() {
        let nest = load_loop_nest("[[loops]]\nid = \"i\"\n[[loops.children]]\nid = \"j\"\n").unwrap();
        let id = Transformation::Interchange { nest_top: "i".into(), permutation: vec![0, 1] };
        assert!(matches!(apply(&nest, &id), Err(Error::InvalidTarget(_))));
        let swap = Transformation::Interchange { nest_top: "i".into(), permutation: vec![1, 0] };
        let out = apply(&nest, &swap).unwrap();
        assert_eq!(out.roots[0].id, "j");
        assert_eq!(out.roots[0].children[0].id, "i");
    }

    #[test]
    fn unroll_full_removes_partial_marks() {
        let nest = load_loop_nest(TRIPLE).unwrap();
        let full = Transformation::Unroll { target: "j".into(), factor: UnrollFactor::Full };
        let out = apply(&nest, &full).unwrap();
        assert_eq!(out.loop_count(), 2);
        assert_eq!(out.roots[0].children[0].id, "k");
        let part = Transformation::Unroll { target: "j".into(), factor: UnrollFactor::Partial(4) };
        let out = apply(&nest, &part).unwrap();
        assert!(!out.find("j").unwrap().unrollable);
        assert!(apply(&out, &part).is_err());
    }

    #[test]
    fn reverse_and_pack_are_once_only() {
        let nest = load_loop_nest(TRIPLE).unwrap();
        let rev = Transformation::Reverse { target: "k".into() };
        let out = apply(&nest, &rev).unwrap();
        assert!(apply(&out, &rev).is_err());
        let pack = Transformation::Pack { target: "k".into(), array: "A".into() };
        let out = apply(&nest, &pack).unwrap();
        assert!(apply(&out, &pack).is_err());
        let other = Transformation::Pack { target: "k".into(), array: "B".into() };
        assert!(apply(&out, &other).is_ok());
        let bogus = Transformation::Pack { target: "k".into(), array: "Z".into() };
        assert!(apply(&nest, &bogus).is_err());
    }

    #[test]
    fn perfect_nest_splits_at_branch() {
        let nest = load_loop_nest(
            "[[loops]]\nid = \"p\"\n[[loops.children]]\nid = \"a\"\n[[loops.children]]\nid = \"b\"\n[[loops.children.children]]\nid = \"c\"\n",
        )
        .unwrap();
        assert_eq!(
            nest.perfect_nests(),
            vec![vec!["p".to_string()], vec!["a".to_string()], vec!["b".to_string(), "c".to_string()]]
        );
    }

    #[test]
    fn missing_target_is_invalid() {
        assert!(matches!(apply(&single(), &par("q")), Err(Error::InvalidTarget(_))));
    }

    #[test]
    fn render_empty_config_is_identity() {
        let template = "/*@loop:i*/\nfor (;;) {}\n";
        let out = render_pragmas(&single(), &Configuration::root(), template).unwrap();
        assert_eq!(out, template);
    }

    #[test]
    fn render_missing_anchor() {
        let cfg = Configuration { steps: vec![par("i")] };
        let err = render_pragmas(&single(), &cfg, "for (;;) {}\n").unwrap_err();
        assert!(matches!(err, Error::MissingAnchor(a) if a == "i"));
    }

    #[test]
    fn render_names_non_head_loops() {
        let cfg = Configuration { steps: vec![tile("i", 4), par("i2")] };
        let placed = placed_pragmas(&single(), &cfg).unwrap();
        assert_eq!(placed[1].text, "#pragma clang loop(i2) parallelize_thread");
        assert_eq!(placed[1].anchor, "i");
    }

    #[test]
    fn keys_distinguish_steps() {
        let a = Configuration { steps: vec![tile("i", 4), par("i1")] };
        let b = Configuration { steps: vec![par("i1"), tile("i", 4)] };
        assert_ne!(a.key(), b.key());
        assert_eq!(Configuration::root().key(), "");
        assert_eq!(a.key(), "tile(i,4)/parallelize(i1)");
    }
}
