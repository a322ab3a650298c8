//! Scene hierarchy construction from boxes, masks and depth.
//!
//! The pipeline is `regions_from_boxes` → [`merge_duplicates`] →
//! [`build_tree`] → [`group_and_count`] → [`serialize_tree`]. Every step is a
//! pure function of its inputs and all orderings are total, so the rendered
//! text does not depend on the order boxes were supplied in.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::RleMask;
use crate::metadata::{BBox, BoxAnnotation, ImageRef};

pub mod labels;

pub use labels::{normalize_label, pluralize};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid scene parameters: {0}")]
pub struct ParamError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneTreeParams {
    /// Largest center distance, as a fraction of the larger box diagonal,
    /// at which two regions may still be merged.
    pub spatial_threshold: f64,
    /// Minimum IoU for two same-label regions to be merged.
    pub merge_threshold: f64,
    /// Minimum fraction of a region inside another for it to become a child.
    pub containment_threshold: f64,
    /// Largest depth difference allowed between merged regions.
    pub depth_tolerance: f64,
    /// Groups up to this size get an exact count.
    pub count_exact_max: usize,
    /// Groups up to this size are "several"; larger ones are "many".
    pub count_several_max: usize,
}

impl Default for SceneTreeParams {
    fn default() -> Self {
        Self {
            spatial_threshold: 0.25,
            merge_threshold: 0.9,
            containment_threshold: 0.8,
            depth_tolerance: 0.15,
            count_exact_max: 4,
            count_several_max: 9,
        }
    }
}

impl SceneTreeParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.merge_threshold) {
            return Err(ParamError("merge_threshold must be in (0, 1]".into()));
        }
        if !unit(self.containment_threshold) {
            return Err(ParamError("containment_threshold must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_tolerance) {
            return Err(ParamError("depth_tolerance must be in [0, 1]".into()));
        }
        if self.spatial_threshold.is_nan() || self.spatial_threshold < 0.0 {
            return Err(ParamError("spatial_threshold must be non-negative".into()));
        }
        if self.count_exact_max >= self.count_several_max {
            return Err(ParamError("count_exact_max must be below count_several_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRegion {
    /// Normalized (lowercase, singular) label.
    pub label: String,
    pub bbox: BBox,
    pub mask: Option<RleMask>,
    pub depth: Option<f64>,
    pub attributes: Vec<String>,
    /// Mask area when a mask is present, otherwise box area.
    pub area: f64,
    pub center: (f64, f64),
    /// Number of original annotations folded into this region.
    pub members: u32,
    /// Smallest original insertion index among the members.
    pub index: usize,
}

impl SceneRegion {
    pub fn from_box(b: &BoxAnnotation, index: usize) -> SceneRegion {
        let mut attributes: Vec<String> = Vec::new();
        for a in &b.attributes {
            let a = a.trim().to_lowercase();
            if !a.is_empty() && !attributes.contains(&a) {
                attributes.push(a);
            }
        }
        let area = match &b.mask {
            Some(m) => m.area() as f64,
            None => b.bbox.area(),
        };
        SceneRegion {
            label: normalize_label(&b.label),
            bbox: b.bbox,
            mask: b.mask.clone(),
            depth: b.depth_mean,
            attributes,
            area,
            center: b.bbox.center(),
            members: 1,
            index,
        }
    }
}

pub fn regions_from_boxes(boxes: &[BoxAnnotation]) -> Vec<SceneRegion> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.bbox.area() > 0.0)
        .map(|(i, b)| SceneRegion::from_box(b, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapStats {
    pub iou: f64,
    /// `|a ∩ b| / |a|`.
    pub containment_of_a_in_b: f64,
    pub center_dist_norm: f64,
}

/// Mask-based when both regions carry masks, box-based otherwise.
pub fn overlap_stats(a: &SceneRegion, b: &SceneRegion) -> OverlapStats {
    let (inter, area_a, area_b) = match (&a.mask, &b.mask) {
        (Some(ma), Some(mb)) => (ma.intersection_area(mb) as f64, ma.area() as f64, mb.area() as f64),
        _ => (a.bbox.intersection_area(&b.bbox), a.bbox.area(), b.bbox.area()),
    };
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let containment_of_a_in_b = if area_a > 0.0 { inter / area_a } else { 0.0 };
    let dist = (a.center.0 - b.center.0).hypot(a.center.1 - b.center.1);
    let diag = a.bbox.diagonal().max(b.bbox.diagonal());
    let center_dist_norm = if diag > 0.0 {
        dist / diag
    } else if dist == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    OverlapStats {
        iou,
        containment_of_a_in_b,
        center_dist_norm,
    }
}

/// Whether two regions are duplicates of one object under `p`.
pub fn should_merge(a: &SceneRegion, b: &SceneRegion, p: &SceneTreeParams) -> bool {
    if a.label != b.label {
        return false;
    }
    if let (Some(da), Some(db)) = (a.depth, b.depth) {
        if (da - db).abs() > p.depth_tolerance {
            return false;
        }
    }
    let s = overlap_stats(a, b);
    s.iou >= p.merge_threshold && s.center_dist_norm <= p.spatial_threshold
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Partition of `regions` into duplicate groups (transitive closure of
/// [`should_merge`]). Each group lists input positions in ascending order;
/// groups are ordered by their smallest `index`.
pub fn duplicate_groups(regions: &[SceneRegion], p: &SceneTreeParams) -> Vec<Vec<usize>> {
    let n = regions.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if should_merge(&regions[i], &regions[j], p) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g.iter().map(|&i| regions[i].index).min());
    out
}

/// Folds same-label, strongly overlapping regions at compatible depths into
/// single regions (union geometry, member-weighted depth).
pub fn merge_duplicates(regions: &[SceneRegion], p: &SceneTreeParams) -> Vec<SceneRegion> {
    duplicate_groups(regions, p)
        .into_iter()
        .map(|g| {
            let mut members: Vec<&SceneRegion> = g.iter().map(|&i| &regions[i]).collect();
            members.sort_by(|a, b| cmp_region(a, b));
            fold_regions(&members)
        })
        .collect()
}

fn fold_regions(members: &[&SceneRegion]) -> SceneRegion {
    let first = members[0];
    if members.len() == 1 {
        return first.clone();
    }
    let bbox = members.iter().skip(1).fold(first.bbox, |acc, r| acc.hull(&r.bbox));
    let mask = members.iter().find_map(|r| r.mask.as_ref()).map(|m0| {
        let (w, h) = (m0.width(), m0.height());
        members.iter().fold(RleMask::empty(w, h), |acc, r| match &r.mask {
            Some(m) => acc.union(m),
            None => acc.union(&r.bbox.to_mask(w, h)),
        })
    });
    let (mut dsum, mut dw) = (0.0, 0u32);
    for r in members {
        if let Some(d) = r.depth {
            dsum += d * r.members as f64;
            dw += r.members;
        }
    }
    let mut attributes: Vec<String> = Vec::new();
    for r in members {
        for a in &r.attributes {
            if !attributes.contains(a) {
                attributes.push(a.clone());
            }
        }
    }
    let area = match &mask {
        Some(m) => m.area() as f64,
        None => bbox.area(),
    };
    SceneRegion {
        label: first.label.clone(),
        bbox,
        mask,
        depth: (dw > 0).then(|| dsum / dw as f64),
        attributes,
        area,
        center: bbox.center(),
        members: members.iter().map(|r| r.members).sum(),
        index: members.iter().map(|r| r.index).min().unwrap_or(first.index),
    }
}

fn cmp_f64_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

fn cmp_depth(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Content order used as the final tie-breaker everywhere.
fn cmp_region(a: &SceneRegion, b: &SceneRegion) -> Ordering {
    a.label
        .cmp(&b.label)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then_with(|| cmp_depth(a.depth, b.depth))
        .then_with(|| a.attributes.cmp(&b.attributes))
        .then(a.members.cmp(&b.members))
        .then(a.index.cmp(&b.index))
}

/// Order in which regions are inserted into the hierarchy: largest first.
pub fn insertion_order(regions: &[SceneRegion]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&i, &j| {
        cmp_f64_desc(regions[i].area, regions[j].area).then_with(|| cmp_region(&regions[i], &regions[j]))
    });
    order
}

/// Parent of each region (position into `regions`), or `None` for roots.
///
/// Regions are taken largest first; each one hangs under the smallest
/// already placed region containing it with ratio at least the containment
/// threshold. Among equally small containers the most recently placed wins.
pub fn assign_parents(regions: &[SceneRegion], p: &SceneTreeParams) -> Vec<Option<usize>> {
    let order = insertion_order(regions);
    let mut parents = vec![None; regions.len()];
    for (k, &r) in order.iter().enumerate() {
        let mut best: Option<usize> = None;
        for &q in &order[..k] {
            let c = overlap_stats(&regions[r], &regions[q]).containment_of_a_in_b;
            if c >= p.containment_threshold && best.is_none_or(|b| regions[q].area <= regions[b].area) {
                best = Some(q);
            }
        }
        parents[r] = best;
    }
    parents
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountDescriptor {
    Exact(usize),
    Several,
    Many,
}

impl CountDescriptor {
    pub fn for_count(n: usize, p: &SceneTreeParams) -> Self {
        if n <= p.count_exact_max {
            CountDescriptor::Exact(n)
        } else if n <= p.count_several_max {
            CountDescriptor::Several
        } else {
            CountDescriptor::Many
        }
    }

    pub fn phrase(&self, label: &str) -> String {
        match self {
            CountDescriptor::Exact(1) => label.to_string(),
            CountDescriptor::Exact(n) => format!("{n} {}", pluralize(label)),
            CountDescriptor::Several => format!("several {}", pluralize(label)),
            CountDescriptor::Many => format!("many {}", pluralize(label)),
        }
    }
}

/// Synthetic node gathering same-label siblings.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub label: String,
    pub count: usize,
    pub descriptor: CountDescriptor,
    pub avg_width: f64,
    pub avg_height: f64,
    pub center: (f64, f64),
    pub depth: Option<f64>,
    pub total_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Region(SceneRegion),
    Group(GroupInfo),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneNode {
    pub kind: NodeKind,
    pub children: Vec<SceneNode>,
}

impl SceneNode {
    fn label(&self) -> &str {
        match &self.kind {
            NodeKind::Region(r) => &r.label,
            NodeKind::Group(g) => &g.label,
        }
    }

    fn depth_key(&self) -> Option<f64> {
        match &self.kind {
            NodeKind::Region(r) => r.depth,
            NodeKind::Group(g) => g.depth,
        }
    }

    fn area_key(&self) -> f64 {
        match &self.kind {
            NodeKind::Region(r) => r.area,
            NodeKind::Group(g) => g.total_area,
        }
    }

    pub fn region(&self) -> Option<&SceneRegion> {
        match &self.kind {
            NodeKind::Region(r) => Some(r),
            NodeKind::Group(_) => None,
        }
    }

    pub fn group(&self) -> Option<&GroupInfo> {
        match &self.kind {
            NodeKind::Group(g) => Some(g),
            NodeKind::Region(_) => None,
        }
    }
}

/// Nearest first, then largest, then label, then geometry.
fn cmp_siblings(a: &SceneNode, b: &SceneNode) -> Ordering {
    cmp_depth(a.depth_key(), b.depth_key())
        .then_with(|| cmp_f64_desc(a.area_key(), b.area_key()))
        .then_with(|| a.label().cmp(b.label()))
        .then_with(|| match (&a.kind, &b.kind) {
            (NodeKind::Region(x), NodeKind::Region(y)) => cmp_region(x, y),
            (NodeKind::Group(x), NodeKind::Group(y)) => x
                .count
                .cmp(&y.count)
                .then(x.center.0.total_cmp(&y.center.0))
                .then(x.center.1.total_cmp(&y.center.1)),
            (NodeKind::Group(_), NodeKind::Region(_)) => Ordering::Less,
            (NodeKind::Region(_), NodeKind::Group(_)) => Ordering::Greater,
        })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneTree {
    pub roots: Vec<SceneNode>,
}

impl SceneTree {
    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    /// Longest root-to-leaf path counted in nodes; group nodes are skipped.
    pub fn max_depth(&self) -> usize {
        fn walk(n: &SceneNode) -> usize {
            let below = n.children.iter().map(walk).max().unwrap_or(0);
            match n.kind {
                NodeKind::Group(_) => below,
                NodeKind::Region(_) => below + 1,
            }
        }
        self.roots.iter().map(walk).max().unwrap_or(0)
    }

    /// Sum of `members` over all region nodes.
    pub fn total_members(&self) -> u64 {
        fn walk(n: &SceneNode) -> u64 {
            let own = n.region().map(|r| r.members as u64).unwrap_or(0);
            own + n.children.iter().map(walk).sum::<u64>()
        }
        self.roots.iter().map(walk).sum()
    }

    /// `(child index, parent index)` for every region node, looking through
    /// group nodes. Indices are [`SceneRegion::index`] values.
    pub fn parent_links(&self) -> Vec<(usize, Option<usize>)> {
        fn walk(n: &SceneNode, parent: Option<usize>, out: &mut Vec<(usize, Option<usize>)>) {
            match &n.kind {
                NodeKind::Region(r) => {
                    out.push((r.index, parent));
                    for c in &n.children {
                        walk(c, Some(r.index), out);
                    }
                }
                NodeKind::Group(_) => {
                    for c in &n.children {
                        walk(c, parent, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, None, &mut out);
        }
        out.sort();
        out
    }

    /// Checks the structural invariants: every child sits inside its parent
    /// region by at least the containment threshold, and siblings are in
    /// canonical order.
    pub fn validate(&self, p: &SceneTreeParams) -> Result<(), String> {
        fn walk(n: &SceneNode, parent: Option<&SceneRegion>, p: &SceneTreeParams) -> Result<(), String> {
            if let (NodeKind::Region(r), Some(q)) = (&n.kind, parent) {
                let c = overlap_stats(r, q).containment_of_a_in_b;
                if c < p.containment_threshold {
                    return Err(format!("`{}` is only {c:.3} inside parent `{}`", r.label, q.label));
                }
            }
            if n.children
                .windows(2)
                .any(|w| cmp_siblings(&w[0], &w[1]) == Ordering::Greater)
            {
                return Err(format!("children of `{}` are not sorted", n.label()));
            }
            let own = match &n.kind {
                NodeKind::Region(r) => Some(r),
                NodeKind::Group(_) => parent,
            };
            n.children.iter().try_for_each(|c| walk(c, own, p))
        }
        if self
            .roots
            .windows(2)
            .any(|w| cmp_siblings(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err("roots are not sorted".into());
        }
        self.roots.iter().try_for_each(|r| walk(r, None, p))
    }
}

/// Builds the containment hierarchy over post-merge regions.
pub fn build_tree(regions: &[SceneRegion], p: &SceneTreeParams) -> SceneTree {
    let parents = assign_parents(regions, p);
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); regions.len()];
    let mut roots = Vec::new();
    for (i, parent) in parents.iter().enumerate() {
        match parent {
            Some(q) => children[*q].push(i),
            None => roots.push(i),
        }
    }
    fn make(i: usize, regions: &[SceneRegion], children: &[Vec<usize>]) -> SceneNode {
        let mut kids: Vec<SceneNode> = children[i].iter().map(|&c| make(c, regions, children)).collect();
        kids.sort_by(cmp_siblings);
        SceneNode {
            kind: NodeKind::Region(regions[i].clone()),
            children: kids,
        }
    }
    let mut roots: Vec<SceneNode> = roots.into_iter().map(|i| make(i, regions, &children)).collect();
    roots.sort_by(cmp_siblings);
    SceneTree { roots }
}

fn group_level(nodes: Vec<SceneNode>, p: &SceneTreeParams) -> Vec<SceneNode> {
    let mut buckets: BTreeMap<String, Vec<SceneNode>> = BTreeMap::new();
    for n in nodes {
        let n = group_node(n, p);
        buckets.entry(n.label().to_string()).or_default().push(n);
    }
    let mut out = Vec::new();
    for (label, mut members) in buckets {
        let all_regions = members.iter().all(|m| m.region().is_some());
        if members.len() < 2 || !all_regions {
            out.extend(members);
            continue;
        }
        members.sort_by(cmp_siblings);
        let regions: Vec<&SceneRegion> = members.iter().filter_map(SceneNode::region).collect();
        let k = regions.len() as f64;
        let depths: Vec<f64> = regions.iter().filter_map(|r| r.depth).collect();
        let info = GroupInfo {
            label,
            count: regions.len(),
            descriptor: CountDescriptor::for_count(regions.len(), p),
            avg_width: regions.iter().map(|r| r.bbox.w).sum::<f64>() / k,
            avg_height: regions.iter().map(|r| r.bbox.h).sum::<f64>() / k,
            center: (
                regions.iter().map(|r| r.center.0).sum::<f64>() / k,
                regions.iter().map(|r| r.center.1).sum::<f64>() / k,
            ),
            depth: (!depths.is_empty()).then(|| depths.iter().sum::<f64>() / depths.len() as f64),
            total_area: regions.iter().map(|r| r.area).sum(),
        };
        out.push(SceneNode {
            kind: NodeKind::Group(info),
            children: members,
        });
    }
    out.sort_by(cmp_siblings);
    out
}

fn group_node(mut n: SceneNode, p: &SceneTreeParams) -> SceneNode {
    match n.kind {
        NodeKind::Region(_) => {
            n.children = group_level(std::mem::take(&mut n.children), p);
            n
        }
        // Members of an existing group are already same-label siblings.
        NodeKind::Group(_) => {
            n.children = n.children.into_iter().map(|c| group_node(c, p)).collect();
            n
        }
    }
}

/// Gathers same-label siblings under group nodes carrying a count
/// descriptor and averaged dimensions, then re-sorts every sibling list.
pub fn group_and_count(tree: SceneTree, p: &SceneTreeParams) -> SceneTree {
    SceneTree {
        roots: group_level(tree.roots, p),
    }
}

fn position_word(center: (f64, f64), image: &ImageRef) -> &'static str {
    let col = ((center.0 / image.width.max(1) as f64) * 3.0).floor().clamp(0.0, 2.0) as usize;
    let row = ((center.1 / image.height.max(1) as f64) * 3.0).floor().clamp(0.0, 2.0) as usize;
    const WORDS: [[&str; 3]; 3] = [
        ["top-left", "top", "top-right"],
        ["left", "center", "right"],
        ["bottom-left", "bottom", "bottom-right"],
    ];
    WORDS[row][col]
}

fn has_detail(n: &SceneNode) -> bool {
    !n.children.is_empty() || n.region().is_some_and(|r| !r.attributes.is_empty())
}

/// Renders the tree as indented text, two spaces per level.
///
/// Region lines carry label, attributes, center, pixel size, depth (when
/// known) and a coarse position word. Group lines carry the count phrase and
/// averaged size; members are listed beneath only when they have attributes
/// or children of their own.
pub fn serialize_tree(tree: &SceneTree, image: &ImageRef) -> String {
    fn line(n: &SceneNode, image: &ImageRef) -> String {
        let mut s = String::new();
        match &n.kind {
            NodeKind::Region(r) => {
                s.push_str(&r.label);
                if !r.attributes.is_empty() {
                    let _ = write!(s, " [{}]", r.attributes.join(", "));
                }
                let _ = write!(
                    s,
                    " center=({}, {}) size={}x{}",
                    r.center.0.round() as i64,
                    r.center.1.round() as i64,
                    r.bbox.w.round() as i64,
                    r.bbox.h.round() as i64
                );
                if let Some(d) = r.depth {
                    let _ = write!(s, " depth={d:.2}");
                }
                let _ = write!(s, " pos={}", position_word(r.center, image));
            }
            NodeKind::Group(g) => {
                let _ = write!(
                    s,
                    "{} center=({}, {}) avg_size={}x{}",
                    g.descriptor.phrase(&g.label),
                    g.center.0.round() as i64,
                    g.center.1.round() as i64,
                    g.avg_width.round() as i64,
                    g.avg_height.round() as i64
                );
                if let Some(d) = g.depth {
                    let _ = write!(s, " depth={d:.2}");
                }
                let _ = write!(s, " pos={}", position_word(g.center, image));
            }
        }
        s
    }
    fn walk(n: &SceneNode, level: usize, image: &ImageRef, out: &mut String) {
        out.push_str(&"  ".repeat(level));
        out.push_str(&line(n, image));
        out.push('\n');
        let collapse = n.group().is_some();
        for c in &n.children {
            if collapse && !has_detail(c) {
                continue;
            }
            walk(c, level + 1, image, out);
        }
    }
    let mut out = String::new();
    for r in &tree.roots {
        walk(r, 0, image, &mut out);
    }
    out
}

/// Full chain from raw boxes to a grouped tree.
pub fn scene_from_boxes(boxes: &[BoxAnnotation], p: &SceneTreeParams) -> SceneTree {
    let regions = regions_from_boxes(boxes);
    let merged = merge_duplicates(&regions, p);
    group_and_count(build_tree(&merged, p), p)
}
