//! Finite graph approximations of the gasket, the circle and the double-cover
//! fractafold, with lumped masses and the resistance metric.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::fit::line_fit;

pub const DEFAULT_VERTEX_CAP: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FractalKind {
    Gasket,
    Circle,
    GasketDoubleCover,
}

impl FractalKind {
    pub fn name(self) -> &'static str {
        match self {
            FractalKind::Gasket => "gasket",
            FractalKind::Circle => "circle",
            FractalKind::GasketDoubleCover => "gasket-double-cover",
        }
    }
}

impl std::str::FromStr for FractalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gasket" => Ok(FractalKind::Gasket),
            "circle" => Ok(FractalKind::Circle),
            "gasket-double-cover" | "double-cover" => Ok(FractalKind::GasketDoubleCover),
            other => invalid(format!("unknown fractal kind '{other}'")),
        }
    }
}

/// A cell of the self-similar structure (an arc for the circle).
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub word: String,
    pub level: usize,
    /// Corner vertices (3 for gasket cells, 2 for arcs).
    pub corners: Vec<usize>,
    /// Every vertex of the graph lying in the closed cell, ascending.
    pub vertices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FractalGraph {
    pub kind: FractalKind,
    /// Gasket level, or vertex count for the circle.
    pub level: usize,
    pub vertices: Vec<String>,
    pub edges: Vec<(usize, usize, f64)>,
    pub boundary: Vec<usize>,
    pub mass: Vec<f64>,
    /// `cells[k]` holds the level-k cells in word order.
    pub cells: Vec<Vec<Cell>>,
    /// Unit conductances and unit masses (unrenormalized graph Laplacian).
    pub plain: bool,
}

pub fn build(kind: FractalKind, level: usize) -> Result<FractalGraph> {
    build_capped(kind, level, DEFAULT_VERTEX_CAP)
}

pub fn build_capped(kind: FractalKind, level: usize, cap: usize) -> Result<FractalGraph> {
    let count = match kind {
        FractalKind::Gasket => gasket_vertex_count(level),
        FractalKind::GasketDoubleCover => gasket_vertex_count(level).map(|n| 2 * n - 3),
        FractalKind::Circle => {
            if level < 3 {
                return invalid("circle needs at least 3 vertices");
            }
            Some(level)
        }
    };
    match count {
        Some(n) if n <= cap => {}
        _ => return invalid(format!("{} level {} exceeds the vertex cap {}", kind.name(), level, cap)),
    }
    Ok(match kind {
        FractalKind::Gasket => gasket(level),
        FractalKind::Circle => circle(level),
        FractalKind::GasketDoubleCover => double_cover(level),
    })
}

/// 3(3^m+1)/2, or None on overflow.
pub fn gasket_vertex_count(level: usize) -> Option<usize> {
    let p = 3usize.checked_pow(level as u32)?;
    Some(3 * (p + 1) / 2)
}

pub fn gasket_edge_count(level: usize) -> usize {
    3usize.pow(level as u32 + 1)
}

const CORNERS: [(i64, i64); 3] = [(0, 0), (1, 0), (0, 1)];

/// Collapse a trailing run of a repeated digit: F_{w i}(q_i) = F_w(q_i).
fn collapse(mut s: Vec<u8>) -> Vec<u8> {
    while s.len() >= 2 && s[s.len() - 1] == s[s.len() - 2] {
        s.pop();
    }
    s
}

fn words(len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * 3);
        for w in &out {
            for d in 0..3u8 {
                let mut v = w.clone();
                v.push(d);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn word_string(w: &[u8]) -> String {
    w.iter().map(|d| (b'0' + d) as char).collect()
}

fn cell_origin(w: &[u8], m: usize) -> (i64, i64) {
    let mut x = 0;
    let mut y = 0;
    for (k, &d) in w.iter().enumerate() {
        let s = 1i64 << (m - k - 1);
        x += CORNERS[d as usize].0 * s;
        y += CORNERS[d as usize].1 * s;
    }
    (x, y)
}

struct RawGasket {
    words: Vec<String>,
    coords: Vec<(i64, i64)>,
    edges: Vec<(usize, usize)>,
    mass: Vec<f64>,
}

fn raw_gasket(m: usize) -> RawGasket {
    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut best: Vec<Vec<u8>> = Vec::new();
    let mut coords = Vec::new();
    let mut mass = Vec::new();
    let mut edges = Vec::new();
    let share = 3f64.powi(-(m as i32)) / 3.0;
    for w in words(m) {
        let (ox, oy) = cell_origin(&w, m);
        let mut ids = [0usize; 3];
        for (i, c) in CORNERS.iter().enumerate() {
            let p = (ox + c.0, oy + c.1);
            let mut addr = w.clone();
            addr.push(i as u8);
            let addr = collapse(addr);
            let id = *index.entry(p).or_insert_with(|| {
                best.push(addr.clone());
                coords.push(p);
                mass.push(0.0);
                best.len() - 1
            });
            if (addr.len(), &addr) < (best[id].len(), &best[id]) {
                best[id] = addr;
            }
            mass[id] += share;
            ids[i] = id;
        }
        edges.push((ids[0], ids[1]));
        edges.push((ids[0], ids[2]));
        edges.push((ids[1], ids[2]));
    }
    RawGasket { words: best.iter().map(|w| word_string(w)).collect(), coords, edges, mass }
}

fn sorted_order(words: &[String]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.sort_by(|&a, &b| words[a].cmp(&words[b]));
    let mut rank = vec![0; words.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    (order, rank)
}

fn normalized_edge(a: usize, b: usize, c: f64) -> (usize, usize, f64) {
    if a < b {
        (a, b, c)
    } else {
        (b, a, c)
    }
}

/// Cells of every level 0..=m, with vertex membership from lattice coordinates.
fn gasket_cells(m: usize, coords: &[(i64, i64)], prefix: &str, lookup: &dyn Fn(usize) -> usize) -> Vec<Vec<Cell>> {
    let by_coord: HashMap<(i64, i64), usize> = coords.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut out = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let side = 1i64 << (m - k);
        let mut level_cells = Vec::new();
        for w in words(k) {
            let o = cell_origin(&w, m);
            let corners = CORNERS
                .iter()
                .map(|c| lookup(by_coord[&(o.0 + c.0 * side, o.1 + c.1 * side)]))
                .collect();
            let mut verts: Vec<usize> = coords
                .iter()
                .enumerate()
                .filter(|(_, &(x, y))| {
                    let (dx, dy) = (x - o.0, y - o.1);
                    dx >= 0 && dy >= 0 && dx + dy <= side
                })
                .map(|(i, _)| lookup(i))
                .collect();
            verts.sort_unstable();
            level_cells.push(Cell { word: format!("{prefix}{}", word_string(&w)), level: k, corners, vertices: verts });
        }
        out.push(level_cells);
    }
    out
}

fn gasket(m: usize) -> FractalGraph {
    let raw = raw_gasket(m);
    let (order, rank) = sorted_order(&raw.words);
    let cond = (5.0f64 / 3.0).powi(m as i32);
    let mut edges: Vec<_> = raw.edges.iter().map(|&(a, b)| normalized_edge(rank[a], rank[b], cond)).collect();
    edges.sort_by_key(|a| (a.0, a.1));
    let vertices: Vec<String> = order.iter().map(|&i| raw.words[i].clone()).collect();
    let mass = order.iter().map(|&i| raw.mass[i]).collect();
    let boundary = ["0", "1", "2"].iter().map(|b| vertices.iter().position(|v| v == b).unwrap()).collect();
    let cells = gasket_cells(m, &raw.coords, "", &|i| rank[i]);
    FractalGraph { kind: FractalKind::Gasket, level: m, vertices, edges, boundary, mass, cells, plain: false }
}

fn double_cover(m: usize) -> FractalGraph {
    let raw = raw_gasket(m);
    let n = raw.words.len();
    let is_boundary = |w: &str| w.len() == 1;
    // Combined vertex list: boundary words shared, others prefixed by copy.
    let mut words_all: Vec<String> = Vec::new();
    let mut map = [vec![0usize; n], vec![0usize; n]];
    for i in 0..n {
        if is_boundary(&raw.words[i]) {
            map[0][i] = words_all.len();
            map[1][i] = words_all.len();
            words_all.push(raw.words[i].clone());
        }
    }
    for (c, prefix) in ["a", "b"].iter().enumerate() {
        for i in 0..n {
            if !is_boundary(&raw.words[i]) {
                map[c][i] = words_all.len();
                words_all.push(format!("{prefix}{}", raw.words[i]));
            }
        }
    }
    let (order, rank) = sorted_order(&words_all);
    let cond = (5.0f64 / 3.0).powi(m as i32);
    let mut mass_all = vec![0.0; words_all.len()];
    let mut edges = Vec::new();
    for c in 0..2 {
        for i in 0..n {
            mass_all[map[c][i]] += raw.mass[i] / 2.0;
        }
        for &(a, b) in &raw.edges {
            edges.push(normalized_edge(rank[map[c][a]], rank[map[c][b]], cond));
        }
    }
    edges.sort_by_key(|a| (a.0, a.1));
    let vertices: Vec<String> = order.iter().map(|&i| words_all[i].clone()).collect();
    let mass = order.iter().map(|&i| mass_all[i]).collect();
    let mut cells: Vec<Vec<Cell>> = vec![Vec::new(); m + 1];
    for (c, prefix) in ["a", "b"].iter().enumerate() {
        let copy_cells = gasket_cells(m, &raw.coords, prefix, &|i| rank[map[c][i]]);
        for (k, lc) in copy_cells.into_iter().enumerate() {
            cells[k].extend(lc);
        }
    }
    FractalGraph {
        kind: FractalKind::GasketDoubleCover,
        level: m,
        vertices,
        edges,
        boundary: Vec::new(),
        mass,
        cells,
        plain: false,
    }
}

fn circle(n: usize) -> FractalGraph {
    let width = n.to_string().len();
    let vertices = (0..n).map(|i| format!("{i:0width$}")).collect();
    let mut edges: Vec<_> = (0..n).map(|i| normalized_edge(i, (i + 1) % n, n as f64)).collect();
    edges.sort_by_key(|a| (a.0, a.1));
    let mut cells = Vec::new();
    let mut k = 0;
    while n >> k >= 2 {
        let parts = 1usize << k;
        let arcs = (0..parts)
            .map(|j| {
                let a = j * n / parts;
                let b = (j + 1) * n / parts;
                let mut verts: Vec<usize> = (a..=b).map(|i| i % n).collect();
                verts.sort_unstable();
                verts.dedup();
                let word = if k == 0 { String::new() } else { format!("{j:0k$b}") };
                Cell { word, level: k, corners: vec![a % n, b % n], vertices: verts }
            })
            .collect();
        cells.push(arcs);
        k += 1;
    }
    FractalGraph {
        kind: FractalKind::Circle,
        level: n,
        vertices,
        edges,
        boundary: Vec::new(),
        mass: vec![1.0 / n as f64; n],
        cells,
        plain: false,
    }
}

impl FractalGraph {
    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    /// Same combinatorics with unit conductances and unit masses.
    pub fn to_plain(&self) -> FractalGraph {
        let mut g = self.clone();
        for e in &mut g.edges {
            e.2 = 1.0;
        }
        g.mass = vec![1.0; g.n()];
        g.plain = true;
        g
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.vertices.binary_search_by(|v| v.as_str().cmp(word)).ok()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary.contains(&v)
    }

    pub fn interior(&self) -> Vec<usize> {
        (0..self.n()).filter(|v| !self.is_boundary(*v)).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Energy (weighted graph Laplacian) matrix: E(u,u) = Σ c (u_i - u_j)^2.
    pub fn energy_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut e = DMatrix::zeros(n, n);
        for &(a, b, c) in &self.edges {
            e[(a, a)] += c;
            e[(b, b)] += c;
            e[(a, b)] -= c;
            e[(b, a)] -= c;
        }
        e
    }

    pub fn energy(&self, u: &[f64]) -> f64 {
        self.edges.iter().map(|&(a, b, c)| c * (u[a] - u[b]).powi(2)).sum()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n()];
        for &(a, b, _) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.neighbors();
        let mut seen = vec![false; self.n()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.iter().all(|s| *s)
    }

    /// Discrete Laplacian -Δu = M^{-1} E u (positive operator).
    pub fn neg_laplacian(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for &(a, b, c) in &self.edges {
            let d = c * (u[a] - u[b]);
            out[a] += d;
            out[b] -= d;
        }
        for (o, m) in out.iter_mut().zip(&self.mass) {
            *o /= m;
        }
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "kind": self.kind.name(),
            "level": self.level,
            "vertices": self.vertices,
            "edges": self.edges.iter().map(|&(a, b, c)| json!([a, b, c])).collect::<Vec<_>>(),
            "boundary": self.boundary,
            "mass": self.mass,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("graph serializes")
    }

    /// Parse the JSON form. The cell structure is regenerated from (kind, level)
    /// and the vertex list must match it.
    pub fn from_json(v: &Value) -> Result<FractalGraph> {
        let kind: FractalKind = v["kind"].as_str().ok_or_else(|| Error::Parse("kind".into()))?.parse()?;
        let level = v["level"].as_u64().ok_or_else(|| Error::Parse("level".into()))? as usize;
        let mut g = build(kind, level)?;
        let vertices: Vec<String> = serde_json::from_value(v["vertices"].clone())?;
        if vertices != g.vertices {
            return Err(Error::Parse("vertex list does not match the construction".into()));
        }
        let edges: Vec<(usize, usize, f64)> = serde_json::from_value(v["edges"].clone())?;
        let mass: Vec<f64> = serde_json::from_value(v["mass"].clone())?;
        let boundary: Vec<usize> = serde_json::from_value(v["boundary"].clone())?;
        if edges.len() != g.edges.len() || mass.len() != g.n() || boundary != g.boundary {
            return Err(Error::Parse("graph fields inconsistent with construction".into()));
        }
        g.plain = edges.iter().all(|e| e.2 == 1.0) && mass.iter().all(|m| *m == 1.0);
        g.edges = edges;
        g.mass = mass;
        Ok(g)
    }

    /// sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        crate::provenance::sha256_hex(self.to_json_string().as_bytes())
    }

    pub fn finest_cells(&self) -> &[Cell] {
        self.cells.last().map(|c| c.as_slice()).unwrap_or(&[])
    }
}

/// Effective resistance by the Laplace solve u(x)=0, u(y)=1, R = 1/E(u).
pub fn resistance(g: &FractalGraph, x: usize, y: usize) -> Result<f64> {
    if x >= g.n() || y >= g.n() {
        return invalid("vertex index out of range");
    }
    if x == y {
        return Ok(0.0);
    }
    let e = g.energy_matrix();
    let free: Vec<usize> = (0..g.n()).filter(|&v| v != x && v != y).collect();
    let k = free.len();
    let mut u = vec![0.0; g.n()];
    u[y] = 1.0;
    if k > 0 {
        let a = DMatrix::from_fn(k, k, |i, j| e[(free[i], free[j])]);
        let rhs = DVector::from_fn(k, |i, _| -e[(free[i], y)]);
        let sol = a
            .cholesky()
            .ok_or_else(|| Error::Singular("Laplace system not positive definite; graph disconnected".into()))?
            .solve(&rhs);
        for (i, &v) in free.iter().enumerate() {
            u[v] = sol[i];
        }
    }
    let en = g.energy(&u);
    if en <= 0.0 {
        return Err(Error::Singular("zero energy; graph disconnected".into()));
    }
    Ok(1.0 / en)
}

/// All-pairs resistance from the Green matrix grounded at vertex 0:
/// R(x,y) = G(x,x) + G(y,y) - 2 G(x,y).
#[derive(Clone, Debug)]
pub struct ResistanceMetric {
    pub r: DMatrix<f64>,
}

impl ResistanceMetric {
    pub fn new(g: &FractalGraph) -> Result<Self> {
        let n = g.n();
        let e = g.energy_matrix();
        let reduced = e.view((1, 1), (n - 1, n - 1)).into_owned();
        let chol = reduced
            .cholesky()
            .ok_or_else(|| Error::Singular("grounded Laplacian not positive definite; graph disconnected".into()))?;
        let inv = chol.inverse();
        let gm = |i: usize, j: usize| if i == 0 || j == 0 { 0.0 } else { inv[(i - 1, j - 1)] };
        let mut r = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (gm(i, i) + gm(j, j) - 2.0 * gm(i, j)).max(0.0);
                r[(i, j)] = v;
                r[(j, i)] = v;
            }
        }
        Ok(ResistanceMetric { r })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.r[(x, y)]
    }

    pub fn diameter(&self) -> f64 {
        self.r.max()
    }

    /// Largest resistance diameter among the finest cells.
    pub fn finest_cell_diameter(&self, g: &FractalGraph) -> f64 {
        g.finest_cells().iter().map(|c| self.cell_diameter(c)).fold(0.0, f64::max)
    }

    pub fn cell_diameter(&self, c: &Cell) -> f64 {
        let mut d: f64 = 0.0;
        for (i, &a) in c.corners.iter().enumerate() {
            for &b in &c.corners[i + 1..] {
                d = d.max(self.get(a, b));
            }
        }
        d
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DimensionFit {
    pub d: f64,
    /// (cell level, cell count, mean intrinsic resistance diameter)
    pub points: Vec<(usize, usize, f64)>,
    /// Same box count with diameters in the global metric, two finest non-edge levels.
    pub global_d: Option<f64>,
}

/// Resistance diameter of a cell measured inside the cell's own sub-network
/// (edges with both ends in the cell), maximized over corner pairs.
pub fn intrinsic_cell_diameter(g: &FractalGraph, cell: &Cell) -> Result<f64> {
    let mut local = vec![usize::MAX; g.n()];
    for (i, &v) in cell.vertices.iter().enumerate() {
        local[v] = i;
    }
    let s = cell.vertices.len();
    let mut e = DMatrix::zeros(s, s);
    for &(a, b, c) in &g.edges {
        let (la, lb) = (local[a], local[b]);
        if la != usize::MAX && lb != usize::MAX {
            e[(la, la)] += c;
            e[(lb, lb)] += c;
            e[(la, lb)] -= c;
            e[(lb, la)] -= c;
        }
    }
    let ground = local[cell.corners[0]];
    let keep: Vec<usize> = (0..s).filter(|&i| i != ground).collect();
    let reduced = DMatrix::from_fn(s - 1, s - 1, |i, j| e[(keep[i], keep[j])]);
    let inv = reduced
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("cell {} sub-network disconnected", cell.word)))?
        .inverse();
    let pos = |v: usize| keep.iter().position(|&k| k == local[v]);
    let gm = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(i), Some(j)) => inv[(i, j)],
        _ => 0.0,
    };
    let mut d: f64 = 0.0;
    for (i, &a) in cell.corners.iter().enumerate() {
        for &b in &cell.corners[i + 1..] {
            let (pa, pb) = (pos(a), pos(b));
            d = d.max(gm(pa, pa) + gm(pb, pb) - 2.0 * gm(pa, pb));
        }
    }
    Ok(d)
}

/// Box-counting dimension in the resistance metric: slope of log(#cells)
/// against -log(mean cell diameter) over cell levels 1..=finest.
pub fn resistance_dimension(g: &FractalGraph, metric: &ResistanceMetric) -> Result<DimensionFit> {
    let top = g.cells.len();
    let mut points = Vec::new();
    for k in 1..top {
        let cells = &g.cells[k];
        let mut sum = 0.0;
        for c in cells {
            sum += intrinsic_cell_diameter(g, c)?;
        }
        points.push((k, cells.len(), sum / cells.len() as f64));
    }
    if points.len() < 2 {
        return Err(Error::Fit("need at least two cell levels for the dimension fit".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| -p.2.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.1 as f64).ln()).collect();
    let f = line_fit(&xs, &ys).ok_or_else(|| Error::Fit("degenerate dimension fit".into()))?;
    let global_d = if top >= 4 {
        let pair: Vec<(f64, f64)> = [top - 3, top - 2]
            .iter()
            .map(|&k| {
                let cells = &g.cells[k];
                let mean = cells.iter().map(|c| metric.cell_diameter(c)).sum::<f64>() / cells.len() as f64;
                (cells.len() as f64, mean)
            })
            .collect();
        Some((pair[1].0 / pair[0].0).ln() / (pair[0].1 / pair[1].1).ln())
    } else {
        None
    };
    Ok(DimensionFit { d: f.slope, points, global_d })
}

#[derive(Clone, Debug, Serialize)]
pub struct DoublingSample {
    pub x: usize,
    pub r: f64,
    pub ratio: f64,
    /// B(x,r) holds only x itself: below vertex resolution, excluded from the max.
    pub unresolved: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DoublingReport {
    pub max_ratio: f64,
    pub samples: Vec<DoublingSample>,
}

fn ball_mass(g: &FractalGraph, metric: &ResistanceMetric, x: usize, r: f64) -> (f64, usize) {
    let mut m = 0.0;
    let mut count = 0;
    for y in 0..g.n() {
        if metric.get(x, y) <= r {
            m += g.mass[y];
            count += 1;
        }
    }
    (m, count)
}

/// Ratios μ(B(x,2r))/μ(B(x,r)) at seeded random centres.
pub fn doubling_report(
    g: &FractalGraph,
    metric: &ResistanceMetric,
    sample_count: usize,
    radii: &[f64],
    seed: u64,
) -> Result<DoublingReport> {
    if radii.iter().any(|r| *r <= 0.0) {
        return invalid("radii must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..sample_count {
        let x = rng.gen_range(0..g.n());
        for &r in radii {
            let (m1, c1) = ball_mass(g, metric, x, r);
            let (m2, _) = ball_mass(g, metric, x, 2.0 * r);
            let ratio = m2 / m1;
            let unresolved = c1 <= 1;
            if !unresolved {
                max_ratio = max_ratio.max(ratio);
            }
            samples.push(DoublingSample { x, r, ratio, unresolved });
        }
    }
    Ok(DoublingReport { max_ratio, samples })
}
