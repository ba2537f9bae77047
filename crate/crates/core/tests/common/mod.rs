#![allow(dead_code)]

use adaptnet::mesh::{Lineage, Mesh, Point};
use adaptnet::stochastic_greedy::NcMesh;

type Leaf = ([Point; 3], Lineage);

fn trees(leaf: Leaf, depth: u32) -> Vec<Vec<Leaf>> {
    let mut out = vec![vec![leaf]];
    if depth == 0 {
        return out;
    }
    let ([a, b, c], l) = leaf;
    let m = [(b[0] + c[0]) / 2.0, (b[1] + c[1]) / 2.0];
    let left = trees(([m, a, b], l.child(0)), depth - 1);
    let right = trees(([m, c, a], l.child(1)), depth - 1);
    for x in &left {
        for y in &right {
            out.push(x.iter().chain(y).copied().collect());
        }
    }
    out
}

/// Every bisection forest over `mesh` whose leaves are at most `depth` levels deep.
pub fn all_forests(mesh: &Mesh, depth: u32) -> Vec<NcMesh> {
    let mut acc: Vec<Vec<Leaf>> = vec![vec![]];
    for t in 0..mesh.n_elements() {
        let opts = trees((mesh.coords(t), mesh.elements()[t].lineage), depth);
        acc = acc.iter().flat_map(|a| opts.iter().map(move |o| a.iter().chain(o).copied().collect())).collect();
    }
    acc.into_iter().map(|leaves| NcMesh { leaves }).collect()
}

/// Least-squares slope of log10(y) against log10(x).
pub fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(x, y)| (x.log10(), y.log10())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
