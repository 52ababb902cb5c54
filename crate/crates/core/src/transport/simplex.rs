//! Network-simplex specialization for the dense transportation problem.
//!
//! Minimizes sum_{ij} f_ij c_ij subject to row sums = supply and column sums
//! = demand, f >= 0. The basis is a spanning tree over the bipartite node
//! set; entering arcs come from a cyclic block search (most-negative reduced
//! cost within a block), with a fallback to Bland's rule if the pivot count
//! suggests stalling. Termination is certified by a vanishing duality gap.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Cell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Solves the transportation problem, returning the optimal value and the
/// dense flow matrix. Supplies and demands must balance (both sum to one for
/// probability marginals).
pub(crate) fn solve_transportation(
    supply: &[f64],
    demand: &[f64],
    costs: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    let n = supply.len();
    let m = demand.len();
    assert_eq!(costs.nrows(), n);
    assert_eq!(costs.ncols(), m);
    if n == 0 || m == 0 {
        return Err(Error::EmptySupport);
    }

    let cost_scale = 1.0 + costs.amax();
    let enter_tol = 1e-11 * cost_scale;

    let mut basis = northwest_corner(supply, demand);
    debug_assert_eq!(basis.len(), n + m - 1);

    // Scratch reused across pivots.
    let mut potentials = vec![0.0f64; n + m];
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];
    let mut parent_node = vec![usize::MAX; n + m];
    let mut parent_edge = vec![usize::MAX; n + m];
    let mut bfs_queue = Vec::with_capacity(n + m);

    let dantzig_cap = 20 * n * m + 500;
    let bland_cap = 200 * n * m + 20_000;
    let mut pivots = 0usize;
    let mut bland = false;

    // Block search: most-negative reduced cost within a block of arcs,
    // scanned cyclically from where the previous pivot stopped. A full
    // wrap without an improving arc proves optimality.
    let arcs = n * m;
    let block = ((arcs as f64).sqrt() as usize).max(64).min(arcs);
    let mut cursor = 0usize;

    loop {
        compute_potentials(
            &basis,
            costs,
            n,
            m,
            &mut potentials,
            &mut adjacency,
            &mut bfs_queue,
        );

        // Entering arc.
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -enter_tol;
        if bland {
            // Lowest-index improving arc (anti-cycling).
            'scan: for i in 0..n {
                for j in 0..m {
                    let reduced = costs[(i, j)] - potentials[i] - potentials[n + j];
                    if reduced < best {
                        entering = Some((i, j));
                        break 'scan;
                    }
                }
            }
        } else {
            let mut seen = 0usize;
            while seen < arcs {
                let stop = block.min(arcs - seen);
                for _ in 0..stop {
                    let (i, j) = (cursor / m, cursor % m);
                    let reduced = costs[(i, j)] - potentials[i] - potentials[n + j];
                    if reduced < best {
                        entering = Some((i, j));
                        best = reduced;
                    }
                    cursor += 1;
                    if cursor == arcs {
                        cursor = 0;
                    }
                }
                seen += stop;
                if entering.is_some() {
                    break;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            break;
        };

        pivots += 1;
        if !bland && pivots > dantzig_cap {
            bland = true;
        }
        if pivots > bland_cap {
            return Err(Error::NumericalFailure(format!(
                "transportation simplex exceeded {bland_cap} pivots"
            )));
        }

        // Unique tree path from row node ei to column node n + ej; together
        // with the entering arc it closes the pivot cycle.
        let path = tree_path(&adjacency, ei, n + ej, &mut parent_node, &mut parent_edge);

        // Signs alternate along the path starting with - on the edge leaving
        // the entering row. Theta is the minimum flow on the - edges.
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for (pos, &edge) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let f = basis[edge].flow;
                let better = if bland {
                    // Lowest (row, col) index among ties.
                    f < theta - 1e-15
                        || (f <= theta + 1e-15
                            && leaving.is_some_and(|l| {
                                (basis[edge].row, basis[edge].col) < (basis[l].row, basis[l].col)
                            }))
                } else {
                    // Last minimal edge on the cycle walk.
                    f <= theta
                };
                if better {
                    theta = f.min(theta);
                    leaving = Some(edge);
                }
            }
        }
        let leaving = leaving.expect("cycle has at least one backward edge");

        for (pos, &edge) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis[edge].flow -= theta;
                if basis[edge].flow < 0.0 {
                    basis[edge].flow = 0.0;
                }
            } else {
                basis[edge].flow += theta;
            }
        }
        basis[leaving] = Cell {
            row: ei,
            col: ej,
            flow: theta,
        };
    }

    let mut flow = DMatrix::zeros(n, m);
    let mut value = 0.0;
    for cell in &basis {
        flow[(cell.row, cell.col)] += cell.flow;
        value += cell.flow * costs[(cell.row, cell.col)];
    }

    // Strong duality certifies the optimum: at termination the potentials
    // are dual feasible, so the primal-dual gap must vanish.
    let dual: f64 = supply
        .iter()
        .enumerate()
        .map(|(i, w)| w * potentials[i])
        .chain(
            demand
                .iter()
                .enumerate()
                .map(|(j, w)| w * potentials[n + j]),
        )
        .sum();
    if (value - dual).abs() > 1e-8 * cost_scale {
        return Err(Error::NumericalFailure(format!(
            "transportation duality gap {} exceeds tolerance",
            (value - dual).abs()
        )));
    }
    Ok((value, flow))
}

/// Initial basic feasible solution with exactly n + m - 1 cells forming a
/// spanning tree (degenerate zero-flow cells included).
fn northwest_corner(supply: &[f64], demand: &[f64]) -> Vec<Cell> {
    let n = supply.len();
    let m = demand.len();
    let mut a = supply.to_vec();
    let mut b = demand.to_vec();
    let mut cells = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let q = a[i].min(b[j]);
        cells.push(Cell {
            row: i,
            col: j,
            flow: q,
        });
        a[i] -= q;
        b[j] -= q;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if a[i] <= 0.0 && i < n - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    cells
}

/// Node potentials from the basis tree: u_i + v_j = c_ij on basic cells,
/// anchored at u_0 = 0.
fn compute_potentials(
    basis: &[Cell],
    costs: &DMatrix<f64>,
    n: usize,
    m: usize,
    potentials: &mut [f64],
    adjacency: &mut [Vec<(usize, usize)>],
    queue: &mut Vec<usize>,
) {
    for adj in adjacency.iter_mut() {
        adj.clear();
    }
    for (idx, cell) in basis.iter().enumerate() {
        adjacency[cell.row].push((n + cell.col, idx));
        adjacency[n + cell.col].push((cell.row, idx));
    }
    let mut seen = vec![false; n + m];
    potentials[0] = 0.0;
    seen[0] = true;
    queue.clear();
    queue.push(0);
    let mut head = 0;
    while head < queue.len() {
        let node = queue[head];
        head += 1;
        for &(next, edge) in &adjacency[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            let cell = &basis[edge];
            let c = costs[(cell.row, cell.col)];
            potentials[next] = if next >= n {
                c - potentials[cell.row]
            } else {
                c - potentials[n + cell.col]
            };
            queue.push(next);
        }
    }
    debug_assert!(seen.iter().all(|&s| s), "basis must span all nodes");
}

/// Edge indices along the unique tree path from `from` to `to`.
fn tree_path(
    adjacency: &[Vec<(usize, usize)>],
    from: usize,
    to: usize,
    parent_node: &mut [usize],
    parent_edge: &mut [usize],
) -> Vec<usize> {
    for p in parent_node.iter_mut() {
        *p = usize::MAX;
    }
    parent_node[from] = from;
    let mut queue = vec![from];
    let mut head = 0;
    while head < queue.len() {
        let node = queue[head];
        head += 1;
        if node == to {
            break;
        }
        for &(next, edge) in &adjacency[node] {
            if parent_node[next] == usize::MAX {
                parent_node[next] = node;
                parent_edge[next] = edge;
                queue.push(next);
            }
        }
    }
    debug_assert_ne!(parent_node[to], usize::MAX, "tree must connect endpoints");
    let mut path = Vec::new();
    let mut node = to;
    while node != from {
        path.push(parent_edge[node]);
        node = parent_node[node];
    }
    path.reverse();
    path
}
