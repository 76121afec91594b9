//! Learned grid layout export.
//!
//! Each cell is attributed to its dominant joint: the largest entry of its
//! row in the product of the absolute values of every transform factor.
//! Two joints are linked when their dominant cells touch (4-neighborhood),
//! weighted by the number of touching cell pairs. This is a derived
//! visualization, not a quantity the model optimizes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Scalar;
use crate::transform::GridSize;

pub const LAYOUT_NOTE: &str = "derived visualization: dominant joint per cell from absolute composed transform weights; edges join joints whose dominant cells are 4-adjacent";

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub grid: GridSize,
    /// Dominant joint of every cell, row-major.
    pub cells: Vec<usize>,
    /// Induced edges `(i, j)` with `i < j` and their touching-pair counts.
    pub edges: BTreeMap<(usize, usize), usize>,
}

impl Layout {
    /// Layout from a `(HW, N)` composed weight matrix.
    pub fn from_weights<T: Scalar>(grid: GridSize, weights: &crate::tensor::Tensor<T>) -> Result<Self> {
        let [rows, n] = weights.as_matrix()?;
        if rows != grid.cells() || n == 0 {
            return Err(Error::dim(format!("{rows}×{n} weights do not describe a {grid} grid")));
        }
        let cells: Vec<usize> = weights
            .data()
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let mut edges = BTreeMap::new();
        for r in 0..grid.h {
            for c in 0..grid.w {
                let a = cells[r * grid.w + c];
                let mut link = |b: usize| {
                    if a != b {
                        *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                    }
                };
                if c + 1 < grid.w {
                    link(cells[r * grid.w + c + 1]);
                }
                if r + 1 < grid.h {
                    link(cells[(r + 1) * grid.w + c]);
                }
            }
        }
        Ok(Layout { grid, cells, edges })
    }

    /// Layout of a model's full cascade.
    pub fn from_model<T: Scalar>(model: &mut Model<T>) -> Result<Self> {
        let adjacency = model.adjacency().cloned();
        let cascade = model.cascade.as_mut().ok_or_else(|| Error::Load("model has no transform cascade".into()))?;
        let grid = cascade.final_grid().ok_or_else(|| Error::Load("cascade has no stages".into()))?;
        let w = cascade.composed_matrix(adjacency.as_ref(), true)?;
        Self::from_weights(grid, &w)
    }

    /// `row,col,joint,name`, one data row per cell after a comment line.
    pub fn to_csv(&self, graph: &SkeletonGraph) -> String {
        let mut s = format!("# {LAYOUT_NOTE}\nrow,col,joint,name\n");
        for (i, &j) in self.cells.iter().enumerate() {
            let (r, c) = self.grid.cell(i);
            let _ = writeln!(s, "{r},{c},{j},{}", graph.joint_name(j));
        }
        s
    }

    /// Skeleton bones (dashed) overlaid with the induced edges.
    pub fn to_dot(&self, graph: &SkeletonGraph) -> String {
        let mut s = format!("// {LAYOUT_NOTE}\ngraph layout {{\n  node [shape=circle];\n");
        for j in 0..graph.n_joints() {
            let _ = writeln!(s, "  j{j} [label=\"{}\"];", graph.joint_name(j));
        }
        for &(a, b) in graph.edges() {
            let _ = writeln!(s, "  j{a} -- j{b} [style=dashed, color=gray];");
        }
        for (&(a, b), &w) in &self.edges {
            let _ = writeln!(s, "  j{a} -- j{b} [color=blue, penwidth={w}, label=\"{w}\"];");
        }
        s.push_str("}\n");
        s
    }

    /// The cell map on the left, the skeleton with induced edges on the right.
    pub fn to_svg(&self, graph: &SkeletonGraph) -> String {
        const CELL: f64 = 40.0;
        let n = graph.n_joints();
        let grid_w = self.grid.w as f64 * CELL;
        let grid_h = self.grid.h as f64 * CELL;
        let radius = 140.0;
        let (cx, cy) = (grid_w + 40.0 + radius + 20.0, radius + 30.0);
        let width = cx + radius + 40.0;
        let height = grid_h.max(2.0 * radius + 60.0) + 20.0;
        let pos = |j: usize| {
            let a = std::f64::consts::TAU * j as f64 / n as f64;
            (cx + radius * a.cos(), cy + radius * a.sin())
        };
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n<!-- {LAYOUT_NOTE} -->\n"
        );
        for (i, &j) in self.cells.iter().enumerate() {
            let (r, c) = self.grid.cell(i);
            let hue = 360.0 * j as f64 / n as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"hsl({hue:.0},60%,75%)\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{j}</text>",
                c as f64 * CELL,
                r as f64 * CELL,
                c as f64 * CELL + CELL / 2.0,
                r as f64 * CELL + CELL / 2.0 + 4.0
            );
        }
        for &(a, b) in graph.edges() {
            let ((x1, y1), (x2, y2)) = (pos(a), pos(b));
            let _ = writeln!(
                s,
                "<line x1=\"{x1:.1}\" y1=\"{y1:.1}\" x2=\"{x2:.1}\" y2=\"{y2:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>"
            );
        }
        for (&(a, b), &w) in &self.edges {
            let ((x1, y1), (x2, y2)) = (pos(a), pos(b));
            let _ = writeln!(
                s,
                "<line x1=\"{x1:.1}\" y1=\"{y1:.1}\" x2=\"{x2:.1}\" y2=\"{y2:.1}\" stroke=\"steelblue\" stroke-width=\"{w}\" stroke-opacity=\"0.7\"/>"
            );
        }
        for j in 0..n {
            let (x, y) = pos(j);
            let hue = 360.0 * j as f64 / n as f64;
            let _ = writeln!(
                s,
                "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"10\" fill=\"hsl({hue:.0},60%,75%)\" stroke=\"black\"/><text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{j}</text>",
                y + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_weights_map_cell_to_joint() {
        let grid = GridSize::new(3, 3);
        let l = Layout::from_weights(grid, &Tensor::<f64>::eye(9)).unwrap();
        assert_eq!(l.cells, (0..9).collect::<Vec<_>>());
        // 3×3 grid has 12 adjacent pairs, all between distinct joints.
        assert_eq!(l.edges.values().sum::<usize>(), 12);
        assert!(l.edges.contains_key(&(0, 3)) && !l.edges.contains_key(&(0, 4)));
    }

    #[test]
    fn repeated_joints_do_not_self_link() {
        let w = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let l = Layout::from_weights(GridSize::new(2, 2), &w).unwrap();
        assert_eq!(l.cells, vec![0, 0, 1, 1]);
        assert_eq!(l.edges.into_iter().collect::<Vec<_>>(), vec![((0, 1), 2)]);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let g = SkeletonGraph::builtin("star9").unwrap();
        let l = Layout::from_weights(GridSize::new(3, 3), &Tensor::<f64>::eye(9)).unwrap();
        let csv = l.to_csv(&g);
        assert!(csv.starts_with("# derived visualization"));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 9);
        assert!(l.to_dot(&g).contains("j0 -- j3"));
        assert!(l.to_svg(&g).ends_with("</svg>\n"));
    }
}
