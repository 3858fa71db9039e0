//! Coarse occupancy grid: flood fill and shortest paths on the known map.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::world::WorldSpec;

/// Occupancy grid at fixed resolution over the room, with geometry inflated
/// by a configurable radius so cell freedom means the robot disk fits.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub res: f32,
    pub nx: usize,
    pub ny: usize,
    occ: Vec<bool>,
}

/// Grid resolution in meters.
pub const GRID_RES: f32 = 0.1;

impl OccupancyGrid {
    /// Rasterizes the world at [`GRID_RES`], marking cells whose center lies
    /// within `inflation` meters of any obstacle, landmark, or wall.
    pub fn build(world: &WorldSpec, inflation: f32) -> Self {
        let nx = (world.width / GRID_RES).round() as usize;
        let ny = (world.height / GRID_RES).round() as usize;
        let mut occ = vec![false; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                let x = (ix as f32 + 0.5) * GRID_RES;
                let y = (iy as f32 + 0.5) * GRID_RES;
                let near_wall = x < inflation
                    || y < inflation
                    || x > world.width - inflation
                    || y > world.height - inflation;
                let in_box = world.obstacles.iter().any(|o| {
                    (x - o.cx).abs() < o.hw + inflation && (y - o.cy).abs() < o.hh + inflation
                });
                let in_disk = world.landmarks.iter().any(|l| (x - l.x).hypot(y - l.y) < l.r + inflation);
                occ[iy * nx + ix] = near_wall || in_box || in_disk;
            }
        }
        Self { res: GRID_RES, nx, ny, occ }
    }

    pub fn is_free_cell(&self, ix: usize, iy: usize) -> bool {
        ix < self.nx && iy < self.ny && !self.occ[iy * self.nx + ix]
    }

    pub fn cell_of(&self, x: f32, y: f32) -> Option<(usize, usize)> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let ix = (x / self.res) as usize;
        let iy = (y / self.res) as usize;
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f32, f32) {
        ((ix as f32 + 0.5) * self.res, (iy as f32 + 0.5) * self.res)
    }

    pub fn is_free_at(&self, x: f32, y: f32) -> bool {
        self.cell_of(x, y).map(|(ix, iy)| self.is_free_cell(ix, iy)).unwrap_or(false)
    }

    /// Number of 4-connected components of free cells.
    pub fn free_component_count(&self) -> usize {
        let mut label = vec![0u32; self.nx * self.ny];
        let mut next = 0u32;
        let mut queue = Vec::new();
        for start in 0..self.occ.len() {
            if self.occ[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            label[start] = next;
            queue.push(start);
            while let Some(idx) = queue.pop() {
                let (ix, iy) = (idx % self.nx, idx / self.nx);
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                    if jx < 0 || jy < 0 || jx >= self.nx as i64 || jy >= self.ny as i64 {
                        continue;
                    }
                    let j = jy as usize * self.nx + jx as usize;
                    if !self.occ[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push(j);
                    }
                }
            }
        }
        next as usize
    }

    /// Whether free cells containing both points exist and are connected.
    pub fn reachable(&self, from: (f32, f32), to: (f32, f32)) -> bool {
        self.shortest_path_len(from, to).is_some()
    }

    /// Center of the free cell nearest to `(x, y)`, searched in expanding
    /// rings. The robot can legitimately stand slightly inside the grid's
    /// inflation margin, so planners snap to this before querying paths.
    pub fn nearest_free(&self, x: f32, y: f32) -> Option<(f32, f32)> {
        let (cx, cy) = self.cell_of(x.clamp(0.0, (self.nx as f32 - 0.5) * self.res), y.clamp(0.0, (self.ny as f32 - 0.5) * self.res))?;
        if self.is_free_cell(cx, cy) {
            return Some(self.cell_center(cx, cy));
        }
        for ring in 1..self.nx.max(self.ny) {
            let mut best: Option<(f32, (usize, usize))> = None;
            for dy in -(ring as i64)..=ring as i64 {
                for dx in -(ring as i64)..=ring as i64 {
                    if dx.abs().max(dy.abs()) != ring as i64 {
                        continue;
                    }
                    let (jx, jy) = (cx as i64 + dx, cy as i64 + dy);
                    if jx < 0 || jy < 0 || jx >= self.nx as i64 || jy >= self.ny as i64 {
                        continue;
                    }
                    if self.is_free_cell(jx as usize, jy as usize) {
                        let (wx, wy) = self.cell_center(jx as usize, jy as usize);
                        let d = (wx - x).hypot(wy - y);
                        if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                            best = Some((d, (jx as usize, jy as usize)));
                        }
                    }
                }
            }
            if let Some((_, (jx, jy))) = best {
                return Some(self.cell_center(jx, jy));
            }
        }
        None
    }

    /// Length in meters of the shortest 8-connected free path, or `None`
    /// when either endpoint is blocked or no path exists.
    pub fn shortest_path_len(&self, from: (f32, f32), to: (f32, f32)) -> Option<f32> {
        self.dijkstra(from, to).map(|(len, _)| len)
    }

    /// Shortest path as world-coordinate waypoints (cell centers), start
    /// cell first.
    pub fn shortest_path(&self, from: (f32, f32), to: (f32, f32)) -> Option<Vec<(f32, f32)>> {
        let (_, parents) = self.dijkstra(from, to)?;
        let start = self.cell_of(from.0, from.1)?;
        let goal = self.cell_of(to.0, to.1)?;
        let mut path = vec![goal];
        let mut cur = goal.1 * self.nx + goal.0;
        let start_idx = start.1 * self.nx + start.0;
        while cur != start_idx {
            cur = parents[cur] as usize;
            path.push((cur % self.nx, cur / self.nx));
        }
        path.reverse();
        Some(path.into_iter().map(|(ix, iy)| self.cell_center(ix, iy)).collect())
    }

    fn dijkstra(&self, from: (f32, f32), to: (f32, f32)) -> Option<(f32, Vec<u32>)> {
        #[derive(PartialEq)]
        struct Entry(f32, usize);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                // Min-heap on cost; ties broken by index for determinism.
                other.0.partial_cmp(&self.0).unwrap_or(Ordering::Equal).then(other.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let start = self.cell_of(from.0, from.1)?;
        let goal = self.cell_of(to.0, to.1)?;
        if !self.is_free_cell(start.0, start.1) || !self.is_free_cell(goal.0, goal.1) {
            return None;
        }
        let start_idx = start.1 * self.nx + start.0;
        let goal_idx = goal.1 * self.nx + goal.0;
        let mut dist = vec![f32::INFINITY; self.nx * self.ny];
        let mut parents = vec![u32::MAX; self.nx * self.ny];
        let mut heap = BinaryHeap::new();
        dist[start_idx] = 0.0;
        heap.push(Entry(0.0, start_idx));
        const DIAG: f32 = std::f32::consts::SQRT_2;
        let steps: [(i64, i64, f32); 8] = [
            (1, 0, 1.0),
            (-1, 0, 1.0),
            (0, 1, 1.0),
            (0, -1, 1.0),
            (1, 1, DIAG),
            (1, -1, DIAG),
            (-1, 1, DIAG),
            (-1, -1, DIAG),
        ];
        while let Some(Entry(d, idx)) = heap.pop() {
            if d > dist[idx] {
                continue;
            }
            if idx == goal_idx {
                return Some((d * self.res, parents));
            }
            let (ix, iy) = (idx % self.nx, idx / self.nx);
            for &(dx, dy, cost) in &steps {
                let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                if jx < 0 || jy < 0 || jx >= self.nx as i64 || jy >= self.ny as i64 {
                    continue;
                }
                let j = jy as usize * self.nx + jx as usize;
                if self.occ[j] {
                    continue;
                }
                let nd = d + cost;
                if nd < dist[j] {
                    dist[j] = nd;
                    parents[j] = idx as u32;
                    heap.push(Entry(nd, j));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::world::{BoxObstacle, Family};

    fn room_with(obstacles: Vec<BoxObstacle>) -> WorldSpec {
        WorldSpec {
            family: Family::Sparse,
            seed: 0,
            width: 6.0,
            height: 6.0,
            obstacles,
            landmarks: Vec::new(),
        }
    }

    #[test]
    fn empty_room_is_single_component_and_straight_paths_match_euclidean() {
        let grid = OccupancyGrid::build(&room_with(vec![]), 0.2);
        assert_eq!(grid.free_component_count(), 1);
        // Axis-aligned corridor: path length equals the coordinate gap.
        let len = grid.shortest_path_len((1.05, 3.05), (4.05, 3.05)).unwrap();
        assert!((len - 3.0).abs() < 0.15, "straight path {len}");
        // Diagonal: 8-connected path approximates √2 distance.
        let diag = grid.shortest_path_len((1.05, 1.05), (4.05, 4.05)).unwrap();
        assert!((diag - 3.0 * std::f32::consts::SQRT_2).abs() < 0.2, "diagonal {diag}");
    }

    #[test]
    fn full_width_wall_disconnects_free_space() {
        // A wall spanning the entire room splits it into two components
        // and makes cross-wall queries unreachable.
        let wall = BoxObstacle { cx: 3.0, cy: 3.0, hw: 3.0, hh: 0.2 };
        let grid = OccupancyGrid::build(&room_with(vec![wall]), 0.2);
        assert_eq!(grid.free_component_count(), 2);
        assert!(!grid.reachable((3.0, 1.0), (3.0, 5.0)));
        assert!(grid.reachable((1.0, 1.0), (5.0, 1.0)));
    }

    #[test]
    fn path_detours_around_partial_wall() {
        // Wall with a gap at the right edge: the path must detour, so it is
        // strictly longer than the straight line but still exists.
        let wall = BoxObstacle { cx: 2.5, cy: 3.0, hw: 2.5, hh: 0.2 };
        let grid = OccupancyGrid::build(&room_with(vec![wall]), 0.2);
        assert_eq!(grid.free_component_count(), 1);
        let len = grid.shortest_path_len((3.0, 1.5), (3.0, 4.5)).unwrap();
        assert!(len > 4.0, "detour length {len} should exceed straight-line 3.0");
        let path = grid.shortest_path((3.0, 1.5), (3.0, 4.5)).unwrap();
        assert!(path.iter().all(|&(x, y)| grid.is_free_at(x, y)));
    }

    #[test]
    fn blocked_endpoints_yield_no_path() {
        let blocker = BoxObstacle { cx: 1.0, cy: 1.0, hw: 0.4, hh: 0.4 };
        let grid = OccupancyGrid::build(&room_with(vec![blocker]), 0.2);
        assert!(grid.shortest_path_len((1.0, 1.0), (5.0, 5.0)).is_none());
    }
}
