//! Topological memory: an ordered graph of demonstration frames used to
//! pick the next image subgoal on long-horizon episodes.

use crate::navsim::{Observation, Trajectory};
use crate::ndgrad::Tensor;
use crate::worldmodel::patchify;

use super::PlanError;

/// One remembered frame of the demonstration.
#[derive(Debug, Clone)]
pub struct TopoNode {
    pub obs: Observation,
    /// `patchify(obs)`; localization compares latents directly.
    pub latent: Tensor,
    /// Frame index in the source trajectory.
    pub frame: usize,
}

/// Ordered demonstration memory; node positions are `0..nodes.len()` and
/// frame indices increase strictly.
#[derive(Debug, Clone)]
pub struct TopoGraph {
    pub nodes: Vec<TopoNode>,
    pub stride: usize,
}

/// Keeps every `stride`-th frame of the demonstration plus the final frame.
pub fn build_topograph(demo: &Trajectory, stride: usize) -> Result<TopoGraph, PlanError> {
    if stride == 0 {
        return Err(PlanError::Contract("node stride must be at least 1".into()));
    }
    if demo.observations.is_empty() {
        return Err(PlanError::Contract("demonstration has no frames".into()));
    }
    let last = demo.observations.len() - 1;
    let mut frames: Vec<usize> = (0..=last).step_by(stride).collect();
    if *frames.last().expect("nonempty") != last {
        frames.push(last);
    }
    let nodes = frames
        .into_iter()
        .map(|frame| {
            let obs = demo.observations[frame].clone();
            let latent = patchify(&obs);
            TopoNode { obs, latent, frame }
        })
        .collect();
    Ok(TopoGraph { nodes, stride })
}

fn latent_mse(a: &Tensor, b: &Tensor) -> f32 {
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += ((x - y) as f64).powi(2);
    }
    (acc / a.numel() as f64) as f32
}

/// Finds the node position whose latent is closest to `latent`, searching
/// only positions `≥ last − 1`. The forward bias keeps localization from
/// jumping back to a visually similar node already passed.
pub fn topo_localize(latent: &Tensor, graph: &TopoGraph, last: usize) -> Result<usize, PlanError> {
    if graph.nodes.is_empty() {
        return Err(PlanError::Contract("topological graph has no nodes".into()));
    }
    if last >= graph.nodes.len() {
        return Err(PlanError::Contract(format!(
            "last position {last} outside graph of {} nodes",
            graph.nodes.len()
        )));
    }
    let start = last.saturating_sub(1);
    let best = graph.nodes[start..]
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| latent_mse(latent, &a.latent).total_cmp(&latent_mse(latent, &b.latent)))
        .map(|(i, _)| start + i)
        .expect("nonempty slice");
    Ok(best)
}

/// The observation to chase next: the node after the localized one, or the
/// final node once reached (absorbing).
pub fn next_subgoal(graph: &TopoGraph, position: usize) -> Result<Observation, PlanError> {
    if graph.nodes.is_empty() {
        return Err(PlanError::Contract("topological graph has no nodes".into()));
    }
    if position >= graph.nodes.len() {
        return Err(PlanError::Contract(format!(
            "position {position} outside graph of {} nodes",
            graph.nodes.len()
        )));
    }
    let next = (position + 1).min(graph.nodes.len() - 1);
    Ok(graph.nodes[next].obs.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{collect_trajectory, generate_world, render, Family, Pose};

    fn demo() -> Trajectory {
        let world = generate_world(Family::Empty, 17).unwrap();
        collect_trajectory(&world, 25, 99).unwrap()
    }

    #[test]
    fn nodes_follow_stride_and_include_the_final_frame() {
        let t = demo();
        let g = build_topograph(&t, 10).unwrap();
        let frames: Vec<usize> = g.nodes.iter().map(|n| n.frame).collect();
        assert_eq!(frames, vec![0, 10, 20, 25]);
        assert!(frames.windows(2).all(|w| w[0] < w[1]));
        for n in &g.nodes {
            assert_eq!(n.latent.data(), patchify(&t.observations[n.frame]).data());
        }
        // A final frame landing exactly on the stride is not duplicated.
        let g = build_topograph(&t, 5).unwrap();
        let frames: Vec<usize> = g.nodes.iter().map(|n| n.frame).collect();
        assert_eq!(frames, vec![0, 5, 10, 15, 20, 25]);
    }

    #[test]
    fn localizes_exactly_on_a_node_frame() {
        let t = demo();
        let g = build_topograph(&t, 10).unwrap();
        let query = patchify(&t.observations[g.nodes[3].frame]);
        assert_eq!(topo_localize(&query, &g, 0).unwrap(), 3);
        assert_eq!(topo_localize(&query, &g, 3).unwrap(), 3);
    }

    #[test]
    fn subgoal_advances_and_absorbs_at_the_end() {
        let t = demo();
        let g = build_topograph(&t, 10).unwrap();
        let sub = next_subgoal(&g, 0).unwrap();
        assert_eq!(sub.data.data(), g.nodes[1].obs.data.data());
        let last = g.nodes.len() - 1;
        let sub = next_subgoal(&g, last).unwrap();
        assert_eq!(sub.data.data(), g.nodes[last].obs.data.data());
    }

    #[test]
    fn forward_bias_skips_an_earlier_global_minimum() {
        // A loop walked twice: the pose at frame 6 was already seen at
        // frame 0, so its latent has two exact minima. Localizing with
        // last = 5 must pick the later one; an unbiased argmin stops at the
        // first visit.
        let world = generate_world(Family::Empty, 4).unwrap();
        let a = Pose::new(2.0, 2.0, 0.0);
        let b = Pose::new(2.5, 2.2, 0.4);
        let route = [a, b, Pose::new(3.0, 2.4, 0.9), Pose::new(3.2, 3.0, 1.4), Pose::new(2.8, 3.4, 2.2), Pose::new(2.3, 3.1, 2.9), a, b];
        let observations: Vec<Observation> = route.iter().map(|p| render(&world, p).unwrap()).collect();
        let demo = Trajectory {
            world,
            seed: 0,
            poses: route.to_vec(),
            controls: Vec::new(),
            observations,
        };
        let g = build_topograph(&demo, 1).unwrap();
        let query = g.nodes[6].latent.clone();
        let unbiased = (0..g.nodes.len())
            .min_by(|&i, &j| {
                latent_mse(&query, &g.nodes[i].latent).total_cmp(&latent_mse(&query, &g.nodes[j].latent))
            })
            .unwrap();
        assert_eq!(unbiased, 0, "global argmin hits the first visit");
        assert_eq!(topo_localize(&query, &g, 5).unwrap(), 6, "forward bias keeps progress");
    }

    #[test]
    fn contract_violations_error() {
        let t = demo();
        assert!(build_topograph(&t, 0).is_err());
        let empty = Trajectory {
            world: generate_world(Family::Empty, 1).unwrap(),
            seed: 0,
            poses: Vec::new(),
            controls: Vec::new(),
            observations: Vec::new(),
        };
        assert!(build_topograph(&empty, 5).is_err());
        let g = build_topograph(&t, 10).unwrap();
        let q = g.nodes[0].latent.clone();
        assert!(topo_localize(&q, &g, g.nodes.len()).is_err());
        assert!(next_subgoal(&g, g.nodes.len()).is_err());
    }
}
