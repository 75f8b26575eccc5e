use std::collections::VecDeque;

use rcrl_core::envs::Environment;
use rcrl_core::mdp::ActionId;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct EnvDescription {
    pub name: String,
    pub states: usize,
    pub actions: Vec<String>,
    pub unsafe_states: usize,
    pub goal_states: usize,
    pub boundary: usize,
    pub initial_state: usize,
    pub grid: Option<(usize, usize)>,
    /// Fewest transitions from the initial state to a goal over nonzero
    /// kernel entries that avoid unsafe states.
    pub shortest_path_to_goal: Option<usize>,
}

pub fn describe(env: &Environment) -> EnvDescription {
    let mdp = &env.mdp;
    let mut dist = vec![usize::MAX; mdp.num_states()];
    let start = mdp.initial_state();
    dist[start.0] = 0;
    let mut queue = VecDeque::from([start]);
    let mut shortest = None;
    while let Some(s) = queue.pop_front() {
        if mdp.is_goal(s) {
            shortest = Some(dist[s.0]);
            break;
        }
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.num_actions() {
            for &j in mdp.row(s, ActionId(a)).successors() {
                if dist[j.0] == usize::MAX && !mdp.is_unsafe(j) {
                    dist[j.0] = dist[s.0] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    EnvDescription {
        name: env.name.clone(),
        states: mdp.num_states(),
        actions: env.action_names.clone(),
        unsafe_states: mdp.unsafe_states().count(),
        goal_states: mdp.goal_states().count(),
        boundary: env.boundary,
        initial_state: start.0,
        grid: mdp.metadata().map(|m| (m.width, m.height)),
        shortest_path_to_goal: shortest,
    }
}
