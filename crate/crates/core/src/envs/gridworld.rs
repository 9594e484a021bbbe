use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::mdp::{check_action, State, TaskMdp, TokenId};

pub const UP: TokenId = 0;
pub const DOWN: TokenId = 1;
pub const LEFT: TokenId = 2;
pub const RIGHT: TokenId = 3;
const MOVES: [TokenId; 4] = [UP, DOWN, LEFT, RIGHT];
const OBS_BASE: TokenId = 4;

pub type Cell = (usize, usize);

/// Agent-style navigation. The prompt is `[obs(start), obs(goal)]`; each
/// action is one movement token after which the environment appends the
/// observation token of the resulting cell and closes the step. Moving into
/// the border or a wall leaves the position unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    /// Extra start cells, one task instance each (after `start`).
    pub extra_starts: Vec<Cell>,
    pub goal: Cell,
    pub walls: Vec<Cell>,
    pub horizon: usize,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            width: 3,
            height: 1,
            start: (0, 0),
            extra_starts: Vec::new(),
            goal: (2, 0),
            walls: Vec::new(),
            horizon: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gridworld {
    spec: GridworldSpec,
}

impl Gridworld {
    pub fn new(spec: GridworldSpec) -> Result<Self> {
        if spec.width < 2 || spec.height == 0 {
            return Err(OreoError::Config("gridworld needs width >= 2 and height >= 1".into()));
        }
        if spec.horizon == 0 {
            return Err(OreoError::Config("gridworld needs horizon >= 1".into()));
        }
        let world = Self { spec };
        let inside = |c: &Cell| c.0 < world.spec.width && c.1 < world.spec.height;
        if !inside(&world.spec.goal) || world.spec.walls.contains(&world.spec.goal) {
            return Err(OreoError::Config("goal must be an open cell inside the grid".into()));
        }
        for start in world.starts() {
            if !inside(&start) || world.spec.walls.contains(&start) {
                return Err(OreoError::Config(format!("start {start:?} is not an open cell")));
            }
            if start == world.spec.goal {
                return Err(OreoError::Config("start must differ from goal".into()));
            }
            match world.distance(start, world.spec.goal) {
                Some(d) if d <= world.spec.horizon => {}
                _ => {
                    return Err(OreoError::Config(format!(
                        "goal {:?} unreachable from {start:?} within horizon {}",
                        world.spec.goal, world.spec.horizon
                    )))
                }
            }
        }
        Ok(world)
    }

    pub fn spec(&self) -> &GridworldSpec {
        &self.spec
    }

    pub fn starts(&self) -> Vec<Cell> {
        std::iter::once(self.spec.start)
            .chain(self.spec.extra_starts.iter().copied())
            .collect()
    }

    pub fn obs_token(&self, c: Cell) -> TokenId {
        OBS_BASE + (c.1 * self.spec.width + c.0) as TokenId
    }

    pub fn decode_obs(&self, tok: TokenId) -> Option<Cell> {
        let idx = tok.checked_sub(OBS_BASE)? as usize;
        (idx < self.spec.width * self.spec.height).then(|| (idx % self.spec.width, idx / self.spec.width))
    }

    /// Grid dynamics for one move.
    pub fn step_cell(&self, c: Cell, mv: TokenId) -> Cell {
        let (x, y) = c;
        let target = match mv {
            UP if y > 0 => (x, y - 1),
            DOWN if y + 1 < self.spec.height => (x, y + 1),
            LEFT if x > 0 => (x - 1, y),
            RIGHT if x + 1 < self.spec.width => (x + 1, y),
            _ => c,
        };
        if self.spec.walls.contains(&target) {
            c
        } else {
            target
        }
    }

    fn distance(&self, from: Cell, to: Cell) -> Option<usize> {
        let mut seen = vec![false; self.spec.width * self.spec.height];
        let mut queue = VecDeque::from([(from, 0)]);
        seen[from.1 * self.spec.width + from.0] = true;
        while let Some((c, d)) = queue.pop_front() {
            if c == to {
                return Some(d);
            }
            for mv in MOVES {
                let n = self.step_cell(c, mv);
                let idx = n.1 * self.spec.width + n.0;
                if !seen[idx] {
                    seen[idx] = true;
                    queue.push_back((n, d + 1));
                }
            }
        }
        None
    }

    /// Current cell, decoded from the last observation token.
    pub fn position(&self, s: &State) -> Result<Cell> {
        let last = *s
            .tokens()
            .last()
            .ok_or_else(|| OreoError::Contract("empty gridworld state".into()))?;
        let cell = if s.len() == 2 { s.tokens()[0] } else { last };
        self.decode_obs(cell)
            .ok_or_else(|| OreoError::Contract(format!("{s:?} does not end in an observation")))
    }

    pub fn moves_taken(&self, s: &State) -> usize {
        (s.len() - 2) / 2
    }
}

impl TaskMdp for Gridworld {
    fn env_id(&self) -> &str {
        "gridworld"
    }

    fn vocab_size(&self) -> usize {
        OBS_BASE as usize + self.spec.width * self.spec.height
    }

    fn initial_states(&self) -> Vec<State> {
        let goal = self.obs_token(self.spec.goal);
        self.starts()
            .into_iter()
            .map(|c| State::prompt(vec![self.obs_token(c), goal]))
            .collect()
    }

    fn legal_actions(&self, s: &State) -> Vec<TokenId> {
        if s.is_terminal() {
            return Vec::new();
        }
        MOVES.to_vec()
    }

    fn transition(&self, s: &State, a: TokenId) -> Result<State> {
        check_action(self, s, a)?;
        let next = self.step_cell(self.position(s)?, a);
        let terminal = next == self.spec.goal || self.moves_taken(s) + 1 >= self.spec.horizon;
        Ok(s.extend(a, &[self.obs_token(next)], true, terminal))
    }

    fn reward(&self, s: &State, a: TokenId) -> Result<f64> {
        check_action(self, s, a)?;
        let next = self.step_cell(self.position(s)?, a);
        Ok(if next == self.spec.goal { 1.0 } else { 0.0 })
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn emits_observations(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{enumerate_trajectories, DEFAULT_ENUM_CAP};

    fn corridor() -> Gridworld {
        Gridworld::new(GridworldSpec::default()).unwrap()
    }

    #[test]
    fn shortest_rewarded_sequence_in_corridor() {
        let g = corridor();
        let s0 = g.initial_states().remove(0);
        let trajs = enumerate_trajectories(&g, &s0, DEFAULT_ENUM_CAP).unwrap();
        let best = trajs
            .iter()
            .filter(|t| t.total_reward() == 1.0)
            .min_by_key(|t| t.len())
            .unwrap();
        let actions: Vec<_> = best.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions, vec![RIGHT, RIGHT]);
    }

    #[test]
    fn observation_is_appended_and_walls_hold() {
        let g = corridor();
        let s0 = g.initial_states().remove(0);
        let s1 = g.transition(&s0, RIGHT).unwrap();
        assert_eq!(&s1.tokens()[2..], &[RIGHT, g.obs_token((1, 0))]);
        assert!(s1.at_boundary());
        let bumped = g.transition(&s0, LEFT).unwrap();
        assert_eq!(*bumped.tokens().last().unwrap(), g.obs_token((0, 0)));
        let up = g.transition(&s0, UP).unwrap();
        assert_eq!(*up.tokens().last().unwrap(), g.obs_token((0, 0)));
    }

    #[test]
    fn horizon_ends_without_reward() {
        let g = corridor();
        let mut s = g.initial_states().remove(0);
        let mut total = 0.0;
        for _ in 0..4 {
            total += g.reward(&s, LEFT).unwrap();
            s = g.transition(&s, LEFT).unwrap();
        }
        assert!(s.is_terminal());
        assert_eq!(total, 0.0);
    }

    #[test]
    fn decoded_position_matches_replayed_dynamics() {
        let g = Gridworld::new(GridworldSpec {
            width: 3,
            height: 3,
            start: (0, 0),
            goal: (2, 2),
            walls: vec![(1, 1)],
            horizon: 5,
            ..Default::default()
        })
        .unwrap();
        let s0 = g.initial_states().remove(0);
        for t in enumerate_trajectories(&g, &s0, DEFAULT_ENUM_CAP).unwrap() {
            let mut cell = (0, 0);
            for (i, step) in t.steps.iter().enumerate() {
                cell = g.step_cell(cell, step.action);
                assert_eq!(g.position(t.next_state(i)).unwrap(), cell);
            }
        }
    }

    #[test]
    fn unreachable_goal_is_config_error() {
        let far = GridworldSpec {
            width: 5,
            goal: (4, 0),
            horizon: 3,
            ..Default::default()
        };
        assert!(matches!(Gridworld::new(far), Err(OreoError::Config(_))));
        let walled = GridworldSpec {
            width: 3,
            walls: vec![(1, 0)],
            ..Default::default()
        };
        assert!(matches!(Gridworld::new(walled), Err(OreoError::Config(_))));
    }
}
