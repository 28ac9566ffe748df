//! Agents, topologies and the prompt template.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mas::tasks::TaskFamily;

/// Version tag of the prompt and output templates below.
pub const TEMPLATE_VERSION: &str = "v1";

pub const SOLVER_PROFILE: &str = "solver: draft an answer";
pub const CHECKER_PROFILE: &str = "checker: verify the draft, give the final answer";
pub const PLANNER_PROFILE: &str = "planner: outline the steps";
/// Profile substituted for every agent when role conditioning is disabled.
pub const PLACEHOLDER_PROFILE: &str = "agent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Solver,
    Checker,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Planner => "planner",
            Role::Solver => "solver",
            Role::Checker => "checker",
        }
    }

    pub fn profile(self) -> &'static str {
        match self {
            Role::Planner => PLANNER_PROFILE,
            Role::Solver => SOLVER_PROFILE,
            Role::Checker => CHECKER_PROFILE,
        }
    }

    /// Scripted output of a correct agent.
    pub fn reference_output(self, family: TaskFamily, gold: &str) -> String {
        match self {
            Role::Planner => format!("PLAN {}", family.plan_word()),
            Role::Solver => draft_output(gold),
            Role::Checker => answer_output(gold),
        }
    }
}

pub fn draft_output(answer: &str) -> String {
    format!("DRAFT {answer}")
}

pub fn answer_output(answer: &str) -> String {
    format!("<answer>{answer}</answer>")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub role: Role,
    pub profile: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoMemory,
    RawContext,
    Latentmem,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::NoMemory => "no_memory",
            Mode::RawContext => "raw_context",
            Mode::Latentmem => "latentmem",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::NoMemory, Mode::RawContext, Mode::Latentmem]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Chain2,
    Chain3,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Chain2 => "chain2",
            Topology::Chain3 => "chain3",
        }
    }

    pub fn roles(self) -> &'static [Role] {
        match self {
            Topology::Chain2 => &[Role::Solver, Role::Checker],
            Topology::Chain3 => &[Role::Planner, Role::Solver, Role::Checker],
        }
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain2" => Ok(Topology::Chain2),
            "chain3" => Ok(Topology::Chain3),
            _ => Err(Error::contract(format!("unknown topology `{s}` (expected chain2 or chain3)"))),
        }
    }
}

/// Agents, execution order and memory mode. The memory stack itself (bank
/// and composer) is supplied when episodes run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasSystem {
    pub topology: Topology,
    pub agents: Vec<AgentSpec>,
    /// Agent index acting at each step.
    pub graph: Vec<usize>,
    pub mode: Mode,
}

impl MasSystem {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn horizon(&self) -> usize {
        self.graph.len()
    }

    /// Replaces every role profile with the placeholder.
    pub fn without_roles(mut self) -> Self {
        for a in &mut self.agents {
            a.profile = PLACEHOLDER_PROFILE.into();
        }
        self
    }

    pub fn roles_ablated(&self) -> bool {
        self.agents.iter().all(|a| a.profile == PLACEHOLDER_PROFILE)
    }
}

pub fn build_system(topology: &str, mode: Mode) -> Result<MasSystem> {
    let topology: Topology = topology.parse()?;
    let agents: Vec<AgentSpec> = topology
        .roles()
        .iter()
        .map(|&role| AgentSpec {
            role,
            profile: role.profile().into(),
        })
        .collect();
    let graph = (0..agents.len()).collect();
    Ok(MasSystem {
        topology,
        agents,
        graph,
        mode,
    })
}

/// Prompt text for `role` given the query and earlier `(role, output)` turns:
/// `[role] <query> [r1] <o1> ... >`.
pub fn prompt_text(role: Role, query: &str, prior: &[(Role, String)]) -> String {
    let mut s = format!("[{}] {query}", role.name());
    for (r, out) in prior {
        s.push_str(&format!(" [{}] {out}", r.name()));
    }
    s.push_str(" >");
    s
}
