//! Instance generators and JSON persistence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fmt::sig17;
use crate::mdp::{validate_mdp, TabularMdp};

/// Which instance family to build.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeneratorSpec {
    /// Dirichlet transition rows over random supports, uniform rewards, uniform `mu`.
    Random {
        seed: u64,
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        sparsity: f64,
    },
    /// One state, two self-looping actions with rewards `0.5 +- delta/2`.
    Bandit { gamma: f64, delta: f64 },
    /// States on a line with deterministic left/right moves; reward 1 on entering the last state.
    Chain { num_states: usize, gamma: f64 },
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::BadSpec(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )))
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GeneratorSpec::Random {
                num_states,
                num_actions,
                gamma,
                sparsity,
                ..
            } => {
                if num_states == 0 || num_actions == 0 {
                    return Err(Error::BadSpec("states and actions must be positive".into()));
                }
                if !(0.0..1.0).contains(&sparsity) {
                    return Err(Error::BadSpec(format!(
                        "sparsity must lie in [0, 1), got {sparsity}"
                    )));
                }
                check_gamma(gamma)
            }
            GeneratorSpec::Bandit { gamma, delta } => {
                if !(delta > 0.0 && delta <= 1.0) {
                    return Err(Error::BadSpec(format!(
                        "delta must lie in (0, 1], got {delta}"
                    )));
                }
                check_gamma(gamma)
            }
            GeneratorSpec::Chain { num_states, gamma } => {
                if num_states == 0 {
                    return Err(Error::BadSpec("a chain needs at least one state".into()));
                }
                check_gamma(gamma)
            }
        }
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let mdp = match *spec {
        GeneratorSpec::Random {
            seed,
            num_states,
            num_actions,
            gamma,
            sparsity,
        } => random_mdp(seed, num_states, num_actions, gamma, sparsity),
        GeneratorSpec::Bandit { gamma, delta } => TabularMdp::from_flat(
            1,
            2,
            vec![1.0, 1.0],
            vec![0.5 + delta / 2.0, 0.5 - delta / 2.0],
            gamma,
            vec![1.0],
        ),
        GeneratorSpec::Chain { num_states, gamma } => chain_mdp(num_states, gamma),
    };
    debug_assert!(validate_mdp(&mdp).is_ok());
    Ok(mdp)
}

fn random_mdp(seed: u64, n: usize, m: usize, gamma: f64, sparsity: f64) -> TabularMdp {
    let support_size = (((1.0 - sparsity) * n as f64).ceil() as usize).clamp(1, n);
    let mut transition = vec![0.0; n * m * n];
    let mut reward = vec![0.0; n * m * n];
    for s in 0..n {
        for a in 0..m {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((s * m + a) as u64);
            let base = (s * m + a) * n;
            let support = sample(&mut rng, n, support_size).into_vec();
            // Symmetric Dirichlet(1) via normalized exponential draws.
            let weights: Vec<f64> = support
                .iter()
                .map(|_| -rng.random_range(f64::EPSILON..1.0).ln())
                .collect();
            let total: f64 = weights.iter().sum();
            for (&next, w) in support.iter().zip(&weights) {
                transition[base + next] = w / total;
            }
            for slot in &mut reward[base..base + n] {
                *slot = rng.random::<f64>();
            }
        }
    }
    TabularMdp::from_flat(n, m, transition, reward, gamma, vec![1.0 / n as f64; n])
}

fn chain_mdp(n: usize, gamma: f64) -> TabularMdp {
    const LEFT: usize = 0;
    const RIGHT: usize = 1;
    let mut transition = vec![0.0; n * 2 * n];
    let mut reward = vec![0.0; n * 2 * n];
    for s in 0..n {
        for (a, next) in [(LEFT, s.saturating_sub(1)), (RIGHT, (s + 1).min(n - 1))] {
            let idx = (s * 2 + a) * n + next;
            transition[idx] = 1.0;
            if next == n - 1 {
                reward[idx] = 1.0;
            }
        }
    }
    TabularMdp::from_flat(n, 2, transition, reward, gamma, vec![1.0 / n as f64; n])
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    mu: Vec<f64>,
    #[serde(rename = "P")]
    transition: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "r")]
    reward: Vec<Vec<Vec<f64>>>,
}

fn push_list(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&sig17(*x));
    }
    out.push(']');
}

fn push_tensor(out: &mut String, mdp: &TabularMdp, row: impl Fn(usize, usize) -> Vec<f64>) {
    out.push_str("[\n");
    for s in 0..mdp.num_states() {
        out.push_str("    [");
        for a in 0..mdp.num_actions() {
            if a > 0 {
                out.push_str(",\n     ");
            }
            push_list(out, &row(s, a));
        }
        out.push(']');
        if s + 1 < mdp.num_states() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ]");
}

/// Serializes to the MDP JSON schema with 17 significant digits per number.
pub fn to_json(mdp: &TabularMdp) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"num_states\": {},", mdp.num_states());
    let _ = writeln!(out, "  \"num_actions\": {},", mdp.num_actions());
    let _ = writeln!(out, "  \"gamma\": {},", sig17(mdp.gamma()));
    out.push_str("  \"mu\": ");
    push_list(&mut out, mdp.mu());
    out.push_str(",\n  \"P\": ");
    push_tensor(&mut out, mdp, |s, a| mdp.transition_row(s, a).to_vec());
    out.push_str(",\n  \"r\": ");
    push_tensor(&mut out, mdp, |s, a| mdp.reward_row(s, a).to_vec());
    out.push_str("\n}\n");
    out
}

/// Parses and validates an MDP JSON document.
pub fn from_json(text: &str) -> Result<TabularMdp> {
    let file: MdpFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mdp = TabularMdp::from_parts(&file.transition, &file.reward, file.gamma, file.mu)
        .map_err(|e| Error::Parse(e.to_string()))?;
    if mdp.num_states() != file.num_states || mdp.num_actions() != file.num_actions {
        return Err(Error::Parse(format!(
            "declared shape {}x{} does not match tensor shape {}x{}",
            file.num_states,
            file.num_actions,
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    validate_mdp(&mdp).map_err(Error::ValidationFailed)?;
    Ok(mdp)
}

pub fn save_mdp(mdp: &TabularMdp, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(mdp))?;
    Ok(())
}

pub fn load_mdp(path: impl AsRef<Path>) -> Result<TabularMdp> {
    from_json(&std::fs::read_to_string(path)?)
}
