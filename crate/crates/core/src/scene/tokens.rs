//! From modality tensors to masked token sequences on a tape.

use super::{ModalityKind, ModalityTensor};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// A projected modality on a tape: values `[A, T, S, D]`.
#[derive(Debug, Clone)]
pub struct ModalityTokens {
    pub kind: ModalityKind,
    pub values: Var,
    pub agents: usize,
    pub steps: usize,
    pub slots: usize,
    pub mask: Vec<bool>,
}

/// How [`concat_modalities`] arranges tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One flat set per agent: every modality's `T_m * S_m` cells in a row.
    Flat,
    /// A shared time axis; modalities sit side by side on the slot axis and
    /// single-step modalities are tiled across time.
    Grid,
}

/// Source cell of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub modality: ModalityKind,
    pub t: usize,
    pub s: usize,
}

/// Tokens `[A, T, S, D]` with mask `[A, T, S]`. A flat sequence of length `L`
/// is stored with `T = 1, S = L`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub layout: Layout,
    pub agents: usize,
    pub steps: usize,
    pub slots: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// One entry per token position `t * S + s`, shared by all agents.
    pub provenance: Vec<Provenance>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.steps * self.slots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// `relu(x W^T + b)` on every cell, with masked cells zeroed. `w: [D, D_m]`.
pub fn project(tape: &mut Tape, kind: ModalityKind, m: &ModalityTensor, w: Var, b: Var) -> Result<ModalityTokens> {
    let x = tape.constant(m.values.clone());
    let h = tape.linear(x, w, Some(b))?;
    let h = tape.relu(h)?;
    let values = tape.scale_rows(h, mask_weights(&m.mask))?;
    Ok(ModalityTokens {
        kind,
        values,
        agents: m.agents(),
        steps: m.steps(),
        slots: m.slots(),
        mask: m.mask.clone(),
    })
}

/// Adds the learned table `[T * S, D]` to every agent's tokens, row `t * S + s`
/// going to cell `(t, s)`.
pub fn add_positional(tape: &mut Tape, tokens: ModalityTokens, table: Var) -> Result<ModalityTokens> {
    let shape = tape.shape(tokens.values).to_vec();
    let d = shape[3];
    if tape.shape(table) != [tokens.steps * tokens.slots, d] {
        return Err(Error::Config(format!(
            "positional table {:?} does not cover {} modality cells {:?}",
            tape.shape(table),
            tokens.kind.name(),
            &shape[1..3]
        )));
    }
    let pe = tape.broadcast_leading(table, tokens.agents)?;
    let pe = tape.reshape(pe, &shape)?;
    let values = tape.add(tokens.values, pe)?;
    Ok(ModalityTokens { values, ..tokens })
}

fn check_agents(parts: &[ModalityTokens]) -> Result<usize> {
    let a = parts.first().ok_or_else(|| Error::Data("no modalities to concatenate".into()))?.agents;
    if let Some(p) = parts.iter().find(|p| p.agents != a) {
        return Err(Error::Data(format!(
            "{} has {} agents, expected {a}",
            p.kind.name(),
            p.agents
        )));
    }
    Ok(a)
}

/// Concatenates projected modalities in the given order.
pub fn concat_modalities(tape: &mut Tape, parts: &[ModalityTokens], layout: Layout) -> Result<TokenSequence> {
    let a = check_agents(parts)?;
    let width = *tape.shape(parts[0].values).last().unwrap();
    match layout {
        Layout::Flat => {
            let mut vars = Vec::with_capacity(parts.len());
            let mut provenance = Vec::new();
            for p in parts {
                vars.push(tape.reshape(p.values, &[a, 1, p.steps * p.slots, width])?);
                for t in 0..p.steps {
                    for s in 0..p.slots {
                        provenance.push(Provenance { modality: p.kind, t, s });
                    }
                }
            }
            let tokens = tape.concat(&vars, 2)?;
            let len = provenance.len();
            let mut mask = Vec::with_capacity(a * len);
            for ai in 0..a {
                for p in parts {
                    let per = p.steps * p.slots;
                    mask.extend_from_slice(&p.mask[ai * per..(ai + 1) * per]);
                }
            }
            Ok(TokenSequence {
                tokens,
                layout,
                agents: a,
                steps: 1,
                slots: len,
                width,
                mask,
                provenance,
            })
        }
        Layout::Grid => {
            let steps = parts.iter().map(|p| p.steps).max().unwrap();
            if let Some(p) = parts.iter().find(|p| p.steps != 1 && p.steps != steps) {
                return Err(Error::Data(format!(
                    "{} has {} steps; grid layout needs 1 or {steps}",
                    p.kind.name(),
                    p.steps
                )));
            }
            let mut vars = Vec::with_capacity(parts.len());
            for p in parts {
                let v = if p.steps == steps {
                    p.values
                } else {
                    tape.index_select(p.values, 1, &vec![0; steps])?
                };
                vars.push(v);
            }
            let tokens = tape.concat(&vars, 2)?;
            let slots: usize = parts.iter().map(|p| p.slots).sum();
            let mut provenance = Vec::with_capacity(steps * slots);
            let mut mask = Vec::with_capacity(a * steps * slots);
            for t in 0..steps {
                for p in parts {
                    let src_t = if p.steps == steps { t } else { 0 };
                    for s in 0..p.slots {
                        provenance.push(Provenance {
                            modality: p.kind,
                            t: src_t,
                            s,
                        });
                    }
                }
            }
            for ai in 0..a {
                for t in 0..steps {
                    for p in parts {
                        let src_t = if p.steps == steps { t } else { 0 };
                        let off = (ai * p.steps + src_t) * p.slots;
                        mask.extend_from_slice(&p.mask[off..off + p.slots]);
                    }
                }
            }
            Ok(TokenSequence {
                tokens,
                layout,
                agents: a,
                steps,
                slots,
                width,
                mask,
                provenance,
            })
        }
    }
}
