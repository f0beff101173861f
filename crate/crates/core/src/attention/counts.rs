//! Closed-form attention score counts (query-key dot products per forward pass).

/// Joint self-attention over `len` tokens for `agents` agents.
pub fn joint(agents: usize, len: usize) -> u64 {
    (agents * len * len) as u64
}

/// Temporal block: `S` independent sequences of length `T`.
pub fn temporal(agents: usize, steps: usize, slots: usize) -> u64 {
    (agents * slots * steps * steps) as u64
}

/// Spatial block: `T` independent sequences of length `S`.
pub fn spatial(agents: usize, steps: usize, slots: usize) -> u64 {
    (agents * steps * slots * slots) as u64
}

/// One temporal plus one spatial block.
pub fn factorized_pair(agents: usize, steps: usize, slots: usize) -> u64 {
    temporal(agents, steps, slots) + spatial(agents, steps, slots)
}

/// Latent block: `latents` queries against `len` keys, per independent sequence.
pub fn latent(sequences: usize, latents: usize, len: usize) -> u64 {
    (sequences * latents * len) as u64
}

/// Multiply-adds of the score and value products for `scores` dot products of width `d`.
pub fn flops(scores: u64, d: usize) -> u64 {
    scores * 2 * d as u64
}
