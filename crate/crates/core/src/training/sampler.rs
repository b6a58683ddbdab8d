use crate::adapters::{AdapterSet, ExpertPick, ExpertPolicy, ModuleRef, Routing};
use crate::error::{MosaError, Result};
use crate::rng::Rng;

/// Draws the expert indices of two passes over `n` experts. With `distinct`
/// the second index is uniform over the other `n - 1` experts.
pub fn draw_pair(rng: &mut Rng, n: usize, distinct: bool) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(MosaError::Config("cannot sample from zero experts".into()));
    }
    if distinct && n < 2 {
        return Err(MosaError::Config("two_pass_distinct needs at least 2 experts".into()));
    }
    let a = rng.below(n);
    let b = if distinct {
        let b = rng.below(n - 1);
        if b >= a { b + 1 } else { b }
    } else {
        rng.below(n)
    };
    Ok((a, b))
}

/// Expert picks of one module for the two passes.
///
/// The up-projection is always split. The down-projection is split unless
/// `hierarchical`, and is then drawn independently of the up side.
pub fn sample_experts(
    rng: &mut Rng,
    n: usize,
    hierarchical: bool,
    two_pass_distinct: bool,
) -> Result<(ExpertPick, ExpertPick)> {
    let (u1, u2) = draw_pair(rng, n, two_pass_distinct)?;
    let (d1, d2) = if hierarchical { (None, None) } else {
        let (a, b) = draw_pair(rng, n, two_pass_distinct)?;
        (Some(a), Some(b))
    };
    Ok((ExpertPick { down: d1, up: Some(u1) }, ExpertPick { down: d2, up: Some(u2) }))
}

fn sample_module(
    rng: &mut Rng,
    module: ModuleRef<'_>,
    policy: ExpertPolicy,
    distinct: bool,
) -> Result<(ExpertPick, ExpertPick)> {
    let [down, up] = module.split_weights();
    let mut p1 = ExpertPick::default();
    let mut p2 = ExpertPick::default();
    if up.experts.is_some() {
        let (a, b) = draw_pair(rng, up.num_experts(), distinct)?;
        p1.up = Some(a);
        p2.up = Some(b);
    }
    if down.experts.is_some() {
        if policy == ExpertPolicy::Tied && p1.up.is_some() && down.num_experts() == up.num_experts() {
            p1.down = p1.up;
            p2.down = p2.up;
        } else {
            let (a, b) = draw_pair(rng, down.num_experts(), distinct)?;
            p1.down = Some(a);
            p2.down = Some(b);
        }
    }
    Ok((p1, p2))
}

/// Routings of the two stochastic passes of one training step. Every module
/// draws its own experts, in [`AdapterSet::modules`] order. A set without
/// experts gets dense routing and consumes no randomness.
pub fn sample_routing(rng: &mut Rng, set: &AdapterSet, two_pass_distinct: bool) -> Result<(Routing, Routing)> {
    if !set.has_experts() || set.merged {
        return Ok((Routing::Dense, Routing::Dense));
    }
    let mut r1 = Vec::with_capacity(set.num_modules());
    let mut r2 = Vec::with_capacity(set.num_modules());
    for m in set.modules() {
        let (a, b) = sample_module(rng, m, set.policy(), two_pass_distinct)?;
        r1.push(a);
        r2.push(b);
    }
    Ok((Routing::Experts(r1), Routing::Experts(r2)))
}

/// A single stochastic routing, as used by stochastic inference.
pub fn sample_single(rng: &mut Rng, set: &AdapterSet) -> Result<Routing> {
    if !set.has_experts() || set.merged {
        return Ok(Routing::Dense);
    }
    let mut picks = Vec::with_capacity(set.num_modules());
    for m in set.modules() {
        let [down, up] = m.split_weights();
        let mut p = ExpertPick::default();
        if up.experts.is_some() {
            p.up = Some(rng.below(up.num_experts()));
        }
        if down.experts.is_some() {
            p.down = match (set.policy(), p.up) {
                (ExpertPolicy::Tied, Some(u)) if down.num_experts() == up.num_experts() => Some(u),
                _ => Some(rng.below(down.num_experts())),
            };
        }
        picks.push(p);
    }
    Ok(Routing::Experts(picks))
}
