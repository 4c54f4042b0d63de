//! Single-edit query perturbations and the harvest of perturbed queries the
//! model gets wrong.
//!
//! Queries here are prompts that end right before the answer blank, so the
//! protected span is the slot after the last token: inserting at `len` would
//! sit inside the blank and is refused.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::{ADD_ID, REPLACE_ID};
use crate::model::{greedy_next, InterventionPlan, TokenId, ToyTransformer};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOp {
    Replace,
    Add,
    Delete,
}

impl PerturbOp {
    pub const ALL: [PerturbOp; 3] = [PerturbOp::Replace, PerturbOp::Add, PerturbOp::Delete];

    /// Positions the op may target in a query of length `len`.
    pub fn valid_positions(self, len: usize) -> std::ops::Range<usize> {
        match self {
            PerturbOp::Delete if len < 2 => 0..0,
            _ => 0..len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedQuery {
    pub original: Vec<TokenId>,
    pub perturbed: Vec<TokenId>,
    pub op: PerturbOp,
    pub position: usize,
    pub seed: u64,
}

pub fn perturb(query: &[TokenId], op: PerturbOp, position: usize, seed: u64) -> Result<PerturbedQuery> {
    let len = query.len();
    if op == PerturbOp::Add && position == len {
        return Err(Error::arg("cannot insert inside the protected answer blank"));
    }
    if !op.valid_positions(len).contains(&position) {
        return Err(Error::arg(format!("{op:?} at position {position} is invalid for a query of length {len}")));
    }
    let mut perturbed = query.to_vec();
    match op {
        PerturbOp::Replace => perturbed[position] = REPLACE_ID,
        PerturbOp::Add => perturbed.insert(position, ADD_ID),
        PerturbOp::Delete => {
            perturbed.remove(position);
        }
    }
    Ok(PerturbedQuery { original: query.to_vec(), perturbed, op, position, seed })
}

/// One perturbation drawn uniformly over (op, valid position) pairs.
pub fn random_perturbation(query: &[TokenId], rng: &mut impl Rng, seed: u64) -> Result<PerturbedQuery> {
    let choices: Vec<(PerturbOp, usize)> =
        PerturbOp::ALL.iter().flat_map(|&op| op.valid_positions(query.len()).map(move |p| (op, p))).collect();
    if choices.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (op, pos) = choices[rng.random_range(0..choices.len())];
    perturb(query, op, pos, seed)
}

/// Perturbation for query `index`, drawn from its own substream so results do
/// not depend on batch order.
pub fn perturbation_for(query: &[TokenId], seed: u64, index: usize) -> Result<PerturbedQuery> {
    let mut rng = rng::indexed(seed, rng::PERTURB, index as u64);
    random_perturbation(query, &mut rng, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrQuery {
    /// Index into the query list given to [`harvest_errors`].
    pub index: usize,
    pub answer: TokenId,
    #[serde(flatten)]
    pub query: PerturbedQuery,
}

/// Perturbs every query once and keeps those the unedited model answered
/// correctly before and wrongly after.
pub fn harvest_errors(model: &ToyTransformer, queries: &[(Vec<TokenId>, TokenId)], seed: u64) -> Result<Vec<ErrQuery>> {
    let none = InterventionPlan::new();
    let kept: Vec<Option<ErrQuery>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, (q, a))| {
            if greedy_next(model, q, &none)? != *a {
                return Ok(None);
            }
            let p = perturbation_for(q, seed, i)?;
            if greedy_next(model, &p.perturbed, &none)? == *a {
                return Ok(None);
            }
            Ok(Some(ErrQuery { index: i, answer: *a, query: p }))
        })
        .collect::<Result<_>>()?;
    Ok(kept.into_iter().flatten().collect())
}

pub fn write_errors(path: &Path, errs: &[ErrQuery]) -> Result<()> {
    let mut out = String::new();
    for e in errs {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_errors(path: &Path) -> Result<Vec<ErrQuery>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edit_forms() {
        let q = [10, 11, 12];
        assert_eq!(perturb(&q, PerturbOp::Delete, 1, 0).unwrap().perturbed, vec![10, 12]);
        assert_eq!(perturb(&q, PerturbOp::Add, 1, 0).unwrap().perturbed, vec![10, ADD_ID, 11, 12]);
        assert_eq!(perturb(&q, PerturbOp::Replace, 0, 0).unwrap().perturbed, vec![REPLACE_ID, 11, 12]);
    }

    #[test]
    fn protected_and_out_of_range_positions_fail() {
        let q = [10, 11, 12];
        assert!(perturb(&q, PerturbOp::Add, 3, 0).is_err());
        assert!(perturb(&q, PerturbOp::Replace, 3, 0).is_err());
        assert!(perturb(&[10], PerturbOp::Delete, 0, 0).is_err());
    }

    #[test]
    fn random_draws_are_seeded() {
        let q: Vec<usize> = (10..18).collect();
        let a: Vec<_> = (0..20).map(|i| perturbation_for(&q, 5, i).unwrap()).collect();
        let b: Vec<_> = (0..20).map(|i| perturbation_for(&q, 5, i).unwrap()).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|p| p.op == PerturbOp::Add) && a.iter().any(|p| p.op == PerturbOp::Delete));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = ErrQuery { index: 3, answer: 7, query: perturb(&[4, 5, 6], PerturbOp::Add, 0, 9).unwrap() };
        let path = dir.path().join("err.jsonl");
        write_errors(&path, std::slice::from_ref(&e)).unwrap();
        assert_eq!(read_errors(&path).unwrap(), vec![e]);
    }
}
