//! The network bound to a tape: parameter tensors grouped by role, plus the
//! fusion machinery shared by the stacked blocks and the evolution head.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{invalid, Result};
use crate::solver::{integrate_rows, SolverConfig, VectorField};
use crate::tape::{RowPlan, Tape, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) struct Mlp {
    w0: Tensor,
    b0: Tensor,
    w1: Tensor,
    b1: Tensor,
}

impl Mlp {
    fn take(it: &mut impl Iterator<Item = Tensor>) -> Self {
        let mut next = || it.next().expect("parameter layout exhausted");
        Self {
            w0: next(),
            b0: next(),
            w1: next(),
            b1: next(),
        }
    }

    /// `tanh(x·W0 + b0)·W1 + b1`.
    pub(crate) fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.linear(x, &self.w0, &self.b0)?;
        let h = tape.tanh(&h);
        tape.linear(&h, &self.w1, &self.b1)
    }
}

pub(crate) struct Head {
    pub(crate) extract: Mlp,
    pub(crate) field: Mlp,
}

pub(crate) struct Block {
    pub(crate) heads: Vec<Head>,
    pub(crate) assemble: Mlp,
    gain: Tensor,
    bias: Tensor,
}

pub(crate) struct Evolution {
    pub(crate) heads: Vec<Head>,
    pub(crate) assemble: Mlp,
}

pub(crate) struct Net {
    embed_w: Tensor,
    embed_b: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) evolution: Evolution,
    out_w: Tensor,
    out_b: Tensor,
}

/// Learned vector field of one head. The network sees the state and the
/// normalized time `t / time_scale`; its output is a rate per `time_scale`,
/// so the returned derivative is divided by `time_scale` (seconds).
pub(crate) struct Field<'a> {
    pub(crate) mlp: &'a Mlp,
    pub(crate) time_scale: f64,
}

impl VectorField for Field<'_> {
    fn eval(&self, tape: &mut Tape, state: &Tensor, times: &[f64]) -> Result<Tensor> {
        let rows = state.rows();
        let tcol: Vec<f64> = if let [t] = times {
            vec![t / self.time_scale; rows]
        } else {
            times.iter().map(|t| t / self.time_scale).collect()
        };
        let tcol = Tensor::new(vec![rows, 1], tcol)?;
        let x = tape.concat_last(&[state, &tcol])?;
        let out = self.mlp.apply(tape, &x)?;
        Ok(tape.scale(&out, 1.0 / self.time_scale))
    }
}

impl Net {
    /// Groups `params` (layout order, possibly bound to a tape) by role.
    pub(crate) fn bind(cfg: &ModelConfig, params: &[Tensor]) -> Self {
        let mut it = params.iter().cloned();
        let heads = |it: &mut core::iter::Cloned<core::slice::Iter<'_, Tensor>>| -> Vec<Head> {
            (0..cfg.m_heads)
                .map(|_| Head {
                    extract: Mlp::take(it),
                    field: Mlp::take(it),
                })
                .collect()
        };
        let embed_w = it.next().unwrap();
        let embed_b = it.next().unwrap();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let hs = heads(&mut it);
            let assemble = Mlp::take(&mut it);
            blocks.push(Block {
                heads: hs,
                assemble,
                gain: it.next().unwrap(),
                bias: it.next().unwrap(),
            });
        }
        let hs = heads(&mut it);
        let evolution = Evolution {
            heads: hs,
            assemble: Mlp::take(&mut it),
        };
        let out_w = it.next().unwrap();
        let out_b = it.next().unwrap();
        debug_assert!(it.next().is_none());
        Self {
            embed_w,
            embed_b,
            blocks,
            evolution,
            out_w,
            out_b,
        }
    }

    pub(crate) fn embed(&self, tape: &mut Tape, scaled: &Tensor) -> Result<Tensor> {
        tape.linear(scaled, &self.embed_w, &self.embed_b)
    }

    pub(crate) fn project(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tape.linear(x, &self.out_w, &self.out_b)
    }
}

impl Block {
    pub(crate) fn norm(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gain, &self.bias, NORM_EPS)
    }
}

/// Concatenates per-head component rows and maps them back to tokens.
pub(crate) fn assemble(tape: &mut Tape, mlp: &Mlp, parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    let cat = if let [one] = refs.as_slice() { (*one).clone() } else { tape.concat_last(&refs)? };
    mlp.apply(tape, &cat)
}

/// One weighted contribution `w · (e_src + ∫_{t_src}^{t_out} Ψ)` to output row `out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Term {
    pub(crate) out: usize,
    pub(crate) src: usize,
    pub(crate) weight: f64,
    pub(crate) t_src: f64,
    pub(crate) t_out: f64,
}

/// Output rows are weighted sums of evolved component rows. Terms with zero
/// span pass their source row through untouched; the rest are integrated in
/// batches that share a step count. Each output accumulates its terms in the
/// order given.
pub(crate) fn fuse_terms<F: VectorField + ?Sized>(
    tape: &mut Tape,
    comps: &Tensor,
    field: &F,
    out_rows: usize,
    terms: &[Term],
    solver: &SolverConfig,
) -> Result<Tensor> {
    if terms.iter().any(|t| t.src >= comps.rows() || t.out >= out_rows) {
        return Err(invalid("fusion term refers to a missing row"));
    }
    let identity = terms.len() == out_rows
        && out_rows == comps.rows()
        && terms
            .iter()
            .enumerate()
            .all(|(i, t)| t.out == i && t.src == i && t.weight == 1.0 && t.t_src == t.t_out);
    if identity {
        return Ok(comps.clone());
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, t) in terms.iter().enumerate() {
        if t.t_src != t.t_out {
            groups.entry(solver.step_count(t.t_out - t.t_src)).or_default().push(k);
        }
    }
    let mut row_of = vec![0usize; terms.len()];
    for (k, t) in terms.iter().enumerate() {
        row_of[k] = t.src;
    }
    let mut solved = Vec::with_capacity(groups.len());
    let mut offset = comps.rows();
    for (&steps, members) in &groups {
        let src: Vec<usize> = members.iter().map(|&k| terms[k].src).collect();
        let t0: Vec<f64> = members.iter().map(|&k| terms[k].t_src).collect();
        let t1: Vec<f64> = members.iter().map(|&k| terms[k].t_out).collect();
        let y0 = tape.gather_rows(comps, &src)?;
        let y1 = integrate_rows(field, tape, &y0, &t0, &t1, steps, solver.method)?;
        for (r, &k) in members.iter().enumerate() {
            row_of[k] = offset + r;
        }
        offset += members.len();
        solved.push(y1);
    }
    let pool = if solved.is_empty() {
        comps.clone()
    } else {
        let mut parts: Vec<&Tensor> = vec![comps];
        parts.extend(solved.iter());
        tape.concat_rows(&parts)?
    };
    let mut plan = RowPlan::new(out_rows);
    for (k, t) in terms.iter().enumerate() {
        plan.push(t.out, row_of[k], t.weight);
    }
    tape.row_combine(&pool, plan)
}
