use std::fmt::Write as _;

use super::SamplerKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub input: Tensor,
    pub t: f64,
    pub output: Tensor,
}

/// DPM-Solver-2 half-step point `(s_i, u_i)` and the evaluation there.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediate {
    pub s: f64,
    pub u: Tensor,
    pub eps: Tensor,
}

/// States `x_{t_i}` for every grid time reached, plus per-step evaluations.
///
/// `evals[i - 1]` and `intermediates[i - 1]` belong to the step `t_{i-1} -> t_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: SamplerKind,
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub evals: Vec<EvalRecord>,
    pub intermediates: Vec<Option<Intermediate>>,
    /// Step index whose result left the finite/bounded region.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub(crate) fn start(kind: SamplerKind, times: Vec<f64>, x_t: Tensor) -> Self {
        Self {
            kind,
            times,
            states: vec![x_t],
            evals: Vec::new(),
            intermediates: Vec::new(),
            diverged_at: None,
        }
    }

    pub fn endpoint(&self) -> &Tensor {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn is_complete(&self) -> bool {
        self.diverged_at.is_none() && self.states.len() == self.times.len()
    }

    /// Plot-ready CSV:
    /// `chain_id,step,t,s_or_empty,x0..x{d-1},kind,flags`.
    ///
    /// Every state produces a `state` row; DPM-Solver-2 steps add an
    /// `intermediate` row at step `i` holding `u_i` with `s_i` filled in.
    /// The last row of a diverged chain carries a `diverged` flag.
    pub fn to_csv(&self, header: bool) -> String {
        let mut out = String::new();
        let dim = self.states[0].cols();
        if header {
            out.push_str(&csv_header(dim));
        }
        self.append_csv(&mut out, 0);
        out
    }

    pub fn append_csv(&self, out: &mut String, chain_offset: usize) {
        let kind = self.kind.label();
        let chains = self.states[0].rows();
        for c in 0..chains {
            let chain_id = chain_offset + c;
            for (i, state) in self.states.iter().enumerate() {
                if i > 0 {
                    if let Some(Some(inter)) = self.intermediates.get(i - 1) {
                        write_row(out, chain_id, i, self.times[i], Some(inter.s), inter.u.row(c), &kind, "intermediate");
                    }
                }
                let last = i + 1 == self.states.len();
                let flags = if last && self.diverged_at.is_some() {
                    "state;diverged"
                } else {
                    "state"
                };
                write_row(out, chain_id, i, self.times[i], None, state.row(c), &kind, flags);
            }
        }
    }
}

pub fn csv_header(dim: usize) -> String {
    let mut h = String::from("chain_id,step,t,s_or_empty");
    for j in 0..dim {
        let _ = write!(h, ",x{j}");
    }
    h.push_str(",kind,flags\n");
    h
}

#[allow(clippy::too_many_arguments)]
fn write_row(out: &mut String, chain: usize, step: usize, t: f64, s: Option<f64>, x: &[f64], kind: &str, flags: &str) {
    let _ = write!(out, "{chain},{step},{t:?},");
    if let Some(s) = s {
        let _ = write!(out, "{s:?}");
    }
    for v in x {
        let _ = write!(out, ",{v:?}");
    }
    let _ = writeln!(out, ",{kind},{flags}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_state_and_intermediate_rows() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]);
        let mut t = Trajectory::start(SamplerKind::Dpm2, vec![1.0, 0.5], x.clone());
        t.states.push(x.clone());
        t.intermediates.push(Some(Intermediate {
            s: 0.75,
            u: x.clone(),
            eps: x.clone(),
        }));
        let csv = t.to_csv(true);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "chain_id,step,t,s_or_empty,x0,x1,kind,flags");
        assert_eq!(lines[1], "0,0,1.0,,1.0,2.0,dpm2,state");
        assert_eq!(lines[2], "0,1,0.5,0.75,1.0,2.0,dpm2,intermediate");
        assert_eq!(lines[3], "0,1,0.5,,1.0,2.0,dpm2,state");
    }
}
