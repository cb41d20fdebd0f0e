//! Central finite-difference check of taped gradients.
//!
//! Losses are evaluated in `f64` on the graph's `f32` parameters, so the
//! difference quotient is not swamped by single-precision rounding. The step
//! actually applied is the `f32`-rounded one. Entries whose perturbation moves
//! any ReLU or max-pool decision are skipped: the loss has a kink between the
//! two probe points and no derivative to compare against.

use serde::Serialize;

use crate::graph::{record, Mode, ModelGraph, ParamId, ParamSlot};
use crate::tensor::{Tape, Tensor};

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotCheck {
    pub slot: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub slots: Vec<SlotCheck>,
    pub max_rel_err: f64,
}

fn loss_and_kinks(g: &ModelGraph, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Vec<usize>), TrainError> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let rec = record(g, &mut tape, xv, Mode::Train)?;
    let loss = tape.softmax_xent(rec.output, labels)?;
    Ok((tape.value(loss).data()[0], tape.kink_signature()))
}

/// Compares every parameter entry's analytic gradient of the training-mode
/// cross-entropy with a central difference of step `h`. Relative error uses
/// the denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn check_gradients(g: &ModelGraph, x: &Tensor, labels: &[usize], h: f32) -> Result<GradCheck, TrainError> {
    let x64: Tensor<f64> = x.cast();
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x64.clone());
    let rec = record(g, &mut tape, xv, Mode::Train)?;
    let loss = tape.softmax_xent(rec.output, labels)?;
    let base_kinks = tape.kink_signature();
    let grads = tape.backward(loss)?;

    let mut probe = g.clone();
    let mut slots: Vec<(ParamSlot, SlotCheck)> = Vec::new();
    for (id, var) in &rec.params {
        let analytic = grads.get(*var).map(|t| t.data().to_vec());
        let len = g.param(*id).map_or(0, <[f32]>::len);
        let pos = match slots.iter().position(|(s, _)| *s == id.slot) {
            Some(p) => p,
            None => {
                slots.push((
                    id.slot,
                    SlotCheck {
                        slot: format!("{:?}", id.slot),
                        checked: 0,
                        skipped: 0,
                        max_rel_err: 0.0,
                    },
                ));
                slots.len() - 1
            }
        };
        for i in 0..len {
            let a = analytic.as_ref().map_or(0.0, |v| v[i]);
            let fd = central_difference(&mut probe, *id, i, h, &x64, labels, &base_kinks)?;
            let entry = &mut slots[pos].1;
            match fd {
                Some(fd) => {
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    entry.checked += 1;
                    entry.max_rel_err = entry.max_rel_err.max(rel);
                }
                None => entry.skipped += 1,
            }
        }
    }
    let slots: Vec<SlotCheck> = slots.into_iter().map(|(_, s)| s).collect();
    Ok(GradCheck {
        max_rel_err: slots.iter().map(|s| s.max_rel_err).fold(0.0, f64::max),
        slots,
    })
}

fn central_difference(
    probe: &mut ModelGraph,
    id: ParamId,
    i: usize,
    h: f32,
    x: &Tensor<f64>,
    labels: &[usize],
    base_kinks: &[usize],
) -> Result<Option<f64>, TrainError> {
    let orig = probe.param(id).expect("parameter exists")[i];
    let (up, down) = (orig + h, orig - h);
    probe.param_mut(id).expect("parameter exists")[i] = up;
    let (lp, kp) = loss_and_kinks(probe, x, labels)?;
    probe.param_mut(id).expect("parameter exists")[i] = down;
    let (lm, km) = loss_and_kinks(probe, x, labels)?;
    probe.param_mut(id).expect("parameter exists")[i] = orig;
    if kp != base_kinks || km != base_kinks {
        return Ok(None);
    }
    Ok(Some((lp - lm) / (up as f64 - down as f64)))
}
