use rand::Rng;

use super::{AggError, LayerAggKind};
use crate::autodiff::{concat_cols, Bound, ParamId, ParamSet, Var};

#[derive(Debug, Clone)]
struct LstmParams {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    att: ParamId,
}

/// Combines the outputs of the intermediate layers into the final node
/// representation.
#[derive(Debug, Clone)]
pub struct LayerAggregator {
    kind: LayerAggKind,
    dim: usize,
    lstm: Option<LstmParams>,
}

impl LayerAggregator {
    pub fn new(
        kind: LayerAggKind,
        dim: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Self {
        let lstm = (kind == LayerAggKind::Lstm).then(|| LstmParams {
            w_x: params.add_glorot(format!("{prefix}.lstm.w_x"), dim, 4 * dim, rng),
            w_h: params.add_glorot(format!("{prefix}.lstm.w_h"), dim, 4 * dim, rng),
            b: params.add_zeros(format!("{prefix}.lstm.b"), &[4 * dim]),
            att: params.add_glorot(format!("{prefix}.lstm.att"), dim, 1, rng),
        });
        Self { kind, dim, lstm }
    }

    pub fn kind(&self) -> LayerAggKind {
        self.kind
    }

    /// Output width given the number of active layers.
    pub fn out_dim(&self, active: usize) -> usize {
        match self.kind {
            LayerAggKind::Concat => active * self.dim,
            _ => self.dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.lstm
            .as_ref()
            .map(|p| vec![p.w_x, p.w_h, p.b, p.att])
            .unwrap_or_default()
    }

    /// Aggregates the layers whose `active` flag is set, in layer order.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        outputs: &[Var<'t>],
        active: &[bool],
    ) -> Result<Var<'t>, AggError> {
        if outputs.len() != active.len() {
            return Err(AggError::Dimension(format!(
                "{} layer outputs but {} activity flags",
                outputs.len(),
                active.len()
            )));
        }
        let chosen: Vec<Var<'t>> = outputs
            .iter()
            .zip(active)
            .filter(|(_, &a)| a)
            .map(|(v, _)| *v)
            .collect();
        if chosen.is_empty() {
            return Err(AggError::EmptyActiveSet);
        }
        for v in &chosen {
            let shape = v.shape();
            if shape.len() != 2 || shape[1] != self.dim || shape[0] != chosen[0].shape()[0] {
                return Err(AggError::Dimension(format!(
                    "{}: layer output of shape {shape:?} does not have width {}",
                    self.kind, self.dim
                )));
            }
        }
        match self.kind {
            LayerAggKind::Concat => {
                if chosen.len() == 1 {
                    Ok(chosen[0])
                } else {
                    Ok(concat_cols(&chosen)?)
                }
            }
            LayerAggKind::Max => {
                let mut acc = chosen[0];
                for v in &chosen[1..] {
                    acc = acc.maximum(*v)?;
                }
                Ok(acc)
            }
            LayerAggKind::Lstm => self.lstm_forward(bound, &chosen),
        }
    }

    fn lstm_forward<'t>(&self, bound: &Bound<'t>, xs: &[Var<'t>]) -> Result<Var<'t>, AggError> {
        let p = self.lstm.as_ref().expect("LSTM parameters");
        let d = self.dim;
        let tape = xs[0].tape();
        let n = xs[0].shape()[0];
        let mut hidden = tape.constant(crate::autodiff::Tensor::zeros(&[n, d]));
        let mut cell = hidden;
        let mut scores = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            let mut z = x.matmul(bound.get(p.w_x))?.add(bound.get(p.b))?;
            if t > 0 {
                z = z.add(hidden.matmul(bound.get(p.w_h))?)?;
            }
            let i = z.slice_cols(0, d)?.sigmoid();
            let f = z.slice_cols(d, 2 * d)?.sigmoid();
            let o = z.slice_cols(2 * d, 3 * d)?.sigmoid();
            let g = z.slice_cols(3 * d, 4 * d)?.tanh();
            cell = if t > 0 {
                f.mul(cell)?.add(i.mul(g)?)?
            } else {
                i.mul(g)?
            };
            hidden = o.mul(cell.tanh())?;
            scores.push(hidden.matmul(bound.get(p.att))?);
        }
        let weights = concat_cols(&scores)?.softmax(1)?;
        let mut out = None;
        for (t, &x) in xs.iter().enumerate() {
            let term = x.scale_rows(weights.slice_cols(t, t + 1)?)?;
            out = Some(match out {
                None => term,
                Some(acc) => term.add(acc)?,
            });
        }
        Ok(out.expect("at least one layer"))
    }
}
