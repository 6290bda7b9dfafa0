use super::graph::{Grads, Graph};
use super::model::{MaeModel, PackInput};
use super::optim::AdamW;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::masker::MaskPlan;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Masked-patch MSE of each record in the pack, `None` when nothing was
    /// masked in it.
    pub per_record: Vec<Option<f64>>,
    pub lr: f64,
}

/// Reconstruction loss and per-record errors without touching parameters.
pub fn mae_eval<T: Scalar>(model: &MaeModel, store: &ParamStore<T>, input: &PackInput<T>, plan: &MaskPlan) -> Result<StepOutcome> {
    let mut g = Graph::new(store);
    let (loss, rec) = model.forward_mae(&mut g, input, plan)?;
    let loss = g.value(loss).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("reconstruction loss is {loss}")));
    }
    let per_record = per_record_mse(&g, &rec, input);
    Ok(StepOutcome { loss, per_record, lr: 0.0 })
}

fn per_record_mse<T: Scalar>(g: &Graph<'_, T>, rec: &super::model::Reconstruction, input: &PackInput<T>) -> Vec<Option<f64>> {
    let owners = input.token_records();
    let pred = g.value(rec.predictions);
    let mut sums = vec![(0.0, 0usize); input.records()];
    for (k, &t) in rec.masked.iter().enumerate() {
        let r = owners[t];
        let p = input.patch_row(r, t).expect("masked tokens are patches");
        let e: f64 = pred.row(k).iter().zip(input.patches.row(p)).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
        sums[r].0 += e;
        sums[r].1 += pred.cols;
    }
    sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()
}

/// Loss, per-record errors and parameter gradients for one pack.
pub fn mae_grads<T: Scalar>(
    model: &MaeModel,
    store: &ParamStore<T>,
    input: &PackInput<T>,
    plan: &MaskPlan,
) -> Result<(StepOutcome, Grads<T>)> {
    let mut g = Graph::new(store);
    let (loss, rec) = model.forward_mae(&mut g, input, plan)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "reconstruction loss is {value} over records {:?}",
            input.pack.record_ids
        )));
    }
    let per_record = per_record_mse(&g, &rec, input);
    let grads = g.backward(loss)?;
    Ok((StepOutcome { loss: value, per_record, lr: 0.0 }, grads))
}

/// One masked-autoencoding update.
pub fn pretrain_step<T: Scalar>(
    model: &MaeModel,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    input: &PackInput<T>,
    plan: &MaskPlan,
) -> Result<StepOutcome> {
    let (mut out, grads) = mae_grads(model, store, input, plan)
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at step {}", opt.state.step + 1)),
            e => e,
        })?;
    out.lr = opt.step(store, &grads)?;
    Ok(out)
}
