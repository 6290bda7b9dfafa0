use crate::error::{Error, Result};
use crate::net::{Graph, MaeModel, NodeId, PackInput, ParamStore, Tensor};
use crate::rng;
use crate::scalar::Scalar;

/// Affine layer registered under `{prefix}.w` / `{prefix}.b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        Self::check_free(store, prefix)?;
        let mut r = rng::rng(seed, &[rng::fnv1a(prefix.bytes())]);
        let w = store.add(format!("{prefix}.w"), crate::net::xavier(inputs, outputs, &mut r));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(1, outputs));
        Ok(Self { w, b })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let find = |s: &str| store.find(&format!("{prefix}.{s}")).ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{s}")));
        Ok(Self { w: find("w")?, b: find("b")? })
    }

    fn check_free<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<()> {
        if store.find(&format!("{prefix}.w")).is_some() {
            return Err(Error::Config(format!("head {prefix} already registered")));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        g.linear(x, self.w, self.b)
    }

    pub fn pids(&self) -> [usize; 2] {
        [self.w, self.b]
    }

    pub fn outputs<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.w).cols
    }
}

/// Pooled record features `[cls latent ; mean of patch latents]`, `R x 2D`.
pub fn pooled_features<T: Scalar>(g: &mut Graph<'_, T>, model: &MaeModel, input: &PackInput<T>) -> Result<NodeId> {
    let enc = model.encode_all(g, input)?;
    let cls = g.gather_rows(enc.latents, enc.cls_rows())?;
    let mean = g.segment_mean(enc.latents, enc.patch_blocks())?;
    g.concat_cols(vec![cls, mean])
}

pub fn feature_dim(model: &MaeModel) -> usize {
    2 * model.config.embed_dim
}

/// Softmax cross-entropy of a linear head on `features`. Returns
/// `(logits, loss)`.
pub fn classify_loss<T: Scalar>(g: &mut Graph<'_, T>, features: NodeId, labels: &[usize], head: &Dense) -> Result<(NodeId, NodeId)> {
    let logits = head.forward(g, features)?;
    let loss = g.softmax_ce(logits, labels.to_vec())?;
    Ok((logits, loss))
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax of each row.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows).map(|r| argmax(logits.row(r))).collect()
}

/// Classification plus four-way regression of normalized radar parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointHead {
    pub class: Dense,
    pub regress: Dense,
}

pub const REGRESSION_TARGETS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct JointOutput {
    pub logits: NodeId,
    pub regression: NodeId,
    pub loss: NodeId,
}

impl JointHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, inputs: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            class: Dense::new(store, &format!("{prefix}.cls"), inputs, classes, seed)?,
            regress: Dense::new(store, &format!("{prefix}.reg"), inputs, REGRESSION_TARGETS, seed)?,
        })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self { class: Dense::attach(store, &format!("{prefix}.cls"))?, regress: Dense::attach(store, &format!("{prefix}.reg"))? })
    }

    /// Normalized regression outputs, `R x 4`.
    pub fn regression<T: Scalar>(&self, g: &mut Graph<'_, T>, features: NodeId) -> Result<NodeId> {
        self.regress.forward(g, features)
    }

    pub fn pids(&self) -> [usize; 4] {
        [self.class.w, self.class.b, self.regress.w, self.regress.b]
    }
}

/// `CE + lambda * mean |regression - targets|` over the `R x 4` normalized
/// targets.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    features: NodeId,
    labels: &[usize],
    targets: &Tensor<T>,
    head: &JointHead,
    lambda: f64,
) -> Result<JointOutput> {
    if targets.cols != REGRESSION_TARGETS || targets.rows != labels.len() {
        return Err(Error::Shape(format!("regression targets {:?} for {} labels", targets.shape(), labels.len())));
    }
    let (logits, ce) = classify_loss(g, features, labels, &head.class)?;
    let regression = head.regression(g, features)?;
    let t = g.leaf(targets.clone());
    let w = T::lit(lambda / (targets.rows * REGRESSION_TARGETS) as f64);
    let mae = g.weighted_abs_err(regression, t, vec![w; targets.rows])?;
    let loss = g.sum(&[ce, mae]);
    Ok(JointOutput { logits, regression, loss })
}

/// `lambda_z * mean(z^2)`.
pub fn latent_reg<T: Scalar>(g: &mut Graph<'_, T>, latent: NodeId, lambda_z: f64) -> Result<NodeId> {
    if lambda_z < 0.0 {
        return Err(Error::Config(format!("latent penalty {lambda_z} must be non-negative")));
    }
    let (rows, cols) = g.value(latent).shape();
    let zero = g.leaf(Tensor::zeros(rows, cols));
    g.weighted_sq_err(latent, zero, vec![T::lit(lambda_z / (rows * cols) as f64); rows])
}
