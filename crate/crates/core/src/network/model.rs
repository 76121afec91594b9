use super::{Mode, ModelKind, Network};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::transform::Cascade;

/// Skeleton-to-logits pipeline: the transform cascade (grid network only)
/// followed by the convolution network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cascade: Option<Cascade<T>>,
    pub network: Network<T>,
    adjacency: Option<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Checks that the cascade ends on the network's grid. `adjacency` is
    /// required when the first stage is adjacency-regulated.
    pub fn new(cascade: Option<Cascade<T>>, network: Network<T>, adjacency: Option<Tensor<T>>) -> Result<Self> {
        match (&cascade, network.config().kind) {
            (Some(c), ModelKind::Ske2grid) => {
                c.validate()?;
                if c.final_grid() != Some(network.config().grid) {
                    return Err(Error::config(format!(
                        "cascade ends on {:?} but the network expects {}",
                        c.final_grid().map(|g| g.to_string()),
                        network.config().grid
                    )));
                }
                let needs_a = c.stages().first().and_then(|s| s.upt.as_ref()).is_some_and(|u| u.use_adjacency);
                if needs_a {
                    let n = c.n_joints();
                    match &adjacency {
                        Some(a) if a.shape() == [n, n] => {}
                        _ => return Err(Error::config(format!("an {n}×{n} adjacency matrix is required"))),
                    }
                }
            }
            (None, ModelKind::GcnBaseline) => {}
            (Some(_), ModelKind::GcnBaseline) => return Err(Error::config("the graph baseline takes no cascade")),
            (None, ModelKind::Ske2grid) => return Err(Error::config("the grid network needs a cascade")),
        }
        Ok(Model { cascade, network, adjacency })
    }

    pub fn adjacency(&self) -> Option<&Tensor<T>> {
        self.adjacency.as_ref()
    }

    pub fn kind(&self) -> ModelKind {
        self.network.config().kind
    }

    /// `(B, 3, T, N)` skeleton batch to `(B, n_classes)` logits.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = match &mut self.cascade {
            Some(c) => c.forward(g, self.adjacency.as_ref(), x, mode)?,
            None => x,
        };
        self.network.forward(g, h, mode)
    }

    /// Every persisted tensor, sorted by name.
    pub fn named_tensors(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let mut out: Vec<(String, Tensor<T>)> =
            self.network.tensors().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        if let Some(c) = &mut self.cascade {
            out.extend(c.named_tensors()?);
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Every tensor the optimizer may update.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.network.trainable_mut();
        if let Some(c) = &mut self.cascade {
            out.extend(c.trainable_mut());
        }
        out
    }

    /// Routes a stored tensor to the network or the cascade. Returns `false`
    /// when neither knows the name.
    pub fn load_tensor(&mut self, name: &str, t: &Tensor<T>) -> Result<bool> {
        if self.network.load_tensor(name, t)? {
            return Ok(true);
        }
        match &mut self.cascade {
            Some(c) => c.load_tensor(name, t),
            None => Ok(false),
        }
    }
}
