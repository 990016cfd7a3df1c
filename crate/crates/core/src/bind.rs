use std::collections::HashMap;

use crate::error::{PimmsError, Result};
use crate::ops::Padding;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Parameters recorded on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    /// Record every parameter starting with `prefix`. Trainable ones become
    /// named leaves; frozen ones are constants and receive no gradient.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, prefix: &str, trainable: bool) -> Result<()> {
        for (name, t) in store.with_prefix(prefix) {
            let v = if trainable {
                tape.param(name, t)?
            } else {
                tape.constant(t.clone())?
            };
            self.vars.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Bind `name` to an already recorded value.
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| PimmsError::invalid(format!("parameter `{name}` is not bound")))
    }

    /// `conv2d` with the `{prefix}/w` kernel and `{prefix}/b` bias.
    pub fn conv(&self, tape: &mut Tape, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.get(&format!("{prefix}/w"))?;
        let b = self.get(&format!("{prefix}/b"))?;
        tape.conv2d(x, w, b, stride, Padding::ZeroSame)
    }

    pub fn dense(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}/w"))?;
        let b = self.get(&format!("{prefix}/b"))?;
        tape.dense(x, w, b)
    }
}
