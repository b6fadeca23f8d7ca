//! Named traversal of parameter trees. Names are dot-joined paths such as
//! `cmsa.0.1.ssm.2.ir.proj_b.weight`; the weight container stores tensors
//! under these names.

use std::collections::BTreeMap;

use crate::cmsa::{CmsaBlockParams, ModalPair};
use crate::error::{Error, Result};
use crate::ssm::{SelectiveProj, Ss2dParams, SsmCore, SsmParams};
use crate::tensor::{LayerNorm, LinearMap, Tensor};

pub type Visit<'a> = dyn FnMut(&str, &Tensor) -> Result<()> + 'a;
pub type VisitMut<'a> = dyn FnMut(&str, &mut Tensor) -> Result<()> + 'a;

pub trait Params {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()>;
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()>;

    /// All tensors keyed by name.
    fn named_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, t| {
            out.insert(name.to_string(), t.clone());
            Ok(())
        })?;
        Ok(out)
    }

    /// Overwrites every tensor from `source`. Each name must be present with
    /// matching extents, and `source` may not contain extra names.
    fn assign_from(&mut self, mut source: BTreeMap<String, Tensor>) -> Result<()> {
        self.visit_mut("", &mut |name, t| {
            let loaded = source.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Extent {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: loaded.shape().to_vec(),
                });
            }
            *t = loaded;
            Ok(())
        })?;
        match source.into_keys().next() {
            Some(extra) => Err(Error::UnexpectedTensor(extra)),
            None => Ok(()),
        }
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        let _ = self.visit("", &mut |_, t| {
            n += t.len();
            Ok(())
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()> {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        f(prefix, self)
    }
}

impl<P: Params> Params for Option<P> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()> {
        match self {
            Some(p) => p.visit(prefix, f),
            None => Ok(()),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        match self {
            Some(p) => p.visit_mut(prefix, f),
            None => Ok(()),
        }
    }
}

impl<P: Params> Params for [P] {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()> {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f)?;
        }
        Ok(())
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f)?;
        }
        Ok(())
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()> {
        self.as_slice().visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.as_mut_slice().visit_mut(prefix, f)
    }
}

impl<P: Params, const N: usize> Params for [P; N] {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()> {
        self.as_slice().visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.as_mut_slice().visit_mut(prefix, f)
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields under
/// their own names.
macro_rules! field_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Params for $ty {
            fn visit(&self, prefix: &str, f: &mut $crate::params::Visit<'_>) -> $crate::error::Result<()> {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f)?; )*
                Ok(())
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut $crate::params::VisitMut<'_>) -> $crate::error::Result<()> {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f)?; )*
                Ok(())
            }
        }
    };
}

pub(crate) use field_params;

impl<P: Params> Params for ModalPair<P> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) -> Result<()> {
        self.ir.visit(&join(prefix, "ir"), f)?;
        self.vi.visit(&join(prefix, "vi"), f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.ir.visit_mut(&join(prefix, "ir"), f)?;
        self.vi.visit_mut(&join(prefix, "vi"), f)
    }
}

field_params!(LinearMap { weight, bias });
field_params!(LayerNorm { gamma, beta });
field_params!(SsmCore { a_log, delta_bias, d });
field_params!(SelectiveProj { proj_b, proj_c, proj_delta });
field_params!(SsmParams { core, ir, vi });
field_params!(Ss2dParams { core, proj });
field_params!(CmsaBlockParams { norm_in, proj_in, dw_conv, mark, ssm, norm_out, proj_out });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_structure() {
        let core = SsmCore {
            a_log: Tensor::zeros(&[2, 3]),
            delta_bias: Tensor::zeros(&[2]),
            d: None,
        };
        let p = Ss2dParams { core, proj: SelectiveProj::zeros(2, 3) };
        let names: Vec<String> = p.named_tensors().unwrap().into_keys().collect();
        assert_eq!(
            names,
            [
                "core.a_log",
                "core.delta_bias",
                "proj.proj_b.bias",
                "proj.proj_b.weight",
                "proj.proj_c.bias",
                "proj.proj_c.weight",
                "proj.proj_delta.bias",
                "proj.proj_delta.weight"
            ]
        );
        assert_eq!(p.param_count(), 6 + 2 + 2 * (3 + 6) + 2 + 4);
    }

    #[test]
    fn assign_roundtrip_and_errors() {
        let src = vec![LinearMap::identity(2), LinearMap::zeros(2, 3)];
        let mut dst = vec![LinearMap::zeros(2, 2), LinearMap::identity(3).clone()];
        let err = dst.assign_from(src.named_tensors().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Extent { .. }));

        let mut dst = vec![LinearMap::zeros(2, 2), LinearMap::zeros(2, 3)];
        dst.assign_from(src.named_tensors().unwrap()).unwrap();
        assert_eq!(dst, src);

        let mut partial = src.named_tensors().unwrap();
        partial.remove("1.bias");
        assert!(matches!(dst.assign_from(partial), Err(Error::MissingTensor(n)) if n == "1.bias"));

        let mut extra = src.named_tensors().unwrap();
        extra.insert("zz".into(), Tensor::scalar(1.0));
        assert!(matches!(dst.assign_from(extra), Err(Error::UnexpectedTensor(n)) if n == "zz"));
    }
}
