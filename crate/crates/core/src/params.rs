//! Parameter containers that can hold tensors, tape handles or gradients.
//!
//! Every model struct is generic over its leaf type `P`: `Tensor<T>` for
//! stored weights, [`Var`] once bound to a tape, and again `Tensor<T>` for
//! gradients. [`ParamTree`] walks the leaves in a fixed declaration order,
//! which the optimizer and checkpoint code rely on.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait ParamTree<P> {
    type Mapped<Q>: ParamTree<Q>;

    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Self::Mapped<Q>;

    fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &P));

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut P));
}

impl<P, X: ParamTree<P>> ParamTree<P> for Vec<X> {
    type Mapped<Q> = Vec<X::Mapped<Q>>;

    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Self::Mapped<Q> {
        self.iter().map(|x| x.map(f)).collect()
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &P)) {
        for (i, x) in self.iter().enumerate() {
            x.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut P)) {
        for x in self.iter_mut() {
            x.visit_mut(f);
        }
    }
}

/// Implements [`ParamTree`] for a struct generic over its leaf type.
///
/// `leaves` are fields of type `P`, `nodes` are nested trees, `keep` are
/// plain `Clone` configuration fields copied through `map`.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),*], nodes: [$($node:ident),*], keep: [$($keep:ident),*] }) => {
        impl<P> $crate::params::ParamTree<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            #[allow(unused_variables)]
            fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($node: $crate::params::ParamTree::map(&self.$node, f),)*
                    $($keep: self.$keep.clone(),)*
                }
            }

            #[allow(unused_variables)]
            fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &P)) {
                $(f(&format!("{prefix}.{}", stringify!($leaf)), &self.$leaf);)*
                $($crate::params::ParamTree::visit(
                    &self.$node,
                    &format!("{prefix}.{}", stringify!($node)),
                    f,
                );)*
            }

            #[allow(unused_variables)]
            fn visit_mut(&mut self, f: &mut impl FnMut(&mut P)) {
                $(f(&mut self.$leaf);)*
                $($crate::params::ParamTree::visit_mut(&mut self.$node, f);)*
            }
        }
    };
}
pub(crate) use param_tree;

/// Registers every tensor of `tree` as a trainable leaf.
pub fn bind<T: Scalar, X: ParamTree<Tensor<T>>>(tree: &X, tape: &Tape<T>) -> X::Mapped<Var> {
    tree.map(&mut |t| tape.param(t.clone()))
}

/// Registers every tensor of `tree` as a constant.
pub fn bind_constant<T: Scalar, X: ParamTree<Tensor<T>>>(
    tree: &X,
    tape: &Tape<T>,
) -> X::Mapped<Var> {
    tree.map(&mut |t| tape.constant(t.clone()))
}

/// Gradient tree matching a bound tree.
pub fn gradients<T: Scalar, X: ParamTree<Var>>(
    bound: &X,
    grads: &Gradients<T>,
) -> X::Mapped<Tensor<T>> {
    bound.map(&mut |v| grads.get(*v))
}

pub fn flatten<T: Scalar, X: ParamTree<Tensor<T>>>(tree: &X) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    tree.visit("", &mut |_, t| out.push(t.clone()));
    out
}

/// Overwrites the leaves of `tree` in visit order; shapes must match.
pub fn unflatten<T: Scalar, X: ParamTree<Tensor<T>>>(
    tree: &mut X,
    values: &[Tensor<T>],
) -> Result<()> {
    let mut count = 0;
    let mut err = None;
    tree.visit_mut(&mut |t| {
        if let Some(v) = values.get(count) {
            if v.shape() == t.shape() {
                *t = v.clone();
            } else if err.is_none() {
                err = Some(Error::shape("unflatten", t.shape(), v.shape()));
            }
        }
        count += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if count != values.len() {
        return Err(Error::Precondition(format!(
            "expected {count} tensors, got {}",
            values.len()
        )));
    }
    Ok(())
}

/// Leaf names in visit order, e.g. `d2m.attn_2d.w_q`.
pub fn names<P, X: ParamTree<P>>(tree: &X, root: &str) -> Vec<String> {
    let mut out = Vec::new();
    tree.visit(root, &mut |name, _| out.push(name.to_string()));
    out
}

pub fn count<T: Scalar, X: ParamTree<Tensor<T>>>(tree: &X) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.len());
    n
}

/// Seeded `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` draws.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}
