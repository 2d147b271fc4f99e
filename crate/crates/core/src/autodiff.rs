//! A small tape-based reverse-mode differentiator.
//!
//! The policy's forward pass is written once, generically over [`Scalar`].
//! With `f64` it is a plain evaluation; with [`Var`] every operation is
//! recorded on a [`Tape`] together with its local partial derivatives, and
//! [`Tape::gradient`] sweeps the tape backwards once.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic the policy needs from its number type.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// A constant living in the same context as `self`.
    fn lift(&self, v: f64) -> Self;
    fn value(&self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// Larger of the two operands; the derivative follows the selected branch.
    fn max(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }
}

impl Scalar for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [(u32, f64); 2],
    arity: u8,
}

/// Wengert list of recorded operations.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient will be reported by [`Tape::gradient`].
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [(0, 0.0); 2], 0)
    }

    fn push(&self, val: f64, parents: [(u32, f64); 2], arity: u8) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { parents, arity });
        Var { tape: self, idx, val }
    }

    fn unary(&self, a: Var<'_>, val: f64, da: f64) -> Var<'_> {
        self.push(val, [(a.idx, da), (0, 0.0)], 1)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, val: f64, da: f64, db: f64) -> Var<'_> {
        self.push(val, [(a.idx, da), (b.idx, db)], 2)
    }

    /// Adjoints of every recorded node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            for &(p, d) in &node.parents[..node.arity as usize] {
                adj[p as usize] += g * d;
            }
        }
        adj
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.tape.binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.tape.binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.tape.binary(self, rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.tape.unary(self, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val + rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val * rhs, rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn lift(&self, v: f64) -> Self {
        self.tape.var(v)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn tanh(self) -> Self {
        let t = libm::tanh(self.val);
        self.tape.unary(self, t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = libm::exp(self.val);
        self.tape.unary(self, e, e)
    }
    fn ln(self) -> Self {
        self.tape.unary(self, libm::log(self.val), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.val);
        self.tape.unary(self, s, 0.5 / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Scalar>(x: S, y: S) -> S {
        (x * y + x.tanh()).exp().ln() / (y * y + 1.0).sqrt() - x.max(y) * 3.0
    }

    #[test]
    fn matches_finite_differences() {
        let (x0, y0) = (0.3, -1.2);
        let tape = Tape::new();
        let (x, y) = (tape.var(x0), tape.var(y0));
        let out = f(x, y);
        assert!((out.value() - f(x0, y0)).abs() < 1e-15);
        let g = tape.gradient(out);
        let h = 1e-6;
        let dx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let dy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g[x.index()] - dx).abs() < 1e-8);
        assert!((g[y.index()] - dy).abs() < 1e-8);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(2.0);
        let b = tape.var(5.0);
        let out = a * a;
        let g = tape.gradient(out);
        assert_eq!(g[a.index()], 4.0);
        assert_eq!(g[b.index()], 0.0);
    }
}
