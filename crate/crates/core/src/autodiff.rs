//! Minimal scalar reverse-mode automatic differentiation.
//!
//! Used as an independent second route for gradients: the objectives compute
//! their gradients analytically, and the tape rebuilds the same losses node
//! by node so the two can be compared.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug)]
struct Node {
    parents: Vec<(usize, f64)>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: f64, parents: Vec<(usize, f64)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents });
        Var {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    /// A differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, Vec::new())
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(value, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value).sum();
        self.push(value, xs.iter().map(|x| (x.index, 1.0)).collect())
    }

    /// Max-shifted `log Σ exp(x_i)` with softmax partials.
    pub fn logsumexp<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let max = xs.iter().map(|x| x.value).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xs.iter().map(|x| (x.value - max).exp()).sum();
        let value = max + sum.ln();
        self.push(value, xs.iter().map(|x| (x.index, (x.value - value).exp())).collect())
    }

    /// `∂output/∂node` for every node on the tape.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            for &(p, partial) in &nodes[i].parents {
                adjoint[p] += a * partial;
            }
        }
        adjoint
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value.exp();
        self.tape.push(v, vec![(self.index, v)])
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.push(self.value.ln(), vec![(self.index, 1.0 / self.value)])
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value.tanh();
        self.tape.push(v, vec![(self.index, 1.0 - v * v)])
    }

    pub fn square(self) -> Var<'t> {
        self.tape
            .push(self.value * self.value, vec![(self.index, 2.0 * self.value)])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.push(self.value * c, vec![(self.index, c)])
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.push(self.value + c, vec![(self.index, 1.0)])
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value + rhs.value, vec![(self.index, 1.0), (rhs.index, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value - rhs.value, vec![(self.index, 1.0), (rhs.index, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value * rhs.value,
            vec![(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
