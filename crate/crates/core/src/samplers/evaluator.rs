use crate::diffusion::{NoiseSchedule, ToyDistribution};
use crate::error::Result;
use crate::net::{self, LoRAAdapter, Parameters};
use crate::tensor::Tensor;

/// Anything that maps `(x, t)` to a noise prediction, batched over rows.
///
/// Evaluators are deterministic for fixed inputs; the only exception is an
/// explicitly perturbed wrapper, which is deterministic given its seed and
/// call sequence (hence `&mut self`).
pub trait DirectionalEvaluator {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<E: DirectionalEvaluator + ?Sized> DirectionalEvaluator for &mut E {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        (**self).evaluate(x, t)
    }
}

impl<E: DirectionalEvaluator + ?Sized> DirectionalEvaluator for Box<E> {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        (**self).evaluate(x, t)
    }
}

/// Closed-form optimal predictor of a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct AnalyticEvaluator {
    pub dist: ToyDistribution,
    pub schedule: NoiseSchedule,
}

impl AnalyticEvaluator {
    pub fn new(dist: ToyDistribution, schedule: NoiseSchedule) -> Self {
        Self { dist, schedule }
    }
}

impl DirectionalEvaluator for AnalyticEvaluator {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.dist.analytic_epsilon(&self.schedule, x, t)
    }
}

/// Full-precision network, optionally with an adapter merged in.
#[derive(Debug, Clone, Copy)]
pub struct NetEvaluator<'a> {
    pub params: &'a Parameters,
    pub adapter: Option<&'a LoRAAdapter>,
}

impl<'a> NetEvaluator<'a> {
    pub fn new(params: &'a Parameters) -> Self {
        Self {
            params,
            adapter: None,
        }
    }
}

impl DirectionalEvaluator for NetEvaluator<'_> {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        net::forward(self.params, self.adapter, x, t)
    }
}

/// Wraps a closure; handy for synthetic directions in tests and studies.
pub struct FnEvaluator<F>(pub F);

impl<F> DirectionalEvaluator for FnEvaluator<F>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        (self.0)(x, t)
    }
}

/// Counts evaluations of an inner evaluator.
pub struct Counting<E> {
    pub inner: E,
    pub calls: usize,
}

impl<E> Counting<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: 0 }
    }
}

impl<E: DirectionalEvaluator> DirectionalEvaluator for Counting<E> {
    fn evaluate(&mut self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.calls += 1;
        self.inner.evaluate(x, t)
    }
}
