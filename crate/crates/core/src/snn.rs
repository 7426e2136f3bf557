//! Leaky integrate-and-fire workload executed by neurocores.
//!
//! Each step every neuron leaks, integrates the weights of the input spikes
//! it receives, and fires (then resets) when it reaches threshold. Steps are
//! synchronous; the whole core updates from the same input batch.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::sim::{Engine, SimTime, StreamId, TracePayload};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid LIF parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub v_thresh: f64,
    pub v_reset: f64,
    /// Multiplicative decay applied every step, in `(0, 1]`.
    pub leak: f64,
    pub dt_ticks: SimTime,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            v_thresh: 1.0,
            v_reset: 0.0,
            leak: 0.9,
            dt_ticks: SimTime::from_micros(1),
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<(), SnnError> {
        if self.v_reset.is_nan() || self.v_thresh.is_nan() || self.v_reset >= self.v_thresh {
            return Err(SnnError::InvalidParams("v_reset must be below v_thresh".into()));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(SnnError::InvalidParams("leak must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Membrane potentials and the dense `inputs x neurons` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreState {
    pub potentials: Vec<f64>,
    /// `weights[i][j]` couples input `i` to neuron `j`.
    pub weights: Vec<Vec<f64>>,
}

impl CoreState {
    pub fn new(neurons: usize, weights: Vec<Vec<f64>>) -> Result<Self, SnnError> {
        if let Some((i, row)) = weights.iter().enumerate().find(|(_, r)| r.len() != neurons) {
            return Err(SnnError::DimensionMismatch(format!(
                "weight row {i} has {} entries, expected {neurons}",
                row.len()
            )));
        }
        Ok(CoreState {
            potentials: vec![0.0; neurons],
            weights,
        })
    }

    /// Weights drawn uniformly from `[-0.5, 0.5)` on the weight stream.
    pub fn seeded<E: TracePayload>(engine: &mut Engine<E>, inputs: usize, neurons: usize) -> Self {
        let weights = (0..inputs)
            .map(|_| {
                (0..neurons)
                    .map(|_| engine.rng_next(StreamId::SNN_WEIGHTS) - 0.5)
                    .collect()
            })
            .collect();
        CoreState {
            potentials: vec![0.0; neurons],
            weights,
        }
    }

    pub fn neurons(&self) -> usize {
        self.potentials.len()
    }

    pub fn inputs(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeBatch {
    pub step_index: u64,
    pub spiking: BTreeSet<u32>,
}

impl SpikeBatch {
    pub fn new(step_index: u64, ids: impl IntoIterator<Item = u32>) -> Self {
        SpikeBatch {
            step_index,
            spiking: ids.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.spiking.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spiking.is_empty()
    }
}

/// Advances `state` by one synchronous step and returns the neurons that
/// fired. The output batch carries the input's step index.
pub fn step_core(
    state: &mut CoreState,
    input: &SpikeBatch,
    params: &LifParams,
) -> Result<SpikeBatch, SnnError> {
    params.validate()?;
    if let Some(&bad) = input.spiking.iter().find(|&&i| i as usize >= state.inputs()) {
        return Err(SnnError::DimensionMismatch(format!(
            "input spike {bad} out of range for {} inputs",
            state.inputs()
        )));
    }
    let n = state.neurons();
    if state.weights.iter().any(|row| row.len() != n) {
        return Err(SnnError::DimensionMismatch("ragged weight matrix".into()));
    }

    for v in state.potentials.iter_mut() {
        *v *= params.leak;
    }
    for &i in &input.spiking {
        for (v, w) in state.potentials.iter_mut().zip(&state.weights[i as usize]) {
            *v += w;
        }
    }
    let mut out = SpikeBatch::new(input.step_index, []);
    for (j, v) in state.potentials.iter_mut().enumerate() {
        if *v >= params.v_thresh {
            out.spiking.insert(j as u32);
            *v = params.v_reset;
        }
    }
    Ok(out)
}

/// Shape of a synthetic spiking task: `steps` synchronous steps, each with
/// `input_rate` input spikes that each fan out to `fan_in` neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskShape {
    pub steps: u64,
    pub input_rate: u64,
    pub fan_in: u64,
}

/// Synaptic operations a task performs: `steps * input_rate * fan_in`.
pub fn workload_cost(shape: TaskShape) -> u64 {
    shape.steps * shape.input_rate * shape.fan_in
}

/// A task's spiking workload in progress: a core sized to the task's fan-in
/// plus a running tally of ops and output spikes.
#[derive(Debug, Clone)]
pub struct Workload {
    pub shape: TaskShape,
    pub core: CoreState,
    pub params: LifParams,
    pub steps_done: u64,
    pub synaptic_ops: u64,
    pub spikes_out: u64,
}

impl Workload {
    /// Input channels per task. Each step draws `input_rate` distinct ones.
    pub fn input_channels(shape: &TaskShape) -> usize {
        (shape.input_rate * 2).max(1) as usize
    }

    pub fn new<E: TracePayload>(engine: &mut Engine<E>, shape: TaskShape, params: LifParams) -> Self {
        let core = CoreState::seeded(engine, Self::input_channels(&shape), shape.fan_in as usize);
        Workload {
            shape,
            core,
            params,
            steps_done: 0,
            synaptic_ops: 0,
            spikes_out: 0,
        }
    }

    pub fn remaining_steps(&self) -> u64 {
        self.shape.steps - self.steps_done
    }

    /// Runs the next step with a seeded input batch.
    pub fn step<E: TracePayload>(&mut self, engine: &mut Engine<E>) -> SpikeBatch {
        let channels = self.core.inputs() as u64;
        let want = self.shape.input_rate.min(channels);
        let mut ids = BTreeSet::new();
        while (ids.len() as u64) < want {
            ids.insert(engine.rng_below(StreamId::WORKLOAD, channels) as u32);
        }
        let input = SpikeBatch {
            step_index: self.steps_done,
            spiking: ids,
        };
        let out = step_core(&mut self.core, &input, &self.params).expect("well-formed workload");
        self.synaptic_ops += input.len() as u64 * self.core.neurons() as u64;
        self.spikes_out += out.len() as u64;
        self.steps_done += 1;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(leak: f64) -> LifParams {
        LifParams {
            v_thresh: 1.0,
            v_reset: 0.0,
            leak,
            dt_ticks: SimTime(1),
        }
    }

    #[test]
    fn zero_weights_never_spike() {
        let mut s = CoreState::new(4, vec![vec![0.0; 4]; 3]).unwrap();
        let out = step_core(&mut s, &SpikeBatch::new(0, [0, 1, 2]), &params(1.0)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_neuron_fires_at_threshold() {
        let mut s = CoreState::new(1, vec![vec![1.0]]).unwrap();
        let out = step_core(&mut s, &SpikeBatch::new(0, [0]), &params(1.0)).unwrap();
        assert_eq!(out.spiking, BTreeSet::from([0]));
        assert_eq!(s.potentials, vec![0.0]);
    }

    #[test]
    fn two_step_accumulation() {
        let mut s = CoreState::new(1, vec![vec![0.6]]).unwrap();
        let p = params(1.0);
        let first = step_core(&mut s, &SpikeBatch::new(0, [0]), &p).unwrap();
        assert!(first.is_empty());
        assert_eq!(s.potentials, vec![0.6]);
        let second = step_core(&mut s, &SpikeBatch::new(1, [0]), &p).unwrap();
        assert_eq!(second.spiking, BTreeSet::from([0]));
        assert_eq!(s.potentials, vec![0.0]);
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let mut s = CoreState::new(2, vec![vec![0.0; 2]]).unwrap();
        let err = step_core(&mut s, &SpikeBatch::new(0, [1]), &params(1.0)).unwrap_err();
        assert!(matches!(err, SnnError::DimensionMismatch(_)));
    }

    #[test]
    fn ragged_weights_are_rejected() {
        assert!(CoreState::new(2, vec![vec![0.0; 3]]).is_err());
    }

    #[test]
    fn bad_params_are_rejected() {
        let mut s = CoreState::new(1, vec![vec![0.0]]).unwrap();
        let bad = LifParams {
            v_reset: 2.0,
            ..params(1.0)
        };
        assert!(step_core(&mut s, &SpikeBatch::default(), &bad).is_err());
        let bad = params(0.0);
        assert!(step_core(&mut s, &SpikeBatch::default(), &bad).is_err());
    }

    #[test]
    fn workload_cost_examples() {
        let cost = |steps, input_rate, fan_in| {
            workload_cost(TaskShape {
                steps,
                input_rate,
                fan_in,
            })
        };
        assert_eq!(cost(1, 1, 1), 1);
        assert_eq!(cost(100, 8, 256), 204_800);
        assert_eq!(cost(0, 8, 256), 0);
    }

    #[derive(Debug, Clone)]
    struct Nop;
    impl TracePayload for Nop {
        fn kind(&self) -> &'static str {
            "Nop"
        }
        fn detail(&self) -> String {
            String::new()
        }
    }

    #[test]
    fn workload_counts_exact_synaptic_ops() {
        let mut engine: Engine<Nop> = Engine::new(3);
        let shape = TaskShape {
            steps: 100,
            input_rate: 8,
            fan_in: 256,
        };
        let mut w = Workload::new(&mut engine, shape, LifParams::default());
        while w.remaining_steps() > 0 {
            w.step(&mut engine);
        }
        assert_eq!(w.synaptic_ops, workload_cost(shape));
    }

    proptest! {
        #[test]
        fn reset_discipline_and_purity(
            seed in any::<u64>(),
            neurons in 1usize..16,
            inputs in 1usize..8,
            leak in 0.05f64..=1.0,
            steps in 1usize..20,
        ) {
            let mut engine: Engine<Nop> = Engine::new(seed);
            let mut state = CoreState::seeded(&mut engine, inputs, neurons);
            // Scale weights up so that spikes actually happen.
            for row in state.weights.iter_mut() {
                for w in row.iter_mut() {
                    *w *= 3.0;
                }
            }
            let p = params(leak);
            for k in 0..steps {
                let ids: Vec<u32> = (0..inputs as u32).filter(|i| (i + k as u32).is_multiple_of(2)).collect();
                let input = SpikeBatch::new(k as u64, ids);
                let mut twin = state.clone();
                let out = step_core(&mut state, &input, &p).unwrap();
                let twin_out = step_core(&mut twin, &input, &p).unwrap();
                prop_assert_eq!(&out, &twin_out);
                prop_assert_eq!(&state, &twin);
                prop_assert!(state.potentials.iter().all(|&v| v < p.v_thresh));
            }
        }

        #[test]
        fn zero_weight_runs_are_silent(neurons in 1usize..32, inputs in 1usize..8, steps in 1u64..50) {
            let mut state = CoreState::new(neurons, vec![vec![0.0; neurons]; inputs]).unwrap();
            let mut total = 0;
            for k in 0..steps {
                let input = SpikeBatch::new(k, 0..inputs as u32);
                total += step_core(&mut state, &input, &params(0.9)).unwrap().len();
            }
            prop_assert_eq!(total, 0);
        }
    }
}
