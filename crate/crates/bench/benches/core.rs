use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use m2cl_bench::Workload;
use m2cl_core::context::{select_initial_contexts, SelectionMode};
use m2cl_core::evolution::{evolve_step, DualState, InstructionGenerator};

fn activation(c: &mut Criterion) {
    let w = Workload::new(512, 8, 100);
    c.bench_function("activation_d512_4agents", |b| {
        b.iter(|| w.block.activation(black_box(&w.pool_embeddings.tokens[0]), &w.peers, &w.problem).unwrap())
    });
}

fn selection(c: &mut Criterion) {
    let w = Workload::new(512, 8, 100);
    c.bench_function("greedy_selection_m100_n4", |b| {
        b.iter(|| {
            select_initial_contexts(&w.pool, &w.pool_embeddings, &w.problem, &w.problem_vector, &w.projector, 4, SelectionMode::Greedy).unwrap()
        })
    });
}

fn evolve(c: &mut Criterion) {
    let w = Workload::new(512, 8, 100);
    let inputs = w.evolve_inputs();
    let mut gen = InstructionGenerator::new(0, 512, 8);
    let mut dual = DualState::new(1.0).unwrap();
    c.bench_function("evolve_step_d512", |b| {
        b.iter(|| evolve_step(&w.block, &mut gen, &mut dual, black_box(&inputs), 1e-4, 1e-4).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = activation, selection, evolve
}
criterion_main!(benches);
