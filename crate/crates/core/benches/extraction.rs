use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use steervec::extract::{extract, ExtractionHyper};
use steervec::harness::par;
use steervec::model::{InjectionSite, InjectionSpec, ModelConfig, ModelWeights, Timesteps};

const SENTENCES: [&str; 8] = [
    "The tea was cold.",
    "A cat sat on the mat.",
    "Rain fell all night.",
    "She closed the door.",
    "The road was long.",
    "Birds sang at dawn.",
    "He read the letter twice.",
    "The lamp was still on.",
];

fn setup() -> (ModelWeights<f32>, InjectionSpec, ExtractionHyper) {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_positions: 64,
        ..ModelConfig::default()
    };
    let w = ModelWeights::<f32>::init(&cfg).unwrap();
    let spec = InjectionSpec::single(InjectionSite::AfterSelfAttn(1), Timesteps::All, 32);
    let hyper = ExtractionHyper {
        max_steps: 10,
        early_stop_check_every: 0,
        ..ExtractionHyper::for_spec(&spec, 0)
    };
    (w, spec, hyper)
}

fn bench_extraction(c: &mut Criterion) {
    let (w, spec, hyper) = setup();
    let jobs: Vec<String> = SENTENCES.iter().map(|s| s.to_string()).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut g = c.benchmark_group("extract_8_sentences");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", 1), |b| {
        b.iter(|| {
            par::map_sequential(&jobs, |s| extract(&w, s, &spec, &hyper).unwrap().final_loss)
        })
    });
    g.bench_function(BenchmarkId::new("parallel", threads), |b| {
        b.iter(|| {
            par::with_workers(threads, || {
                par::map(&jobs, |s| extract(&w, s, &spec, &hyper).unwrap().final_loss)
            })
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_extraction);
criterion_main!(benches);
