// temporary profiling probe: times graph phases op by op
use sif::datagen::{behavior_sequence, generate_log};
use sif::graph::Graph;
use sif::mixer::{MixerState, Variant};
use sif::model::{build, Example, HistorySource, LossWeights, RouteFlags};
use sif::schema::load_schema;
use sif::tokenizer::TokenizerState;
use std::time::Instant;

fn main() {
    let schema = load_schema(std::path::Path::new("configs/desk_schema.toml")).unwrap();
    let log = generate_log(&schema, 100, 2000, 6000, 7, 1.0);
    let tok = TokenizerState::init(&schema, 1).unwrap();
    let mix = MixerState::init(&schema, 2, 2, 2, 32, Variant::parse("full").unwrap()).unwrap();
    let idx: Vec<usize> = (5900..5964).collect();
    let batch: Vec<Example> = idx
        .iter()
        .map(|&i| {
            let s = &log.samples[i];
            Example {
                target: s,
                history: HistorySource::Raw(behavior_sequence(&log, s.sample_id, 32).unwrap()),
                label: s.label,
            }
        })
        .collect();
    for phase in ["fwd_only", "fwd_bwd"] {
        let n = 10;
        let t0 = Instant::now();
        for _ in 0..n {
            let mut g = Graph::new();
            let (_, io) = build(
                &mut g, &schema, &tok, &mix, &batch, 32,
                &LossWeights::default(), &RouteFlags::default(), true,
            )
            .unwrap();
            if phase == "fwd_bwd" {
                let grads = g.backward(io.loss);
                std::hint::black_box(&grads);
            }
            std::hint::black_box(g.value(io.loss));
        }
        println!("{}: {:?}/step", phase, t0.elapsed() / n);
    }
}
