use mdcc_core::config::RunConfig;
use mdcc_core::data::{synth_generate, SynthParams};
use mdcc_core::eval::StreamSchedule;
use mdcc_core::openmax::{train_root, Decision};
use mdcc_core::cascade::Instance;

fn main() {
    let ds = synth_generate(&SynthParams {
        num_classes: 4, dim: 8, separation: 8.0,
        per_class_train: 60, per_class_test: 20, seed: 31,
    }).unwrap();
    let config = RunConfig {
        batch_size: 20, root_iters: 1200, leaf_iters: 250,
        buffer_capacity: 60, reference_capacity: 80,
        hidden_layers: vec![16], theta: 0.2, seed: 5,
        ..RunConfig::default()
    };
    let schedule = StreamSchedule::from_config(&ds, &config).unwrap();
    let root_train: Vec<Instance> = ds.train()
        .filter(|x| x.label.is_some_and(|l| schedule.initial_known.contains(&l)))
        .cloned().collect();
    let root = match train_root(&root_train, &config) { Ok(r) => r, Err(e) => { eprintln!("train_root error: {e}"); return; } };
    println!("train acc {}", root.train_accuracy);
    for class in [1u32, 2, 3, 4] {
        let mut acc = 0; let mut rej = 0; let mut total = 0;
        for x in ds.train() {
            if x.label == Some(class) {
                total += 1;
                match root.decide(&x.features).unwrap() {
                    Decision::Accept(_) => acc += 1,
                    Decision::Reject => rej += 1,
                }
            }
        }
        println!("class {class}: accepted {acc} rejected {rej} / {total}");
        // sample openmax scores for 3 instances
        for x in ds.train().filter(|x| x.label == Some(class)).take(2) {
            let s = root.openmax_scores(&x.features).unwrap();
            let v = root.activation_vector(&x.features).unwrap();
            println!("  v={v:?} P(unk)={:.5}", s[0]);
        }
    }
}
