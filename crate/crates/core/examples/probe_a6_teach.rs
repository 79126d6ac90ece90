// full teacher training on the 784-dim analogue
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::AdamHyper;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args[1].parse().unwrap();
    let alpha: f64 = args[2].parse().unwrap();
    let steps: usize = args[3].parse().unwrap();
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let props = vec![0.1f64; 10];
    let ds = dlf_core::synth_blobs(7000, 10, 784, sep, &props, 4242).unwrap();
    let (train, dev, test) = dlf_core::split(&ds, (5000, 1000, 1000), 7).unwrap();
    let cfg = MetaConfig {
        t_steps: 500, batch_size: 20,
        eta: EtaSchedule::Constant(0.01),
        teacher_steps: steps,
        student_hidden: vec![64],
        student_seed: 100 + seed, batch_seed: 200 + seed,
        train_acc_subsample: 512,
        dev_grad_subsample: None,
        vary_inner_seeds: args.get(5).map(|s| s.parse().unwrap()).unwrap_or(true),
        teacher: TeacherConfig { n_keys: 10, init_seed: 300 + seed, adam: AdamHyper { alpha, ..AdamHyper::default() } },
    };
    let t0 = std::time::Instant::now();
    let (teacher, history) = train_teacher(&cfg, &train, &dev, &LossSpec::Bilinear).unwrap();
    for r in &history {
        println!("  step {:2}: m={:.4} acc={:.4} |d|={:.2e}", r.step, r.dev_smoothed_metric, r.dev_accuracy, r.grad_norm);
    }
    let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0).unwrap();
    let ce = train_student(None, &train, None, &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
    let te = 100.0 * (1.0 - accuracy(&predict(&taught.forward_probs(test.inputs()).unwrap()).unwrap(), test.labels()).unwrap());
    let ce_e = 100.0 * (1.0 - accuracy(&predict(&ce.forward_probs(test.inputs()).unwrap()).unwrap(), test.labels()).unwrap());
    println!("sep={sep} alpha={alpha} steps={steps} seed={seed}: taught_err={te:.2}% ce_err={ce_e:.2}% ({:.0}s)", t0.elapsed().as_secs_f64());
}
