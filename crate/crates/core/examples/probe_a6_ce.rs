// CE baseline scan for the 784-dim 10-class analogue
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};

fn main() {
    let props = vec![0.1f64; 10];
    for sep in [0.6, 0.7, 0.75, 0.8, 0.9] {
        let ds = dlf_core::synth_blobs(7000, 10, 784, sep, &props, 4242).unwrap();
        let (train, _dev, test) = dlf_core::split(&ds, (5000, 1000, 1000), 7).unwrap();
        let cfg = MetaConfig {
            t_steps: 500, batch_size: 20,
            eta: EtaSchedule::Constant(0.01),
            teacher_steps: 0,
            student_hidden: vec![64],
            student_seed: 1, batch_seed: 2,
            train_acc_subsample: 512,
            dev_grad_subsample: None,
            vary_inner_seeds: true,
            teacher: TeacherConfig::default(),
        };
        let t0 = std::time::Instant::now();
        let ce = train_student(None, &train, None, &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
        let acc = accuracy(&predict(&ce.forward_probs(test.inputs()).unwrap()).unwrap(), test.labels()).unwrap();
        println!("sep={sep}: ce_test_err={:.2}% ({:.1}s)", (1.0 - acc) * 100.0, t0.elapsed().as_secs_f64());
    }
}
