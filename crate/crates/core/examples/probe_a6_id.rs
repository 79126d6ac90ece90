// identity-teacher bilinear vs CE on the 784-dim analogue
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::{TeacherFamily, TeacherParams};

fn main() {
    let props = vec![0.1f64; 10];
    for sep in [0.9, 0.95, 1.0, 1.1] {
        let ds = dlf_core::synth_blobs(7000, 10, 784, sep, &props, 4242).unwrap();
        let (train, dev, test) = dlf_core::split(&ds, (5000, 1000, 1000), 7).unwrap();
        let teacher = TeacherParams::init(TeacherFamily::Full, 10, 13, 10, 3).unwrap();
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
        let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0).unwrap();
        let ce = train_student(None, &train, None, &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
        let te = 100.0 * (1.0 - accuracy(&predict(&taught.forward_probs(test.inputs()).unwrap()).unwrap(), test.labels()).unwrap());
        let ce_e = 100.0 * (1.0 - accuracy(&predict(&ce.forward_probs(test.inputs()).unwrap()).unwrap(), test.labels()).unwrap());
        println!("sep={sep}: identity_taught_err={te:.2}% ce_err={ce_e:.2}% ({:.1}s)", t0.elapsed().as_secs_f64());
    }
}
