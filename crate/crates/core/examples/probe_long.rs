// long teacher-optimization probe: does m~ ever exceed the all-majority bound?
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::AdamHyper;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args[1].parse().unwrap();
    let alpha: f64 = args[2].parse().unwrap();
    let t_steps: usize = args[3].parse().unwrap();
    let eta: f64 = args[4].parse().unwrap();
    let teacher_steps: usize = args[5].parse().unwrap();

    let ds = dlf_core::synth_blobs(900, 2, 2, sep, &[0.8, 0.2], 9000).unwrap();
    let (train, dev, _) = dlf_core::split(&ds, (640, 260, 0), 100).unwrap();
    let majority = dev.labels().iter().filter(|&&l| l == 0).count() as f64 / dev.len() as f64;
    let cfg = MetaConfig {
        t_steps, batch_size: 8,
        eta: EtaSchedule::Constant(eta),
        teacher_steps,
        student_hidden: vec![8],
        student_seed: 50, batch_seed: 70,
        train_acc_subsample: 256,
        dev_grad_subsample: None,
        vary_inner_seeds: true,
        teacher: TeacherConfig { n_keys: 2, init_seed: 30, adam: AdamHyper { alpha, ..AdamHyper::default() } },
    };
    let (teacher, history) = train_teacher(&cfg, &train, &dev, &LossSpec::Bilinear).unwrap();
    println!("majority share: {majority:.4}");
    for r in history.iter().step_by(10.max(teacher_steps/20)) {
        println!("  step {:3}: m={:.4} acc={:.4} |d|={:.2e}", r.step, r.dev_smoothed_metric, r.dev_accuracy, r.grad_norm);
    }
    let last = history.last().unwrap();
    println!("  final:  m={:.4} acc={:.4}", last.dev_smoothed_metric, last.dev_accuracy);
    let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0).unwrap();
    let ce = train_student(None, &train, Some(&dev), &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
    let ta = accuracy(&predict(&taught.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
    let ca = accuracy(&predict(&ce.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
    println!("taught={ta:.4} ce={ca:.4}");
}
