// scratch probe for the imbalanced-blobs teaching criterion
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::AdamHyper;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let alpha: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let t_steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(150);
    let eta: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let vary: bool = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(true);

    let mut wins_acc = 0;
    let mut wins_metric = 0;
    let start = std::time::Instant::now();
    for s in 0..5u64 {
        let ds = dlf_core::synth_blobs(900, 2, 2, sep, &[0.8, 0.2], 9000 + s).unwrap();
        let (train, dev, _) = dlf_core::split(&ds, (640, 260, 0), 100 + s).unwrap();
        let cfg = MetaConfig {
            t_steps,
            batch_size: 8,
            eta: EtaSchedule::Constant(eta),
            teacher_steps: 20,
            student_hidden: vec![8],
            student_seed: 50 + s,
            batch_seed: 70 + s,
            train_acc_subsample: 256,
            dev_grad_subsample: None,
            vary_inner_seeds: vary,
            teacher: TeacherConfig {
                n_keys: 2,
                init_seed: 30 + s,
                adam: AdamHyper { alpha, ..AdamHyper::default() },
            },
        };
        let (teacher, history) = train_teacher(&cfg, &train, &dev, &LossSpec::Bilinear).unwrap();
        let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0).unwrap();
        let ce = train_student(None, &train, Some(&dev), &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
        let ta = accuracy(&predict(&taught.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
        let ca = accuracy(&predict(&ce.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
        let m0 = history[0].dev_smoothed_metric;
        let mt = history.last().unwrap().dev_smoothed_metric;
        if ta >= ca { wins_acc += 1; }
        if mt >= m0 { wins_metric += 1; }
        println!("  seed {s}: taught={ta:.4} ce={ca:.4} | m0={m0:.4} mT={mt:.4} | gnorm0={:.3e}", history[0].grad_norm);
    }
    println!("sep={sep} alpha={alpha} T={t_steps} eta={eta} vary={vary}: acc_wins={wins_acc}/5 metric_wins={wins_metric}/5 ({:.1}s)", start.elapsed().as_secs_f64());
}
