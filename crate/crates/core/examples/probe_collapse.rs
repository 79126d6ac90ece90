// can identity-Phi bilinear training avoid majority collapse on 80/20 blobs?
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::{TeacherFamily, TeacherParams};

fn main() {
    for (batch, eta, t_steps, sep) in [
        (32usize, 0.3, 600usize, 1.0),
        (32, 1.0, 600, 1.0),
        (64, 1.0, 1000, 1.0),
        (32, 1.0, 600, 1.3),
        (8, 1.0, 600, 1.3),
        (64, 2.0, 1500, 1.3),
    ] {
        let ds = dlf_core::synth_blobs(900, 2, 2, sep, &[0.8, 0.2], 9000).unwrap();
        let (train, dev, _) = dlf_core::split(&ds, (640, 260, 0), 100).unwrap();
        let teacher = TeacherParams::init(TeacherFamily::Full, 2, 5, 2, 30).unwrap();
        let cfg = MetaConfig {
            t_steps, batch_size: batch,
            eta: EtaSchedule::Constant(eta),
            teacher_steps: 0,
            student_hidden: vec![8],
            student_seed: 50, batch_seed: 70,
            train_acc_subsample: 256,
            dev_grad_subsample: None,
            vary_inner_seeds: true,
            teacher: TeacherConfig::default(),
        };
        let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0).unwrap();
        let ce = train_student(None, &train, Some(&dev), &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
        let preds = predict(&taught.forward_probs(dev.inputs()).unwrap()).unwrap();
        let ta = accuracy(&preds, dev.labels()).unwrap();
        let minority_preds = preds.iter().filter(|&&p| p == 1).count();
        let ca = accuracy(&predict(&ce.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
        println!("batch={batch} eta={eta} T={t_steps} sep={sep}: phiI_acc={ta:.4} (minority preds {minority_preds}) ce={ca:.4}");
    }
}
