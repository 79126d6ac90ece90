// sanity: is the majority collapse imbalance-driven?
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::{TeacherFamily, TeacherParams};

fn main() {
    for (p_maj, sep) in [(0.5, 2.0), (0.6, 2.0), (0.7, 2.0), (0.8, 2.0)] {
        let ds = dlf_core::synth_blobs(900, 2, 2, sep, &[p_maj, 1.0 - p_maj], 9000).unwrap();
        let (train, dev, _) = dlf_core::split(&ds, (640, 260, 0), 100).unwrap();
        let teacher = TeacherParams::init(TeacherFamily::Full, 2, 5, 2, 30).unwrap();
        let cfg = MetaConfig {
            t_steps: 600, batch_size: 16,
            eta: EtaSchedule::Constant(0.5),
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
        let minority = preds.iter().filter(|&&p| p == 1).count();
        let ca = accuracy(&predict(&ce.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
        println!("majority={p_maj}: phiI_acc={ta:.4} minority_preds={minority} ce={ca:.4}");
    }
}
