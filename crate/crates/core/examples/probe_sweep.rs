// systematic sweep for the imbalanced criterion
use dlf_core::meta::*;
use dlf_core::student::{accuracy, predict, LossSpec};
use dlf_core::teacher::AdamHyper;

fn trial(sep: f64, alpha: f64, t_steps: usize, eta: f64, batch: usize, s: u64) -> (f64, f64, f64, f64) {
    let ds = dlf_core::synth_blobs(900, 2, 2, sep, &[0.8, 0.2], 9000 + s).unwrap();
    let (train, dev, _) = dlf_core::split(&ds, (640, 260, 0), 100 + s).unwrap();
    let cfg = MetaConfig {
        t_steps, batch_size: batch,
        eta: EtaSchedule::Constant(eta),
        teacher_steps: 20,
        student_hidden: vec![8],
        student_seed: 50 + s, batch_seed: 70 + s,
        train_acc_subsample: 256,
        dev_grad_subsample: None,
        vary_inner_seeds: true,
        teacher: TeacherConfig { n_keys: 2, init_seed: 30 + s, adam: AdamHyper { alpha, ..AdamHyper::default() } },
    };
    let (teacher, history) = train_teacher(&cfg, &train, &dev, &LossSpec::Bilinear).unwrap();
    let taught = train_student(Some(&teacher), &train, Some(&dev), &cfg, &LossSpec::Bilinear, 0.0).unwrap();
    let ce = train_student(None, &train, Some(&dev), &cfg, &LossSpec::CrossEntropy, 0.0).unwrap();
    let ta = accuracy(&predict(&taught.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
    let ca = accuracy(&predict(&ce.forward_probs(dev.inputs()).unwrap()).unwrap(), dev.labels()).unwrap();
    (ta, ca, history[0].dev_smoothed_metric, history.last().unwrap().dev_smoothed_metric)
}

fn main() {
    for (sep, alpha, t, eta, batch) in [
        (2.0, 0.05, 200, 0.25, 16),
        (2.5, 0.05, 200, 0.25, 16),
        (3.0, 0.05, 200, 0.25, 16),
        (3.5, 0.05, 200, 0.25, 16),
        (4.0, 0.05, 200, 0.25, 16),
        (5.0, 0.05, 200, 0.25, 16),
    ] {
        let mut aw = 0; let mut mw = 0;
        let mut ces = vec![]; let mut tas = vec![];
        for s in 0..5 {
            let (ta, ca, m0, mt) = trial(sep, alpha, t, eta, batch, s);
            if ta >= ca { aw += 1; }
            if mt >= m0 { mw += 1; }
            ces.push(ca); tas.push(ta);
        }
        let mce = ces.iter().sum::<f64>() / 5.0;
        let mta = tas.iter().sum::<f64>() / 5.0;
        println!("sep={sep} a={alpha} T={t} eta={eta} b={batch}: acc_wins={aw}/5 m_wins={mw}/5 mean_ce={mce:.3} mean_taught={mta:.3}");
    }
}
