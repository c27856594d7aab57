use std::ffi::{CStr, CString};
use std::ptr;

use medvr_ffi::*;

const CONFIG: &str = "
[run]
seed = 5
[evr]
m_rollouts = 4
[grpo]
iterations = 2
batch_prompts = 2
learning_rate = 5.0
";

#[test]
fn trainer_runs_evaluates_and_checkpoints() {
    let text = CString::new(CONFIG).unwrap();
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(medvr_trainer_new(text.as_ptr(), &mut t), MedvrStatus::Ok);
        assert!(!medvr_trainer_is_done(t));
        let mut stats = MedvrIterationStats::default();
        assert_eq!(medvr_trainer_step(t, &mut stats), MedvrStatus::Ok);
        assert_eq!(stats.iteration, 0);
        assert_eq!(medvr_trainer_step(t, ptr::null_mut()), MedvrStatus::Ok);
        assert!(medvr_trainer_is_done(t));
        let mut m = MedvrEvalMetrics::default();
        assert_eq!(medvr_trainer_evaluate(t, 8, &mut m), MedvrStatus::Ok);
        assert_eq!(m.n_tasks, 8);
        assert!((0.0..=1.0).contains(&m.accuracy));
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("ck.json").to_str().unwrap()).unwrap();
        assert_eq!(medvr_trainer_save_checkpoint(t, path.as_ptr()), MedvrStatus::Ok);
        assert!(dir.path().join("ck.json").exists());
        medvr_trainer_free(t);
    }
}

#[test]
fn bad_config_reports_key() {
    let text = CString::new("[grpo]\niterations = 1\nbatch_prompts = 1\n").unwrap();
    let mut t = ptr::null_mut();
    let s = unsafe { medvr_trainer_new(text.as_ptr(), &mut t) };
    assert_eq!(s, MedvrStatus::ErrConfig);
    assert!(t.is_null());
    let msg = unsafe { CStr::from_ptr(medvr_last_error()) }.to_string_lossy().into_owned();
    assert!(msg.contains("evr.m_rollouts"), "{msg}");
}
