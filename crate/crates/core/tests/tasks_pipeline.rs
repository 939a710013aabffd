use gkm_core::bmo::{evaluate_phi_k_batch, train_batch, BmoConfig};
use gkm_core::tasks::deconv::gaussian_kernel;
use gkm_core::tasks::*;

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("gkm-tasks-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn sparse_coding_generation_is_seeded() {
    let a = gen_sparse_coding(16, 32, 4, 0.1, 0.1, 3).unwrap();
    let b = gen_sparse_coding(16, 32, 4, 0.1, 0.1, 3).unwrap();
    let c = gen_sparse_coding(16, 32, 4, 0.1, 0.1, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.b, c.b);
    assert_ne!(a.held_out(4).b, a.b);
}

#[test]
fn instances_survive_a_file_round_trip() {
    let dir = scratch("roundtrip");
    let sc = gen_sparse_coding(8, 12, 3, 0.2, 0.0, 1).unwrap();
    let path = dir.join("sc.bin");
    sc.to_container().write(&path).unwrap();
    assert_eq!(SparseCodingInstance::from_container(&Container::read(&path).unwrap()).unwrap(), sc);

    let dc = gen_deconv(16, 2, gaussian_kernel(5, 1.0).unwrap(), 2, 0.01, 2).unwrap();
    let path = dir.join("dc.bin");
    dc.to_container().write(&path).unwrap();
    assert_eq!(DeconvInstance::from_container(&Container::read(&path).unwrap()).unwrap(), dc);

    let sep = gen_separation(16, 2, 5).unwrap();
    let path = dir.join("sep.bin");
    sep.to_container().write(&path).unwrap();
    assert_eq!(SeparationInstance::from_container(&Container::read(&path).unwrap()).unwrap(), sep);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn corrupted_container_is_rejected() {
    let bytes = gen_separation(8, 1, 0).unwrap().to_container().encode();
    assert!(Container::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Container::decode(&extra).is_err());
    assert!(Container::decode(b"not a container").is_err());
}

#[test]
fn sparse_coding_training_reduces_feasibility_loss() {
    let inst = gen_sparse_coding(16, 32, 8, 0.1, 0.1, 0).unwrap();
    let task = build_sparse_coding_operator(&inst, &SparseCodingDefaults::default()).unwrap();
    let samples = task.samples(&inst).unwrap();
    let cfg = BmoConfig {
        alpha: 0.9,
        mu: 0.1,
        s: 0.5,
        s_relative: true,
        gamma: 2e-3,
        k: 10,
        t: 20,
        omega_bounds: Some(task.bounds.clone()),
        ..BmoConfig::default()
    };
    let before = evaluate_phi_k_batch(&samples, &task.omega, &cfg).unwrap();
    let rep = train_batch(&samples, &task.omega, &cfg).unwrap();
    assert!(rep.final_record().unwrap().phi_k < before);
    assert!(task.bounds.contains(rep.omega.values()));
}

#[test]
fn deconv_training_improves_reconstruction() {
    let inst = gen_deconv(16, 4, gaussian_kernel(5, 1.0).unwrap(), 2, 0.01, 1).unwrap();
    let task = build_deconv_operator(&inst, &NetSpec::identity(), &DeconvDefaults::default()).unwrap();
    let samples = task.samples(&inst).unwrap();
    let cfg = BmoConfig {
        s: 0.5,
        s_relative: true,
        gamma: 1e-2,
        k: 15,
        t: 15,
        omega_bounds: Some(task.bounds.clone()),
        ..BmoConfig::default()
    };
    let before = evaluate_phi_k_batch(&samples, &task.omega, &cfg).unwrap();
    let rep = train_batch(&samples, &task.omega, &cfg).unwrap();
    assert!(rep.final_record().unwrap().phi_k < before);
    let x = task.reconstruct(&rep.u_k[0]);
    assert!(psnr(x.as_slice(), inst.clean[0].as_slice(), 1.0).unwrap() > 10.0);
}

#[test]
fn separation_operator_runs_and_trains() {
    let inst = gen_separation(12, 2, 3).unwrap();
    let task = build_separation_operator(&inst, &SeparationDefaults::default()).unwrap();
    let samples = task.samples(&inst).unwrap();
    let cfg = BmoConfig {
        s: 0.5,
        s_relative: true,
        gamma: 1e-3,
        k: 10,
        t: 5,
        omega_bounds: Some(task.bounds.clone()),
        ..BmoConfig::default()
    };
    let rep = train_batch(&samples, &task.omega, &cfg).unwrap();
    let outer = &rep.trajectory.outer;
    assert!(outer.iter().all(|o| o.phi_k.is_finite()));
    assert!(outer.last().unwrap().phi_k <= outer[0].phi_k);
}
