use dualpl_core::numerics::norm;
use dualpl_core::selftrain::{component_variant, train, RunConfig, Trainer};
use dualpl_core::synthdata::{BenchmarkConfig, Shift};

fn small() -> RunConfig {
    let mut cfg = RunConfig {
        data: BenchmarkConfig {
            classes: 3,
            height: 24,
            width: 24,
            n_source: 12,
            n_target: 12,
            regions: 8,
            ..BenchmarkConfig::default()
        },
        bank_size: 12,
        iterations: 40,
        eval_interval: 10,
        ..RunConfig::desk()
    };
    cfg.policy.interval = 5;
    cfg
}

#[test]
fn zero_iterations_records_only_the_initial_row() {
    let mut cfg = small();
    cfg.iterations = 0;
    let data = cfg.data.generate().unwrap();
    let out = train(&cfg, &data).unwrap();
    assert_eq!(out.metrics.rows.len(), 1);
    let row = &out.metrics.rows[0];
    assert_eq!(row.iter, 0);
    assert!(row.l_src.is_none() && row.l_overall.is_none());
}

#[test]
fn rows_follow_eval_interval_and_final_iteration() {
    let mut cfg = small();
    cfg.iterations = 25;
    let data = cfg.data.generate().unwrap();
    let out = train(&cfg, &data).unwrap();
    let iters: Vec<usize> = out.metrics.rows.iter().map(|r| r.iter).collect();
    assert_eq!(iters, [0, 10, 20, 25]);
    assert!(out.metrics.rows[1..].iter().all(|r| r.l_ins.is_some()));
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let cfg = small();
    let data = cfg.data.generate().unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.model, b.model);
    assert_eq!(a.bank, b.bank);

    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train(&other, &data).unwrap().model, a.model);
}

#[test]
fn bank_stays_unit_and_updates_on_schedule() {
    let cfg = small();
    let data = cfg.data.generate().unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    for _ in 0..cfg.iterations {
        t.step().unwrap();
    }
    let bank = t.bank.as_ref().unwrap();
    assert_eq!(bank.updates_applied(), (cfg.iterations / cfg.policy.interval) as u64);
    for k in 0..bank.size() {
        assert!((norm(bank.row(k)) - 1.0).abs() < 1e-9);
    }
    assert_eq!(bank.layout().counts(), &[4, 4, 4]);
}

#[test]
fn baseline_has_no_bank_and_no_instance_loss() {
    let cfg = component_variant(&small(), "baseline").unwrap();
    let data = cfg.data.generate().unwrap();
    let out = train(&cfg, &data).unwrap();
    assert!(out.bank.is_none());
    assert!(out.metrics.rows.iter().all(|r| r.l_ins.is_none()));
}

#[test]
fn every_component_variant_trains() {
    let mut base = small();
    base.iterations = 10;
    let data = base.data.generate().unwrap();
    for id in dualpl_core::selftrain::COMPONENT_IDS {
        let cfg = component_variant(&base, id).unwrap();
        let out = train(&cfg, &data).unwrap();
        assert!(out.metrics.final_miou().unwrap().is_finite(), "{id}");
    }
}

#[test]
fn without_domain_gap_the_baseline_learns_the_task() {
    let mut cfg = component_variant(&small(), "baseline").unwrap();
    cfg.data.target_shift = Shift::identity();
    cfg.data.target_noise = cfg.data.source_noise;
    cfg.iterations = 300;
    cfg.eval_interval = 300;
    let data = cfg.data.generate().unwrap();
    let out = train(&cfg, &data).unwrap();
    let first = out.metrics.rows[0].miou_target;
    let last = out.metrics.final_miou().unwrap();
    assert!(last > 0.8 && last > first + 0.3, "mIoU {first} -> {last}");
}
