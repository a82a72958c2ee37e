use proptest::prelude::*;

use ufork_core::workload::gen::{self, RedisParams};
use ufork_core::workload::{parse, run, RunConfig};
use ufork_core::{Capability, ForkStrategy, LayoutSpec, Perms, Pid, Region, System, SystemConfig};

const SAFE: [ForkStrategy; 3] = [
    ForkStrategy::FullCopy,
    ForkStrategy::CoA,
    ForkStrategy::CoPA,
];

#[test]
fn mixed_corpus_expectations_hold() {
    for seed in 0..30 {
        let script = gen::mixed(seed);
        for s in SAFE {
            let out = run(&script, &RunConfig::new(s)).unwrap();
            assert!(
                out.assertion_failures.is_empty(),
                "seed {seed} {s}: {:?}",
                out.assertion_failures
            );
        }
    }
}

#[test]
fn generated_scripts_roundtrip_through_text() {
    for seed in 0..20 {
        let script = gen::mixed(seed);
        let again = parse(&script.to_string()).unwrap();
        assert_eq!(again, script, "seed {seed}");
    }
    let redis = gen::redis_analog(&RedisParams::default()).unwrap();
    assert_eq!(parse(&redis.to_string()).unwrap(), redis);
}

#[test]
fn runs_are_deterministic() {
    let script = gen::mixed(7);
    for s in SAFE {
        let a = run(&script, &RunConfig::new(s)).unwrap();
        let b = run(&script, &RunConfig::new(s)).unwrap();
        assert_eq!(a.trace_hash(), b.trace_hash());
        assert_eq!(a.report, b.report);
    }
}

#[test]
fn copa_child_touching_nothing_copies_only_eager_pages() {
    let script = parse("alloc a 4096\nstore_int a+0 1\nfork c {\n  getpid\n}\n").unwrap();
    let out = run(&script, &RunConfig::new(ForkStrategy::CoPA)).unwrap();
    let child = out.report.pid(Pid(2)).unwrap();
    assert_eq!(child.eager_pages_copied, 2);
    assert_eq!(child.lazy_pages_copied(), 0);
}

#[test]
fn integer_read_of_untagged_page_is_free_under_copa_only() {
    let src = "alloc a 64\nstore_int a+0 9\nfork c {\n  load_int a+0\n}\n";
    let script = parse(src).unwrap();
    let copa = run(&script, &RunConfig::new(ForkStrategy::CoPA)).unwrap();
    let coa = run(&script, &RunConfig::new(ForkStrategy::CoA)).unwrap();
    assert_eq!(copa.report.pid(Pid(2)).unwrap().lazy_pages_copied(), 0);
    assert_eq!(coa.report.pid(Pid(2)).unwrap().lazy_access_fault, 1);
    assert_eq!(copa.trace, coa.trace);
}

#[test]
fn nested_fork_grandchild_sees_its_own_memory() {
    let src = "\
alloc a 64
alloc b 64
store_int b+0 5
store_ref a+0 b+0
fork c {
  fork g {
    load_ref a+0
    deref
    expect 5
  }
  load_ref a+0
  deref
  expect 5
}
";
    let script = parse(src).unwrap();
    for s in SAFE {
        let mut cfg = RunConfig::new(s);
        cfg.audit_every_step = true;
        let out = run(&script, &cfg).unwrap();
        assert!(
            out.assertion_failures.is_empty(),
            "{s}: {:?}",
            out.assertion_failures
        );
        assert!(out.audit.is_clean(), "{s}: {}", out.audit);
    }
}

proptest! {
    #[test]
    fn rebased_caps_never_point_into_the_parent(
        off in 0u64..0x8000,
        len in 0u64..0x4000,
    ) {
        let parent = Region::new(0x1000_0000, 0x8000).unwrap();
        let child = Region::new(0x2000_0000, 0x8000).unwrap();
        let cap = Capability::new_root(parent.base() + off, len, Perms::DATA);
        let r = cap.rebase_for_child(&parent, &child);
        if r.is_tagged() {
            prop_assert!(r.bounds_within(&child));
            prop_assert_eq!(r.base() - child.base(), cap.base() - parent.base());
        } else {
            prop_assert!(!cap.bounds_within(&parent));
        }
    }

    #[test]
    fn eager_copies_ignore_heap_size(heap_pages in 1u64..512) {
        let spec = LayoutSpec { heap_pages, ..LayoutSpec::default() };
        for s in [ForkStrategy::CoA, ForkStrategy::CoPA] {
            let mut sys = System::boot(SystemConfig::default());
            let p = sys.create_initial_process(&spec).unwrap();
            let c = sys.fork(p, s).unwrap();
            let rep = sys.snapshot(Some(c)).unwrap();
            prop_assert_eq!(rep.pids[0].eager_pages_copied, spec.got_pages + spec.alloc_meta_pages);
        }
    }

    #[test]
    fn redis_copy_counts_are_ordered(pages in 1u64..96, q in 0.0f64..=1.0, seed in 0u64..100) {
        let p = RedisParams { pages, child_read_frac: q, seed, ..RedisParams::default() };
        let script = gen::redis_analog(&p).unwrap();
        let copied: Vec<u64> = SAFE
            .iter()
            .map(|s| run(&script, &RunConfig::new(*s)).unwrap().report.pid(Pid(2)).unwrap().pages_copied())
            .collect();
        prop_assert!(copied[2] <= copied[1] && copied[1] <= copied[0], "{:?}", copied);
    }
}
