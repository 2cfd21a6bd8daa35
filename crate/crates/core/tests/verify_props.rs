use lsla_core::verify::{registry, run, Context, Hooks};

#[test]
fn every_property_passes() {
    let ctx = Context { seed: 42, hooks: Hooks::default() };
    let outcomes = run(None, &ctx);
    assert_eq!(outcomes.len(), registry().len());
    for o in &outcomes {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
}

#[test]
fn skewed_fusion_is_caught() {
    let ctx = Context { seed: 42, hooks: Hooks { skew_fuse_vo: true } };
    let outcomes = run(Some("equivalence.*"), &ctx);
    let names: Vec<_> = outcomes.iter().map(|o| (o.name, o.passed)).collect();
    assert_eq!(names, [("equivalence.qbar", true), ("equivalence.fuse_vo", false)]);
}

#[test]
fn filter_selects_by_glob() {
    let ctx = Context { seed: 1, hooks: Hooks::default() };
    assert_eq!(run(Some("rowsum.*"), &ctx).len(), 2);
    assert!(run(Some("nothing.here"), &ctx).is_empty());
    assert!(run(Some("[unclosed"), &ctx).is_empty());
}
