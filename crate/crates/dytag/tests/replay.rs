mod common;

/// Rewrites the committed fixture from a fresh mock run:
/// `DYTAG_REGENERATE_FIXTURES=1 cargo test -p dytag --test replay -- --ignored`
#[test]
#[ignore]
fn regenerate_replay_fixture() {
    if std::env::var_os("DYTAG_REGENERATE_FIXTURES").is_none() {
        eprintln!("set DYTAG_REGENERATE_FIXTURES=1 to rewrite {}", common::fixture_dir().display());
        return;
    }
    common::regenerate_fixture(&common::fixture_dir()).unwrap();
}

#[test]
fn committed_transcript_replays_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, compared) = common::replay_check(&dir.path().join("out")).unwrap();
    assert_eq!(compared, 4);
    // the replayed run also passes the prompt hygiene check
    assert!(common::hygiene_check(&cfg).unwrap() > 0);
}
