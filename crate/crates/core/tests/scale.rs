//! Corpus-sized workloads: the largest knowledge bases and datasets the
//! pipeline is expected to handle.

use dkap_core::corpus::{augment_pairs, build_lexicon_from_docs, read_jsonl, write_jsonl, DocRecord, ExcerptMode, Pair};
use dkap_core::grammar::{generate_dataset, Grammar};
use dkap_core::retrieval::{build_index, export_contrastive_pairs};
use dkap_core::{Domain, IdentityMode, Instance, KnowledgeBase, LexiconEntry, Source};

const LARGE_KB: usize = 120_000;

fn large_kb() -> KnowledgeBase {
    let mut kb = KnowledgeBase::new(IdentityMode::Pair);
    let added = kb
        .add_entries((0..LARGE_KB).map(|i| {
            LexiconEntry::new(&format!("A is state {i} of lease {}", i % 97), &format!("state_{i}(A)"), Domain::Ltl, Source::Gold)
        }))
        .unwrap();
    assert_eq!(added, LARGE_KB);
    kb
}

#[test]
fn large_kb_persists_loads_and_indexes() {
    let kb = large_kb();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kb.jsonl");
    kb.persist(&path).unwrap();
    let loaded = KnowledgeBase::load(&path).unwrap();
    assert_eq!(loaded.len(), LARGE_KB);
    assert_eq!(loaded, kb);

    let index = build_index(&loaded.snapshot());
    assert_eq!(index.corpus_size, LARGE_KB);
    let hit = index.retrieve("state 119999 of lease", 10).unwrap();
    assert_eq!(hit.ranked[0].entry.value, "state_119999(A)");
    assert_eq!(hit.snapshot_seq, LARGE_KB as u64);
}

#[test]
fn large_dataset_generates() {
    let data = generate_dataset(&Grammar::builtin(), LARGE_KB, 5, 0).unwrap();
    assert_eq!(data.len(), LARGE_KB);
}

#[test]
fn command_corpus_augments_completely() {
    let commands = 500;
    let docs: Vec<DocRecord> = (0..commands)
        .map(|i| DocRecord {
            construct_id: format!("tool{i}"),
            doc_text: format!("Manage resources of kind {i}.\nMore information: https://example.org/tool{i}."),
            domain: Domain::Cmd,
        })
        .collect();
    let (lexicon, warnings) = build_lexicon_from_docs(&docs, ExcerptMode::FirstLine, 200).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(lexicon.len(), commands);

    let dir = tempfile::tempdir().unwrap();
    for (split, rows) in [("train", 8260), ("test", 928)] {
        let pairs: Vec<Pair> = (0..rows)
            .map(|i| Pair {
                x: format!("Use resource kind {} on a path", i % commands),
                y: format!("tool{} --path {{{{path}}}} -v", i % commands),
            })
            .collect();
        let path = dir.path().join(format!("{split}.jsonl"));
        write_jsonl(&path, &pairs).unwrap();
        let pairs: Vec<Pair> = read_jsonl(&path).unwrap();
        let instances = augment_pairs(&pairs, &lexicon, Domain::Cmd);
        assert_eq!(instances.len(), rows);
        for (i, inst) in instances.iter().enumerate() {
            let values: Vec<&str> = inst.k_gold.iter().map(|e| e.value.as_str()).collect();
            assert_eq!(values, [format!("tool{}", i % commands)], "{split} row {i}");
        }
    }
}

#[test]
fn code_corpus_exports_pairs() {
    let gold = |v: &str| LexiconEntry::new(&format!("{v}: documented behaviour"), v, Domain::Code, Source::Gold);
    let instances: Vec<Instance> = (0..2135)
        .map(|i| Instance {
            x: format!("join path parts for item {i}"),
            y: format!("os.path.join(base, 'item{i}')"),
            k_gold: if i % 5 == 0 { vec![] } else { vec![gold("os.path.join")] },
            domain: Domain::Code,
        })
        .collect();
    let rows = export_contrastive_pairs(&instances);
    assert_eq!(rows.len(), 2135 - 427);
}
