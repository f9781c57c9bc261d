use std::collections::BTreeMap;
use std::path::Path;

const STATUSES: [&str; 3] = ["verified-at-desk-scale", "property-substitute", "out-of-scope"];

fn read(rel: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// `(id, "name"` pairs from the criteria table in the acceptance suite.
fn acceptance_criteria() -> BTreeMap<u32, String> {
    let src = read("tests/acceptance.rs");
    let mut out = BTreeMap::new();
    let mut rest = src.as_str();
    while let Some(at) = rest.find('(') {
        rest = &rest[at + 1..];
        let head = rest.trim_start();
        let Some((num, tail)) = head.split_once(',') else { continue };
        let Ok(id) = num.trim().parse::<u32>() else { continue };
        let tail = tail.trim_start();
        if let Some(quoted) = tail.strip_prefix('"') {
            let name = &quoted[..quoted.find('"').unwrap()];
            assert!(out.insert(id, name.to_string()).is_none(), "criterion {id} declared twice");
        }
    }
    out
}

#[test]
fn every_acceptance_criterion_has_exactly_one_entry() {
    let criteria = acceptance_criteria();
    assert_eq!(criteria.keys().copied().collect::<Vec<_>>(), (1..=11).collect::<Vec<_>>());

    let doc = read("../../docs/CLAIMS.md");
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    for line in doc.lines() {
        let cells: Vec<&str> = line.split('|').map(str::trim).collect();
        if cells.len() < 6 {
            continue;
        }
        let Ok(id) = cells[1].parse::<u32>() else { continue };
        *seen.entry(id).or_default() += 1;
        let name = criteria.get(&id).unwrap_or_else(|| panic!("registry entry {id} has no acceptance criterion"));
        assert_eq!(cells[2], name, "entry {id} name");
        assert!(!cells[3].is_empty(), "entry {id} lacks a claim");
        assert!(cells[4].contains(&format!("acceptance {id}")), "entry {id} does not cite its acceptance check");
        assert!(STATUSES.contains(&cells[5]), "entry {id} status {:?}", cells[5]);
    }
    for id in criteria.keys() {
        assert_eq!(seen.get(id), Some(&1), "criterion {id} must appear exactly once");
    }
}
