#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use catrobust::corpus::{CategoryNode, DatasetSplit, ProductRecord, SplitRole, Taxonomy};
use catrobust::perturb::AbbreviationLexicon;

/// Leaf no synthetic record carries; a guaranteed-wrong answer.
pub const UNUSED_LEAF: &str = "Toner";

pub fn taxonomy() -> Taxonomy {
    Taxonomy::new(CategoryNode::branch(
        "Products",
        vec![
            CategoryNode::branch(
                "Telecom & Navigation",
                vec![
                    CategoryNode::leaf("Mobile Phone Cases"),
                    CategoryNode::leaf("Smartphones"),
                    CategoryNode::leaf("Headsets"),
                ],
            ),
            CategoryNode::branch(
                "Computers",
                vec![
                    CategoryNode::leaf("Notebooks"),
                    CategoryNode::leaf("Tablets"),
                    CategoryNode::leaf("PCs/Workstations"),
                ],
            ),
            CategoryNode::branch(
                "Office",
                vec![
                    CategoryNode::leaf("Printers"),
                    CategoryNode::leaf("Paper"),
                    CategoryNode::leaf(UNUSED_LEAF),
                ],
            ),
        ],
    ))
    .unwrap()
}

const LEAVES: [(&str, &str); 8] = [
    ("Mobile Phone Cases", "phone case cover"),
    ("Smartphones", "smartphone 128gb dual sim"),
    ("Headsets", "headset with microphone"),
    ("Notebooks", "laptop 15.6 inch"),
    ("Tablets", "tablet 10 wifi"),
    ("PCs/Workstations", "desktop tower pc"),
    ("Printers", "laser printer duplex"),
    ("Paper", "copy paper a4 500 sheets"),
];

const BRANDS: [&str; 7] = [
    "Samsung", "Lenovo", "Apple", "Canon", "Logitech", "Acer", "Xerox",
];
const COLORS: [&str; 4] = ["Black", "White", "Brown", "Silver"];

/// `n` deterministic records with ids `{prefix}000`, `{prefix}001`, ...
/// Colour words and "wireless"/"mobile" are lexicon-eligible; about a third
/// of the records carry none of them.
pub fn records(prefix: &str, n: usize) -> Vec<ProductRecord> {
    let tax = taxonomy();
    (0..n)
        .map(|i| {
            let (leaf, noun) = LEAVES[i % LEAVES.len()];
            let mut words = vec![
                BRANDS[(i * 3) % BRANDS.len()].to_string(),
                format!("M{}", (i * 37) % 1000),
            ];
            if i % 5 == 0 {
                words.push("wireless".into());
            }
            if i % 7 == 3 {
                words.push("mobile".into());
            }
            words.push(noun.into());
            if i % 3 == 0 {
                words.push(COLORS[(i / 3) % COLORS.len()].into());
            }
            if i % 4 == 1 {
                words.push(format!("{}GB", 8 << (i % 4)));
            }
            ProductRecord {
                id: format!("{prefix}{i:03}"),
                description: words.join(" "),
                leaf_label: leaf.into(),
                path: tax.path_to(leaf).unwrap().to_vec(),
            }
        })
        .collect()
}

pub fn split(prefix: &str, n: usize, role: SplitRole) -> DatasetSplit {
    DatasetSplit::new(records(prefix, n), role, prefix).unwrap()
}

/// Abbreviated forms of the shipped lexicon.
pub fn abbreviation_markers() -> BTreeSet<String> {
    AbbreviationLexicon::seed()
        .entries()
        .map(|(_, abbr)| abbr.to_string())
        .collect()
}

pub fn has_marker(text: &str, markers: &BTreeSet<String>) -> bool {
    text.split_whitespace()
        .any(|t| markers.contains(&t.to_lowercase()))
}

fn write_jsonl(path: &Path, records: &[ProductRecord]) {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).unwrap());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

/// Writes taxonomy.json, test.jsonl (100 records) and train.jsonl (60
/// records) into `dir`.
pub fn write_corpus(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let tax = dir.join("taxonomy.json");
    std::fs::write(&tax, taxonomy().to_json()).unwrap();
    let test = dir.join("test.jsonl");
    write_jsonl(&test, &records("p", 100));
    let train = dir.join("train.jsonl");
    write_jsonl(&train, &records("t", 60));
    (tax, test, train)
}

/// Minimal TOML config over the files from [`write_corpus`].
pub fn config_toml(output_dir: &str, cells: &[(&str, &str, &str, bool)], extra: &str) -> String {
    let mut s = format!(
        "seed = 1\nparallelism = 4\noutput_dir = \"{output_dir}\"\ntaxonomy = \"taxonomy.json\"\ntest = \"test.jsonl\"\ntrain = \"train.jsonl\"\n\n[perturbation]\nmode = \"det\"\n\n"
    );
    for (backend, approach, attack, reason) in cells {
        s.push_str(&format!(
            "[[cells]]\nbackend = \"{backend}\"\napproach = \"{approach}\"\nattack = \"{attack}\"\nreason_note = {reason}\n\n"
        ));
    }
    s.push_str(extra);
    s
}

/// Every regular file under `dir`, as sorted relative `/`-joined paths.
pub fn files_under(dir: &Path) -> Vec<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap();
                out.push(
                    rel.components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect::<Vec<_>>()
                        .join("/"),
                );
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
