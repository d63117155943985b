//! Shared fixtures for unit tests.

use crate::atc::AtcTree;
use crate::dataset::{Patient, ReportSet};

/// The 7-node toy tree: one root with two internal children carrying two
/// leaves each. Preorder ids: A=0, A01=1, A01A=2, A01B=3, A02=4, A02A=5,
/// A02B=6; depth(T) = 2.
pub fn toy_tree() -> AtcTree {
    AtcTree::from_rows(vec![
        ("A".into(), "root".into()),
        ("A01".into(), "left".into()),
        ("A02".into(), "right".into()),
        ("A01A".into(), "leaf-ll".into()),
        ("A01B".into(), "leaf-lr".into()),
        ("A02A".into(), "leaf-rl".into()),
        ("A02B".into(), "leaf-rr".into()),
    ])
    .unwrap()
}

/// A 20-patient hand dataset over the toy tree's leaves {2, 3, 5, 6}.
pub fn hand_reports() -> ReportSet {
    let rows: [(&[usize], bool); 20] = [
        (&[2, 3], true),
        (&[2, 3], false),
        (&[2, 5], true),
        (&[2, 5], true),
        (&[2, 6], false),
        (&[3, 5], false),
        (&[3, 6], true),
        (&[3, 6], false),
        (&[5, 6], false),
        (&[5, 6], false),
        (&[2], false),
        (&[3], true),
        (&[5], false),
        (&[6], false),
        (&[2, 3, 5], true),
        (&[2, 3, 6], false),
        (&[3, 5, 6], false),
        (&[2, 5, 6], true),
        (&[2, 3, 5, 6], false),
        (&[3], false),
    ];
    let patients = rows
        .iter()
        .map(|(drugs, ae)| Patient { drugs: drugs.to_vec(), ae: *ae })
        .collect();
    ReportSet::new(patients)
}
