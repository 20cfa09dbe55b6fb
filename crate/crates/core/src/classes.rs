//! Label tables for the two heads.

/// General scene classes. The catch-all `clutter` sits at id 0 and plays
/// the background role; the rest follow in alphabetical order.
pub const GENERAL_CLASS_NAMES: [&str; 13] = [
    "clutter", "beam", "board", "bookcase", "ceiling", "chair", "column", "door", "floor", "sofa", "table", "wall",
    "window",
];

/// Background followed by the eleven transparent-object categories.
pub const TRANS_CLASS_NAMES: [&str; 12] = [
    "background",
    "shelf",
    "jar or tank",
    "freezer",
    "window",
    "glass door",
    "eyeglass",
    "cup",
    "glass wall",
    "glass bowl",
    "water bottle",
    "storage box",
];

/// Large transparent surfaces announced before anything else.
pub const TRANS_STUFF: [&str; 3] = ["window", "glass door", "glass wall"];

pub const TRANS_THINGS: [&str; 8] = [
    "shelf",
    "jar or tank",
    "freezer",
    "eyeglass",
    "cup",
    "glass bowl",
    "water bottle",
    "storage box",
];

pub fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Names for a head of `classes` outputs: the full tables when the count
/// matches them, the synthetic tables for four classes, numbered otherwise.
pub fn head_class_names(head: &str, classes: usize) -> Vec<String> {
    use crate::train::{GENERAL_SYNTH_NAMES, SYNTH_CLASSES, TRANS_SYNTH_NAMES};
    let trans = head == "transparency";
    match classes {
        13 if !trans => owned(&GENERAL_CLASS_NAMES),
        12 if trans => owned(&TRANS_CLASS_NAMES),
        SYNTH_CLASSES if trans => owned(&TRANS_SYNTH_NAMES),
        SYNTH_CLASSES => owned(&GENERAL_SYNTH_NAMES),
        k => (0..k).map(|i| format!("class {i}")).collect(),
    }
}
