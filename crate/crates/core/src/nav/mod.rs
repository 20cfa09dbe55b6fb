//! Turns segmentation masks and depth into timed feedback events.

mod config;
mod decide;
mod session;

pub use config::{ClassIds, NavConfig};
pub use decide::{
    class_area_ratios, decide_feedback, mean_depth, nearest_object, partition_walkable, Direction, Evidence,
    FeedbackEvent, FeedbackKind, NearestObject, SegFrame,
};
pub use session::{run_session, walkway_sequence, write_walkway_replay, LatestSlot, LogRecord};
