//! Iterative image editing with a critic in the loop: edit, critique, refine
//! the instruction, repeat. Also provides reward computation for training the
//! critic and a data pipeline that turns logged sessions into training sets.

pub mod backends;
pub mod bench;
pub mod datapipe;
pub mod protocol;
pub mod rewards;
pub mod seeds;
pub mod session;

pub use backends::{BackendError, Backends, Editor, ImageRef, Scorer, ThinkRequest, Thinker, ThinkerMode};
pub use protocol::{ExpertVerdict, ScoreAggregate, ThinkerVerdict, Violation};
pub use session::{
    run_batch, run_session, select_best, EditTask, LoopConfig, SessionStatus, Step, TaskType, Trajectory,
};
