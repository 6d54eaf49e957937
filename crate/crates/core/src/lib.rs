//! Shared-workspace coordination: a versioned file store where every
//! write is validated against the writer's read snapshot.
//!
//! The pieces, bottom up:
//!
//! - [`store`] holds file contents and version counters and appends every
//!   change to the [`event`] log.
//! - [`session`] tracks what each client has read, and at which version.
//! - [`conflict`] decides whether a write is still grounded in current
//!   state, classifies rejections and manages reservations.
//! - [`annotations`] parses intent comments and checks that writers keep
//!   other authors' annotations.
//! - [`coordinator`] composes all of the above behind one commit section.

pub mod annotations;
pub mod clock;
pub mod conflict;
pub mod coordinator;
pub mod diff;
pub mod error;
pub mod event;
pub mod path;
pub mod session;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use conflict::{ConflictKind, ConflictReport, Reservation, StaleEntry, TargetDiff, Validity};
pub use coordinator::{
    Coordinator, CoordinatorConfig, OpenSession, RefreshStatus, Stats, WriteOutcome, WriteRequest,
};
pub use error::{Error, Result};
pub use event::{EventDetail, EventKind, EventLog, WorkspaceEvent};
pub use session::{ReadSnapshot, Role, Session};
pub use store::{Content, FileRecord, Workspace};
