//! Deterministic simulator of fork inside a single address space.
//!
//! μprocesses share one virtual address space and address memory only
//! through bounded, tagged capabilities. Forking places the child in a fresh
//! region; capabilities copied into the child are rewritten to point at the
//! child's region, either eagerly or when a shared page is first touched.
//!
//! The `workload` module drives everything through a small scripting
//! language; the other modules can be used directly.

pub mod address_space;
pub mod capability;
pub mod fork_engine;
pub mod kernel_gateway;
pub mod metrics;
pub mod system;
pub mod tagged_memory;
pub mod uprocess;
pub mod workload;

pub use address_space::{Access, AccessKind, Fault, FaultKind, Loaded};
pub use capability::{Capability, DeriveMode, Perms, Region};
pub use fork_engine::{CopyCause, CopyEvent, ForkStrategy};
pub use kernel_gateway::{IsolationLevel, Syscall, SyscallArgs, SyscallRet};
pub use metrics::{MetricsReport, Prs};
pub use system::{System, SystemConfig};
pub use uprocess::{LayoutSpec, Pid};
