//! Communication kernel for parallel iterative methods, with synchronous and
//! asynchronous iteration schemes, snapshot-based asynchronous convergence
//! detection, and a distributed Jacobi solver used as the validation workload.

pub mod convergence;
pub mod harness;
pub mod kernel;
pub mod solver;
pub mod topology;
pub mod transport;

pub use kernel::{Communicator, KernelError, Scheme, Stats, StepCtx};
pub use topology::{build_partition, partition_to_graph, CommGraph, Partition3D, TopologyError};
pub use transport::{Body, Endpoint, Rank, Request, Tag, TransportError};
