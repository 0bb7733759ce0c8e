//! User-space deniable storage engine.
//!
//! A file-backed physical volume is encrypted sector-by-sector (AES-CBC,
//! ESSIV:SHA256, password-wrapped master key) and virtualized as a
//! thin-provisioned chunk pool. Virtual logical volumes draw chunks from the
//! pool with exclusive ownership: a capacity-spoofed outer volume labeled at
//! the full physical capacity, password-named hidden volumes carrying an
//! extra per-volume cipher, and a level-0 null sink that absorbs
//! fill-to-full attack traffic while the accounting layer reports a full
//! device only at exactly the labeled capacity.
//!
//! Layer stack, bottom to top:
//!
//! ```text
//! block_store   sector-addressed image file, 5-tuple mapping resolution
//! crypto        per-sector FDE with wrapped master key
//! thin_pool     chunk allocator + persistent ownership metadata
//! volumes       outer / hidden / null-sink volumes, fill accounting
//! store         facade tying one image's layers together
//! mount         token-gated dynamic mounting with auto-unmount timers
//! adversary     capacity-comparison and fill-to-full attack harness
//! bench         sequential/random IO measurement
//! ```

pub mod adversary;
pub mod bench;
pub mod block_store;
pub mod crypto;
pub mod mount;
pub mod store;
pub mod thin_pool;
pub mod error;

pub mod volumes;

pub use error::{Error, Result};
