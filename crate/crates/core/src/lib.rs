//! Network-attached memory database building blocks on a simulated RDMA
//! fabric.

pub mod costmodel;
pub mod fabric;
pub mod olap;
pub mod oltp;
pub mod oracle;
pub mod store;
