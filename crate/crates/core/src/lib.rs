//! Wealth-tax microsimulation: survey ingestion, top-tail correction,
//! inequality statistics, tax designs and their evaluation against policy goals.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correction;
pub mod dataset;
pub mod goals;
pub mod report;
pub mod stats;
pub mod syngen;
pub mod tax;
