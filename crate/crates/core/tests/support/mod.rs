//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod fbeta;
pub mod grad;
