#![allow(dead_code)]

pub mod fast_oracle;
pub mod grad;
