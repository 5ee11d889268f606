#![allow(dead_code)]

pub mod criteria;
pub mod grad_oracle;
pub mod metric_oracle;
