#![allow(dead_code)]

pub mod align_oracle;
