#![allow(dead_code)]

pub mod storage_laws;
