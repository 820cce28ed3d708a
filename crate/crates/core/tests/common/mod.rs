#![allow(dead_code)]

pub mod closed_form;
pub mod grad;
pub mod oracle;
