use crate::gradcheck::CheckCase;

pub fn gradcheck_cases(_seed: u64) -> Vec<CheckCase> {
    Vec::new()
}
