//! Demonstration file (`LAPODEM1`).
//!
//! ```text
//! magic "LAPODEM1"
//! u32 trajectory count
//! per trajectory: u32 suite id, u32 variant, u32 step count,
//!   per step: PHI_DIM x f32 observation, H*A x f32 actions
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::env::{DemoStep, DemoTrajectory, Suite, TaskSpec, ACTION_DIMS, PHI_DIM};
use crate::error::Result;

pub const DEMO_MAGIC: &[u8; 8] = b"LAPODEM1";

pub fn encode_demos(demos: &[DemoTrajectory]) -> Vec<u8> {
    let mut w = Writer::new(DEMO_MAGIC);
    w.u32(demos.len() as u32);
    for d in demos {
        w.u32(d.task.suite.id()).u32(d.task.variant).u32(d.steps.len() as u32);
        for s in &d.steps {
            w.f32s(&s.observation).f32s(&s.actions);
        }
    }
    w.into_bytes()
}

pub fn decode_demos(bytes: &[u8], horizon: usize) -> Result<Vec<DemoTrajectory>> {
    let mut r = Reader::new("demo file", bytes);
    r.magic(DEMO_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let at = r.offset();
        let suite = Suite::from_id(r.u32()?).map_err(|e| r.error(e.to_string()))?;
        let variant = r.u32()?;
        let task = TaskSpec::new(suite, variant).map_err(|e| {
            let mut r2 = Reader::new("demo file", bytes);
            let _ = r2.bytes(at);
            r2.error(e.to_string())
        })?;
        let count = r.u32()? as usize;
        let mut steps = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let observation = r.f32s(PHI_DIM)?;
            let actions = r.f32s(horizon * ACTION_DIMS)?;
            if let Some(a) = actions.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
                return Err(r.error(format!("action {a} outside [-1, 1]")));
            }
            steps.push(DemoStep {
                observation,
                actions,
            });
        }
        out.push(DemoTrajectory { task, steps });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_demos(path: &Path, demos: &[DemoTrajectory]) -> Result<()> {
    write_file(path, &encode_demos(demos))
}

pub fn read_demos(path: &Path, horizon: usize) -> Result<Vec<DemoTrajectory>> {
    decode_demos(&read_file(path)?, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scripted_expert;
    use crate::error::LapoError;

    #[test]
    fn round_trip() {
        let demos: Vec<_> = [(Suite::Reach, 1), (Suite::PickPlace, 4)]
            .into_iter()
            .map(|(s, v)| scripted_expert(TaskSpec::new(s, v).unwrap(), 3, 8).unwrap())
            .collect();
        let bytes = encode_demos(&demos);
        assert_eq!(decode_demos(&bytes, 8).unwrap(), demos);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let demo = scripted_expert(TaskSpec::new(Suite::Reach, 0).unwrap(), 0, 8).unwrap();
        let bytes = encode_demos(&[demo]);
        let cut = &bytes[..bytes.len() - 3];
        match decode_demos(cut, 8) {
            Err(LapoError::Parse { offset, .. }) => assert!(offset > 12 && offset < cut.len() as u64),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let err = decode_demos(b"NOTADEMOxxxx", 8).unwrap_err();
        assert!(matches!(err, LapoError::Parse { offset: 0, .. }));
    }
}
