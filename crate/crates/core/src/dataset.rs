//! Converts a labeled corpus into the instruction dataset (four instances per
//! record, templates T1-T4) and exports it as JSON lines.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::TweetRecord;
use crate::templates::{render_prompt, render_target, TemplateId};

/// One rendered (instruction, output) training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionInstance {
    pub record_id: String,
    pub template: TemplateId,
    pub instruction: String,
    pub output: String,
}

/// Render four instances per record, grouped by record in input order,
/// templates in T1..T4 order within each group.
pub fn build_instances(records: &[TweetRecord]) -> Vec<InstructionInstance> {
    let mut instances = Vec::with_capacity(records.len() * TemplateId::TRAINING.len());
    for record in records {
        for template in TemplateId::TRAINING {
            instances.push(InstructionInstance {
                record_id: record.id.clone(),
                template,
                instruction: render_prompt(template, &record.text).body,
                output: render_target(template, &record.truth),
            });
        }
    }
    instances
}

/// Split records into train and test partitions with a seeded shuffle.
/// Deterministic for a fixed seed; train size is `floor(fraction * n)`.
pub fn split_dataset(
    records: &[TweetRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<TweetRecord>, Vec<TweetRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if records.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} record(s); need at least 2",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..records.len()).collect();
    indices.shuffle(&mut rng);
    let n_train = (records.len() as f64 * train_fraction).floor() as usize;
    let train = indices[..n_train]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    let test = indices[n_train..]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    Ok((train, test))
}

/// Write instances as JSON lines; returns the number of lines written.
pub fn export_instances(
    instances: &[InstructionInstance],
    mut sink: impl Write,
) -> std::io::Result<usize> {
    for instance in instances {
        let line = serde_json::to_string(instance).expect("instance serializes");
        writeln!(sink, "{line}")?;
    }
    Ok(instances.len())
}

/// Read instances back from the export format.
pub fn import_instances(source: impl std::io::Read) -> Result<Vec<InstructionInstance>> {
    let reader = std::io::BufReader::new(source);
    let mut instances = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let lineno = index + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        let instance: InstructionInstance =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: lineno,
                reason: e.to_string(),
            })?;
        if instance.template == TemplateId::T5MultiInst {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: "training instances use templates T1-T4 only".into(),
            });
        }
        instances.push(instance);
    }
    Ok(instances)
}
