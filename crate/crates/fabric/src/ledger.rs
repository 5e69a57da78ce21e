//! Key consumption ledger export: one `time channel bytes purpose` line per
//! record.

use std::io::{self, Write};

use qfabric_core::keystore::ConsumptionRecord;

pub fn write_ledger<W: Write>(records: &[ConsumptionRecord], mut out: W) -> io::Result<()> {
    for r in records {
        writeln!(out, "{r}")?;
    }
    out.flush()
}
