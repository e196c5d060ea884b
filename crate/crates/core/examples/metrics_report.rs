//! A metric report as JSON, the same document `ddpseg eval` writes.

use ddpseg::evalloss::{metrics, GroundTruth};
use ddpseg::Surfaces;

fn main() -> ddpseg::Result<()> {
    let truth = GroundTruth::new(Surfaces::from_rows(&[vec![10.0, 11.0, 12.5, 13.0], vec![20.0; 4]])?, 32)?;
    let pred = Surfaces::from_rows(&[vec![11.0, 11.0, 15.5, 13.0], vec![20.5, 19.5, 20.0, 20.0]])?;
    let report = metrics(&pred, &truth, 3.24)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
