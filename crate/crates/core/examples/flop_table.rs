//! Measured attention cost against the closed forms, and how each grows
//! with resolution.

use retinexformer::attention::{FlopRow, FLOP_CSV_HEADER};

fn main() -> retinexformer::Result<()> {
    println!("{FLOP_CSV_HEADER}");
    for side in [8, 16, 32, 64] {
        for (c, k) in [(16, 1), (32, 2)] {
            let row = FlopRow::compute(side, side, c, k)?;
            assert_eq!(row.measured, row.formula_ig_msa);
            println!("{}", row.to_csv());
        }
    }
    Ok(())
}
