//! Per-epoch training metrics as CSV.

use std::fmt::Write;

use crate::train::EpochRecord;

/// `epoch,train_loss,eval_top1`; the last column is empty without an
/// evaluation split.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,eval_top1\n");
    for r in records {
        let top1 = r.eval_top1.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, top1);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_through_parse() {
        let recs = [
            EpochRecord {
                epoch: 1,
                train_loss: 2.75,
                eval_top1: Some(0.1),
            },
            EpochRecord {
                epoch: 2,
                train_loss: 1.5,
                eval_top1: None,
            },
        ];
        let csv = metrics_csv(&recs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["epoch,train_loss,eval_top1", "1,2.75,0.1", "2,1.5,"]);
        let loss: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(loss, recs[0].train_loss);
    }
}
