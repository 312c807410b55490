//! Per-epoch metrics rows and their CSV serialization.

/// Everything measured in one epoch. The CSV columns cover the deterministic
/// fields only; wall time goes to stdout so repeated runs of the same config
/// and seed produce byte-identical metrics files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub tau_mean: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,test_loss,test_acc,lr,tau_mean,tau_min,tau_max";

impl MetricsRow {
    /// One strict-CSV data line (no trailing newline), deterministic fields
    /// only. Floats use the shortest round-trip decimal form.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.test_loss,
            self.test_acc,
            self.lr,
            self.tau_mean,
            self.tau_min,
            self.tau_max
        )
    }

    /// The human-facing progress line, wall time included.
    pub fn console_line(&self, total_epochs: usize) -> String {
        format!(
            "epoch {}/{} train_loss={:.4} train_acc={:.4} test_loss={:.4} test_acc={:.4} \
             lr={:.6} tau_mean={:.3} wall_seconds={:.2}",
            self.epoch,
            total_epochs,
            self.train_loss,
            self.train_acc,
            self.test_loss,
            self.test_acc,
            self.lr,
            self.tau_mean,
            self.wall_seconds
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            epoch: 3,
            train_loss: 1.25,
            train_acc: 0.5,
            test_loss: 1.5,
            test_acc: 0.4375,
            lr: 0.003,
            tau_mean: 2.0,
            tau_min: 1.75,
            tau_max: 2.25,
            wall_seconds: 12.34,
        }
    }

    #[test]
    fn csv_row_is_exact_and_excludes_wall_time() {
        assert_eq!(row().csv_row(), "3,1.25,0.5,1.5,0.4375,0.003,2,1.75,2.25");
        assert_eq!(METRICS_HEADER.split(',').count(), 9);
        assert_eq!(row().csv_row().split(',').count(), 9);
    }

    #[test]
    fn console_line_reports_wall_time() {
        let line = row().console_line(10);
        assert!(line.contains("epoch 3/10"));
        assert!(line.contains("wall_seconds=12.34"));
    }
}
