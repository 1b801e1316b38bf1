//! Structured per-iteration log records and the timestamped file sink.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

/// One fully populated log record; every field is what gets printed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub total: f64,
    pub local_dino: f64,
    pub global_dino: f64,
    pub ibot: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_momentum: f64,
    pub batch_size: usize,
    pub iteration: usize,
    pub max_iterations: usize,
    pub worker_id: usize,
    pub memory_used_gb: f64,
    pub memory_total_gb: f64,
}

/// Fixed-point line format shared by stdout and the log file.
pub fn format_log_line(r: &TrainRecord) -> String {
    format!(
        "Total Loss: {:.4} Local DINO: {:.4} Global DINO: {:.4} iBOT: {:.4} \
         LR: {:.6} Weight Decay: {:.6} Teacher momentum: {:.6} \
         Current Batch Size: {} Iteration: {}/{} Worker ID: {} Memory: {:.2}/{:.2}",
        r.total,
        r.local_dino,
        r.global_dino,
        r.ibot,
        r.lr,
        r.weight_decay,
        r.teacher_momentum,
        r.batch_size,
        r.iteration,
        r.max_iterations,
        r.worker_id,
        r.memory_used_gb,
        r.memory_total_gb,
    )
}

/// Total system memory in GB from /proc/meminfo; stable on one machine.
pub fn system_memory_total_gb() -> f64 {
    if let Ok(text) = std::fs::read_to_string("/proc/meminfo") {
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("MemTotal:") {
                if let Some(kb) = rest.split_whitespace().next().and_then(|v| v.parse::<f64>().ok())
                {
                    return kb * 1024.0 / 1e9;
                }
            }
        }
    }
    0.0
}

/// Serialized log sink: echoes to stdout and appends timestamped lines to
/// `logs/train.log`.
pub struct LogSink {
    file: Option<Mutex<File>>,
    rank: usize,
    pub echo: bool,
}

impl LogSink {
    pub fn new(log_dir: Option<&Path>, rank: usize, echo: bool) -> std::io::Result<Self> {
        let file = match log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(Mutex::new(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("train.log"))?,
                ))
            }
            None => None,
        };
        Ok(Self { file, rank, echo })
    }

    pub fn emit(&self, line: &str) {
        if self.echo {
            println!("{line}");
        }
        if let Some(file) = &self.file {
            let stamp = chrono::Local::now().format("%Y-%m-%d %H:%M:%S,%3f");
            let mut f = file.lock().expect("log sink poisoned");
            let _ = writeln!(f, "{stamp} - dino_trainer_rank{} - INFO - {line}", self.rank);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_the_reference_line() {
        let r = TrainRecord {
            total: 13.6886,
            local_dino: 9.889,
            global_dino: 1.2194,
            ibot: 2.5802,
            lr: 1.6e-6,
            weight_decay: 0.040057,
            teacher_momentum: 0.996001,
            batch_size: 64,
            iteration: 16,
            max_iterations: 2000,
            worker_id: 0,
            memory_used_gb: 22.96,
            memory_total_gb: 47.32,
        };
        assert_eq!(
            format_log_line(&r),
            "Total Loss: 13.6886 Local DINO: 9.8890 Global DINO: 1.2194 iBOT: 2.5802 \
             LR: 0.000002 Weight Decay: 0.040057 Teacher momentum: 0.996001 \
             Current Batch Size: 64 Iteration: 16/2000 Worker ID: 0 Memory: 22.96/47.32"
        );
    }

    #[test]
    fn zero_record_keeps_field_widths() {
        let r = TrainRecord {
            total: 0.0,
            local_dino: 0.0,
            global_dino: 0.0,
            ibot: 0.0,
            lr: 0.0,
            weight_decay: 0.0,
            teacher_momentum: 0.0,
            batch_size: 0,
            iteration: 0,
            max_iterations: 0,
            worker_id: 0,
            memory_used_gb: 0.0,
            memory_total_gb: 0.0,
        };
        assert_eq!(
            format_log_line(&r),
            "Total Loss: 0.0000 Local DINO: 0.0000 Global DINO: 0.0000 iBOT: 0.0000 \
             LR: 0.000000 Weight Decay: 0.000000 Teacher momentum: 0.000000 \
             Current Batch Size: 0 Iteration: 0/0 Worker ID: 0 Memory: 0.00/0.00"
        );
    }

    #[test]
    fn file_sink_prefixes_rank_and_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let sink = LogSink::new(Some(dir.path()), 3, false).unwrap();
        sink.emit("hello");
        let text = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        assert!(text.contains(" - dino_trainer_rank3 - INFO - hello"));
        // timestamp shape: YYYY-MM-DD HH:MM:SS,mmm
        let stamp = text.split(" - ").next().unwrap();
        assert_eq!(stamp.len(), 23, "stamp {stamp:?}");
        assert_eq!(&stamp[4..5], "-");
        assert_eq!(&stamp[19..20], ",");
    }
}
