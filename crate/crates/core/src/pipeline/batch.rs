use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::agent::Backend;
use crate::corpus::QaRecord;

use super::{Pipeline, PipelineError, RunTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub parallelism: usize,
    /// Keep valid traces already in the output file and skip their qids.
    pub resume: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            resume: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchSummary {
    /// One trace per dataset record, in dataset order.
    pub traces: Vec<RunTrace>,
    pub computed: usize,
    pub resumed: usize,
    pub errored: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::TraceIo {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a trace file. Lines that do not parse (for example a line torn by a
/// crash) are skipped with a warning.
pub fn load_traces(path: &Path) -> Result<Vec<RunTrace>, PipelineError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunTrace>(&line) {
            Ok(t) => out.push(t),
            Err(e) => log::warn!("{}:{}: skipping unreadable trace: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

impl Pipeline {
    /// Runs every record, appending each trace to `out_path` as soon as it
    /// completes. Per-query errors live in the traces; only I/O on the trace
    /// file fails the batch.
    pub fn run_batch(
        &self,
        records: &[QaRecord],
        backend: &dyn Backend,
        out_path: &Path,
        opts: BatchOptions,
    ) -> Result<BatchSummary, PipelineError> {
        if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let wanted: HashSet<&str> = records.iter().map(|r| r.qid.as_str()).collect();
        let mut done: HashMap<String, RunTrace> = HashMap::new();
        if opts.resume && out_path.exists() {
            for t in load_traces(out_path)? {
                if t.variant == self.config().variant && wanted.contains(t.qid.as_str()) && !done.contains_key(&t.qid) {
                    done.insert(t.qid.clone(), t);
                }
            }
            // Rewrite without torn or foreign lines before appending.
            let tmp = out_path.with_extension("jsonl.tmp");
            {
                let mut w = BufWriter::new(File::create(&tmp).map_err(|e| io_err(&tmp, e))?);
                for r in records {
                    if let Some(t) = done.get(&r.qid) {
                        writeln!(w, "{}", t.to_json_line()).map_err(|e| io_err(&tmp, e))?;
                    }
                }
                w.flush().map_err(|e| io_err(&tmp, e))?;
            }
            fs::rename(&tmp, out_path).map_err(|e| io_err(out_path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(opts.resume)
            .write(true)
            .truncate(!opts.resume)
            .open(out_path)
            .map_err(|e| io_err(out_path, e))?;

        let pending: Vec<&QaRecord> = records.iter().filter(|r| !done.contains_key(&r.qid)).collect();
        let resumed = done.len();
        let next = AtomicUsize::new(0);
        let sink = Mutex::new((file, Vec::<RunTrace>::new(), None::<PipelineError>));
        let workers = opts.parallelism.max(1).min(pending.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(record) = pending.get(i) else { break };
                    let trace = self.run_query(backend, &record.qid, &record.question);
                    let mut guard = sink.lock().expect("trace sink lock");
                    let (file, traces, failure) = &mut *guard;
                    if failure.is_some() {
                        break;
                    }
                    let line = format!("{}\n", trace.to_json_line());
                    if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                        *failure = Some(io_err(out_path, e));
                        break;
                    }
                    traces.push(trace);
                });
            }
        });
        let (_, fresh, failure) = sink.into_inner().expect("trace sink lock");
        if let Some(e) = failure {
            return Err(e);
        }
        let computed = fresh.len();
        done.extend(fresh.into_iter().map(|t| (t.qid.clone(), t)));
        let traces: Vec<RunTrace> = records.iter().filter_map(|r| done.remove(&r.qid)).collect();
        let errored = traces.iter().filter(|t| t.error.is_some()).count();
        Ok(BatchSummary {
            traces,
            computed,
            resumed,
            errored,
        })
    }
}
