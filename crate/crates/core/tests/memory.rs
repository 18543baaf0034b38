//! Peak heap use while streaming a chunked dataset.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use vbill::chunkstore::{logistic_records, split_logistic, ChunkOptions, ChunkStore, Schema};
use vbill::model::{LogisticRegressionModel, Model};
use vbill::simulate::{logistic_rows, LOGISTIC_BETA};
use vbill::stream::StreamKey;
use vbill::subsample::CenterSums;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Extra bytes at the high-water mark of `f`, above the level when it started.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

fn center_sums(store: &ChunkStore, theta: &[f64]) -> CenterSums {
    let parts = store
        .map_chunks(|c| {
            let rows: Vec<Vec<f64>> = c.rows().map(<[f64]>::to_vec).collect();
            let m = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows))?;
            CenterSums::accumulate(&m, 0..rows.len(), theta)
        })
        .unwrap();
    let mut total = CenterSums::zero(theta.len());
    parts.iter().for_each(|p| total.merge(p));
    total
}

#[test]
fn streaming_eight_chunks_stays_near_one_chunk() {
    let per_chunk = 10_000;
    let rows: Vec<Vec<f64>> =
        logistic_records(&logistic_rows(8 * per_chunk, &LOGISTIC_BETA, StreamKey::new(3)).unwrap()).collect();
    let dir_one = tempfile::tempdir().unwrap();
    let dir_eight = tempfile::tempdir().unwrap();
    let options = |rows_per_chunk| ChunkOptions {
        rows_per_chunk,
        shuffle: None,
    };
    let one = ChunkStore::write(dir_one.path(), Schema::Logistic, 3, rows[..per_chunk].to_vec(), options(per_chunk))
        .unwrap();
    let eight = ChunkStore::write(dir_eight.path(), Schema::Logistic, 3, rows.clone(), options(per_chunk)).unwrap();
    assert_eq!(eight.manifest().chunks.len(), 8);
    drop(rows);

    let theta = [-1.5, -0.1, 0.1, 0.7];
    let (_, single) = peak_during(|| center_sums(&one, &theta));
    let (sums, streamed) = peak_during(|| center_sums(&eight, &theta));
    assert_eq!(sums.count, 8 * per_chunk);
    assert!(
        streamed < 2 * single,
        "8 chunks peaked at {streamed} bytes, one chunk at {single}"
    );

    let (count, counted) = peak_during(|| eight.stream_map_reduce(0usize, |_, _| 1, |a, b| a + b).unwrap());
    assert_eq!(count, 8 * per_chunk);
    assert!(counted < 2 * single, "{counted} vs {single}");

    // the in-memory model for the same data is far larger
    let (model, resident) = peak_during(|| {
        let all = eight.read_all().unwrap();
        LogisticRegressionModel::from_covariates(3, &split_logistic(&all)).unwrap()
    });
    assert_eq!(model.n_obs(), 8 * per_chunk);
    assert!(resident > 4 * single, "{resident} vs {single}");
}
