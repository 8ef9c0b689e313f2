//! Dataset ingestion, the refinement-step sweep, the two-hop fixture and
//! report emission.

pub mod fixture;
pub mod io;
pub mod report;
pub mod spec;
pub mod sweep;

pub use fixture::{make_two_hop_fixture, TwoHopFixture};
pub use io::{load_corpus, load_qrels, load_queries, load_sts_pairs, load_trec_run, write_trec_run};
pub use report::emit_reports;
pub use spec::{BackendSpec, DatasetSpec, ExperimentSpec};
pub use sweep::{plain_run, run_sweep, sweep_dataset, Dataset, SweepResult, SweepRow};
