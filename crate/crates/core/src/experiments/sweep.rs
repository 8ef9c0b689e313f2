use std::time::Instant;

use rayon::prelude::*;

use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::eval_metrics::{Metric, MetricReport};
use crate::experiments::fixture::make_two_hop_fixture;
use crate::experiments::io::{load_corpus, load_qrels, load_queries};
use crate::experiments::spec::{DatasetSpec, ExperimentSpec};
use crate::model::{Document, Embedding, Qrels, Query, RunList, ScoredDoc};
use crate::retrieval::{build_index, search, CorpusIndex};
use crate::rt_engine::refine_batch;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

/// Evaluation at one `(dataset, backend, T)` point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub dataset: String,
    pub backend: String,
    pub steps: usize,
    pub run: RunList,
    pub reports: Vec<MetricReport>,
    pub ms: u64,
}

impl GridPoint {
    /// Path of the TREC run file, relative to the output directory.
    pub fn run_file(&self) -> String {
        format!("runs/{}__{}__T{}.trec", slug(&self.dataset), slug(&self.backend), self.steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFailure {
    pub dataset: String,
    pub backend: String,
    /// `None` when the failure happened before any grid point (load, backend
    /// construction, index build).
    pub steps: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct IndexArtifact {
    pub dataset: String,
    pub backend: String,
    pub index: CorpusIndex<f64>,
}

impl IndexArtifact {
    pub fn file(&self) -> String {
        format!("indexes/{}__{}.rtix", slug(&self.dataset), slug(&self.backend))
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dataset: String,
    pub backend: String,
    pub steps: usize,
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    pub run_file: String,
    pub ms: u64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<GridPoint>,
    pub failures: Vec<GridFailure>,
    pub indexes: Vec<IndexArtifact>,
    pub run_tag: String,
    pub record_timings: bool,
}

impl SweepResult {
    /// One row per `(grid point, metric)`, in sweep order.
    pub fn rows(&self) -> Vec<SweepRow> {
        self.points
            .iter()
            .flat_map(|p| {
                p.reports.iter().map(move |r| SweepRow {
                    dataset: p.dataset.clone(),
                    backend: p.backend.clone(),
                    steps: p.steps,
                    metric: r.metric.clone(),
                    k: r.k,
                    value: r.aggregate,
                    run_file: p.run_file(),
                    ms: if self.record_timings { p.ms } else { 0 },
                })
            })
            .collect()
    }

    pub fn value(&self, dataset: &str, steps: usize, metric: Metric) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.dataset == dataset && p.steps == steps)?
            .reports
            .iter()
            .find(|r| r.metric == metric.name() && r.k == metric.k())
            .map(|r| r.aggregate)
    }
}

/// File-system-safe rendering of a name.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn hits_to_run(per_query: Vec<(String, Vec<ScoredDoc>)>) -> Result<RunList> {
    let mut run = RunList::new();
    for (qid, docs) in per_query {
        run.insert(&qid, docs)?;
    }
    Ok(run)
}

fn rank(index: &CorpusIndex<f64>, query_emb: &Embedding<f64>, depth: usize) -> Result<Vec<ScoredDoc>> {
    Ok(search(index, query_emb, depth)?
        .into_iter()
        .map(|h| ScoredDoc {
            doc_id: h.doc_id,
            score: h.score,
        })
        .collect())
}

/// Ranks every query from its plain single-pass encoding, without going
/// through the refinement engine.
pub fn plain_run<B: EncoderBackend<f64> + ?Sized>(
    backend: &B,
    index: &CorpusIndex<f64>,
    queries: &[Query],
    depth: usize,
) -> Result<RunList> {
    let per_query = queries
        .par_iter()
        .map(|q| Ok((q.id.clone(), rank(index, &backend.encode(&q.text, &[])?, depth)?)))
        .collect::<Result<Vec<_>>>()?;
    hits_to_run(per_query)
}

pub fn load_dataset(spec: &DatasetSpec, default_seed: u64) -> Result<(Dataset, Option<crate::backends::AdditiveBackend<f64>>)> {
    match spec {
        DatasetSpec::Files {
            name,
            corpus,
            queries,
            qrels,
        } => Ok((
            Dataset {
                name: name.clone(),
                corpus: load_corpus(corpus)?,
                queries: load_queries(queries)?,
                qrels: load_qrels(qrels)?,
            },
            None,
        )),
        DatasetSpec::TwoHop {
            name,
            n_queries,
            dim,
            seed,
        } => {
            let f = make_two_hop_fixture(*n_queries, *dim, seed.unwrap_or(default_seed))?;
            let backend = f.backend()?;
            Ok((
                Dataset {
                    name: name.clone(),
                    corpus: f.corpus,
                    queries: f.queries,
                    qrels: f.qrels,
                },
                Some(backend),
            ))
        }
    }
}

/// Index (if it could be built), grid points, and failures of one dataset sweep.
pub type DatasetSweep = (Option<IndexArtifact>, Vec<GridPoint>, Vec<GridFailure>);

/// Sweeps the `T` grid for one dataset and backend.
///
/// The document index is built once up front and reused for every grid
/// point; only queries are refined.
pub fn sweep_dataset<B: EncoderBackend<f64> + ?Sized>(
    data: &Dataset,
    backend: &B,
    spec: &ExperimentSpec,
) -> DatasetSweep {
    let fail = |steps: Option<usize>, e: &Error| GridFailure {
        dataset: data.name.clone(),
        backend: backend.name().to_string(),
        steps,
        error: e.to_string(),
    };
    let index = match build_index(backend, &data.corpus) {
        Ok(i) => i,
        Err(e) => return (None, Vec::new(), vec![fail(None, &e)]),
    };
    let depth = spec.depth();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &steps in &spec.steps {
        let started = Instant::now();
        let evaluated = (|| -> Result<(RunList, Vec<MetricReport>)> {
            let trajectories = refine_batch(backend, &data.queries, &spec.refine_config(steps))?.into_result()?;
            let per_query = trajectories
                .par_iter()
                .map(|(qid, t)| Ok((qid.clone(), rank(&index, t.last(), depth)?)))
                .collect::<Result<Vec<_>>>()?;
            let run = hits_to_run(per_query)?;
            let reports = spec
                .metrics
                .iter()
                .map(|m| m.evaluate(&run, &data.qrels))
                .collect::<Result<Vec<_>>>()?;
            Ok((run, reports))
        })();
        match evaluated {
            Ok((run, reports)) => points.push(GridPoint {
                dataset: data.name.clone(),
                backend: backend.name().to_string(),
                steps,
                run,
                reports,
                ms: started.elapsed().as_millis() as u64,
            }),
            Err(e) => failures.push(fail(Some(steps), &e)),
        }
    }
    let artifact = IndexArtifact {
        dataset: data.name.clone(),
        backend: backend.name().to_string(),
        index,
    };
    (Some(artifact), points, failures)
}

/// Runs every dataset against its backends over the full `T` grid.
///
/// Failures at any stage are recorded and the remaining work continues.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate()?;
    let mut result = SweepResult {
        points: Vec::new(),
        failures: Vec::new(),
        indexes: Vec::new(),
        run_tag: spec.run_tag.clone(),
        record_timings: spec.record_timings,
    };
    let absorb = |result: &mut SweepResult, (idx, pts, fails): DatasetSweep| {
        result.indexes.extend(idx);
        result.points.extend(pts);
        result.failures.extend(fails);
    };
    for ds in &spec.datasets {
        let (data, own_backend) = match load_dataset(ds, spec.seed) {
            Ok(v) => v,
            Err(e) => {
                result.failures.push(GridFailure {
                    dataset: ds.name().to_string(),
                    backend: String::new(),
                    steps: None,
                    error: e.to_string(),
                });
                continue;
            }
        };
        if let Some(backend) = own_backend {
            absorb(&mut result, sweep_dataset(&data, &backend, spec));
            continue;
        }
        for bspec in &spec.backends {
            match bspec.build(spec.seed) {
                Ok(backend) => absorb(&mut result, sweep_dataset(&data, backend.as_ref(), spec)),
                Err(e) => result.failures.push(GridFailure {
                    dataset: data.name.clone(),
                    backend: format!("{bspec:?}"),
                    steps: None,
                    error: e.to_string(),
                }),
            }
        }
    }
    Ok(result)
}
