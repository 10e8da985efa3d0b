use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use ssrec_core::bihmm::{group_by_producer, train_bundle, train_producer_models, ModelBundle};
use ssrec_core::domain::{
    build_profiles, ingest_log, read_rows, CategoryId, ConsumerId, Dataset, DatasetBuilder, EntityId, ItemKey,
    LogFormat, ProducerId, SocialItem, UserProfile, Vocabularies,
};
use ssrec_core::expansion::build_cooccurrence;
use ssrec_core::harness::{
    bench_latency, compare_prediction_accuracy, generate_synthetic, run_stream_simulation, sweep as run_sweep,
    write_jsonl, SearchMode, Simulator, SweepParameter, SyntheticSpec,
};
use ssrec_core::index::{CppseIndex, KnnStats, PseudoQuery};
use ssrec_core::scoring::{BackgroundModel, ItemQuery, UserState};

use crate::bundle::{Bundle, DATASET, EXPANSION, INDEX, MODELS, PROFILES, VOCAB};
use crate::{Ctx, UsageError};

pub enum DataSource {
    Bundle(PathBuf),
    Log(PathBuf, Option<LogFormat>),
}

impl DataSource {
    fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Bundle(dir) => Bundle::open(dir).dataset(),
            DataSource::Log(path, format) => Ok(ingest_log(path, format.unwrap_or_else(|| guess_format(path)))?),
        }
    }
}

fn guess_format(path: &Path) -> LogFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => LogFormat::Csv,
        _ => LogFormat::Jsonl,
    }
}

/// JSON on stdout under `--json`, the text rendering otherwise.
fn emit<T: Serialize>(ctx: &Ctx, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

fn profiles_of(ctx: &Ctx, dataset: &Dataset) -> Result<BTreeMap<ConsumerId, UserProfile>> {
    Ok(build_profiles(&dataset.interactions, &dataset.items, ctx.cfg.window)?)
}

fn state_of(ctx: &Ctx, profile: &UserProfile, models: &ModelBundle, n_categories: usize) -> UserState {
    UserState::new(
        profile.clone(),
        models.consumers.get(&profile.consumer),
        &models.producers,
        n_categories,
        ctx.cfg.scoring.floor,
    )
}

#[derive(Serialize)]
struct IngestSummary {
    interactions: usize,
    items: usize,
    consumers: usize,
    categories: usize,
    digest: String,
}

pub fn ingest(ctx: &Ctx, input: &Path, format: Option<LogFormat>, out: &Path) -> Result<()> {
    let dataset = ingest_log(input, format.unwrap_or_else(|| guess_format(input)))?;
    let profiles = profiles_of(ctx, &dataset)?;
    let bundle = Bundle::create(out)?;
    bundle.write_json(DATASET, &dataset)?;
    bundle.write_json(VOCAB, &dataset.vocab.sidecar_json())?;
    bundle.write_json(PROFILES, &profiles.values().collect::<Vec<_>>())?;
    let s = IngestSummary {
        interactions: dataset.interactions.len(),
        items: dataset.items.len(),
        consumers: profiles.len(),
        categories: dataset.n_categories(),
        digest: bundle.digest(&[DATASET, VOCAB, PROFILES])?,
    };
    emit(ctx, &s, || {
        format!(
            "{} interactions, {} items, {} consumers, {} categories\ndigest {}",
            s.interactions, s.items, s.consumers, s.categories, s.digest
        )
    })
}

#[derive(Serialize)]
struct TrainSummary {
    producers: usize,
    consumers: usize,
    digest: String,
}

pub fn train(ctx: &Ctx, dir: &Path) -> Result<()> {
    let bundle = Bundle::open(dir);
    let dataset = bundle.dataset()?;
    let profiles = profiles_of(ctx, &dataset)?;
    let cfg = &ctx.cfg;
    let models = train_bundle(
        &dataset.items,
        &profiles,
        dataset.n_categories(),
        &cfg.producer_states,
        &cfg.consumer_states,
        &cfg.train,
    )?;
    bundle.write_json(MODELS, &models)?;
    let s = TrainSummary {
        producers: models.producers.len(),
        consumers: models.consumers.len(),
        digest: bundle.digest(&[MODELS])?,
    };
    emit(ctx, &s, || {
        format!("{} producer models, {} consumer models\ndigest {}", s.producers, s.consumers, s.digest)
    })
}

/// An item given by name on the command line.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemSpec {
    category: String,
    producer: String,
    #[serde(default)]
    entities: Vec<String>,
}

fn parse_item(arg: &str) -> Result<ItemSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_owned()
    } else {
        std::fs::read_to_string(arg).map_err(|e| ssrec_core::Error::io(arg, e))?
    };
    serde_json::from_str(&text).map_err(|e| UsageError(format!("bad item JSON: {e}")).into())
}

/// Interns the item against the dataset vocabulary. Unknown producers and entities get
/// fresh ids that match nothing; an unknown category has no users at all.
fn resolve_item(spec: &ItemSpec, vocab: &Vocabularies) -> Option<SocialItem> {
    let category = CategoryId(vocab.categories.get(&spec.category)?);
    let producer = ProducerId(vocab.users.get(&spec.producer).unwrap_or(vocab.users.len() as u32));
    let mut fresh: BTreeMap<&str, u32> = BTreeMap::new();
    let entities = spec
        .entities
        .iter()
        .map(|e| {
            EntityId(vocab.entities.get(e).unwrap_or_else(|| {
                let next = vocab.entities.len() as u32 + fresh.len() as u32;
                *fresh.entry(e.as_str()).or_insert(next)
            }))
        })
        .collect();
    Some(SocialItem {
        key: ItemKey(u32::MAX),
        category,
        producer,
        entities,
        timestamp: 0,
    })
}

fn entity_name(vocab: &Vocabularies, e: EntityId) -> String {
    vocab.entities.name(e.0).map_or_else(|| format!("#{}", e.0), str::to_owned)
}

#[derive(Serialize)]
struct ExpandSummary {
    pairs: usize,
    digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    expanded: Option<Vec<(String, f64)>>,
}

pub fn expand(ctx: &Ctx, dir: &Path, item: Option<&str>) -> Result<()> {
    let bundle = Bundle::open(dir);
    let dataset = bundle.dataset()?;
    let stats = build_cooccurrence(dataset.items.iter(), &ctx.cfg.expansion)?;
    bundle.write_json(EXPANSION, &stats)?;
    let expanded = match item {
        Some(arg) => {
            let spec = parse_item(arg)?;
            let q = match resolve_item(&spec, &dataset.vocab) {
                Some(it) => ItemQuery::new(&it, &stats, ctx.cfg.expansion.per_entity).expanded,
                None => Vec::new(),
            };
            Some(q.into_iter().map(|(e, w)| (entity_name(&dataset.vocab, e), w)).collect::<Vec<_>>())
        }
        None => None,
    };
    let s = ExpandSummary {
        pairs: stats.n_pairs(),
        digest: bundle.digest(&[EXPANSION])?,
        expanded,
    };
    emit(ctx, &s, || {
        let mut out = format!("{} co-occurring pairs\ndigest {}", s.pairs, s.digest);
        for (name, w) in s.expanded.iter().flatten() {
            out.push_str(&format!("\n{name}\t{w}"));
        }
        out
    })
}

#[derive(Serialize)]
struct IndexSummary {
    users: usize,
    blocks: usize,
    trees: usize,
    digest: String,
}

impl IndexSummary {
    fn of(index: &CppseIndex, bundle: &Bundle) -> Result<Self> {
        Ok(Self {
            users: index.users().len(),
            blocks: index.blocks().len(),
            trees: index.trees().len(),
            digest: bundle.digest(&[INDEX])?,
        })
    }

    fn text(&self) -> String {
        format!(
            "{} users in {} blocks and {} trees\ndigest {}",
            self.users, self.blocks, self.trees, self.digest
        )
    }
}

pub fn index_build(ctx: &Ctx, dir: &Path) -> Result<()> {
    let bundle = Bundle::open(dir);
    let dataset = bundle.dataset()?;
    let n = dataset.n_categories();
    let profiles = profiles_of(ctx, &dataset)?;
    let models = bundle.models()?.unwrap_or_else(|| {
        log::warn!("no {MODELS} in bundle; every user gets the empirical one-state model");
        ModelBundle::default()
    });
    let bg = BackgroundModel::from_profiles(profiles.values());
    let states = profiles.values().map(|p| state_of(ctx, p, &models, n)).collect();
    let index = CppseIndex::build(states, bg, ctx.cfg.scoring, ctx.cfg.index, n)?;
    index.save(&bundle.path(INDEX))?;
    let s = IndexSummary::of(&index, &bundle)?;
    emit(ctx, &s, || s.text())
}

/// One line per block, dense vectors over the block vocabularies.
fn render_pseudo_query(pq: &PseudoQuery, index: &CppseIndex, vocab: &Vocabularies) -> String {
    let block = &index.blocks()[pq.block as usize];
    let join = |v: Vec<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let category = vocab.categories.name(pq.category.0).unwrap_or("?");
    format!(
        "q_{{v,{b}}} = {{{b}, {category}, ⟨{}⟩, ⟨{}⟩, ⟨{}⟩}}",
        join(pq.producer_vector(block.producers.len())),
        join(pq.frequency_vector(block.entities.len())),
        join(pq.weight_vector(block.entities.len())),
        b = pq.block,
    )
}

#[derive(Serialize)]
struct Ranked {
    consumer: String,
    score: f64,
}

#[derive(Serialize)]
struct QueryOutput {
    k: usize,
    results: Vec<Ranked>,
    stats: KnnStats,
}

pub fn index_query(ctx: &Ctx, dir: &Path, item: &str) -> Result<()> {
    let bundle = Bundle::open(dir);
    let index = CppseIndex::load(&bundle.path(INDEX), false)?;
    let dataset = bundle.dataset()?;
    let stats = bundle.expansion()?.unwrap_or_default();
    let spec = parse_item(item)?;
    let k = ctx.cfg.k_max();
    let (results, knn) = match resolve_item(&spec, &dataset.vocab) {
        Some(it) => {
            let q = ItemQuery::new(&it, &stats, ctx.cfg.expansion.per_entity);
            if ctx.debug {
                for pq in index.pseudo_queries(&q) {
                    eprintln!("{}", render_pseudo_query(&pq, &index, &dataset.vocab));
                }
            }
            let lambda = ctx.flags.lambda_s.unwrap_or(index.scoring().lambda_s);
            index.knn_query_traced(&q, k, lambda)?
        }
        None => {
            log::info!("category `{}` is unknown; nobody can be recommended", spec.category);
            (Vec::new(), KnnStats::default())
        }
    };
    let out = QueryOutput {
        k,
        results: results
            .into_iter()
            .map(|(c, score)| Ranked {
                consumer: dataset.vocab.users.name(c.0).unwrap_or("?").to_owned(),
                score,
            })
            .collect(),
        stats: knn,
    };
    emit(ctx, &out, || {
        if out.results.is_empty() {
            return "no reachable users".to_owned();
        }
        out.results
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}\t{}\t{:.6}", i + 1, r.consumer, r.score))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

#[derive(Serialize)]
struct UpdateOutput {
    profiles_updated: usize,
    inserted: usize,
    vocabulary_rebuilds: usize,
}

pub fn index_update(ctx: &Ctx, dir: &Path, batch: &Path, format: Option<LogFormat>) -> Result<()> {
    let bundle = Bundle::open(dir);
    let mut index = CppseIndex::load(&bundle.path(INDEX), false)?;
    let file = File::open(batch).map_err(|e| ssrec_core::Error::io(batch, e))?;
    let rows = read_rows(file, format.unwrap_or_else(|| guess_format(batch)))?;
    let mut out = UpdateOutput {
        profiles_updated: 0,
        inserted: 0,
        vocabulary_rebuilds: 0,
    };
    if !rows.is_empty() {
        let mut builder = DatasetBuilder::from_dataset(bundle.dataset()?);
        let mut touched = BTreeSet::new();
        for (line, row) in &rows {
            if let Some(it) = builder.push(*line, row).with_context(|| format!("in {}", batch.display()))? {
                touched.insert(it.consumer);
            }
        }
        let dataset = builder.finish();
        let n = dataset.n_categories();
        let profiles = profiles_of(ctx, &dataset)?;
        let models = bundle.models()?.unwrap_or_default();
        let states = touched.iter().map(|c| state_of(ctx, &profiles[c], &models, n)).collect();
        let summary = index.apply_updates(states)?;
        out = UpdateOutput {
            profiles_updated: touched.len(),
            inserted: summary.inserted,
            vocabulary_rebuilds: summary.vocabulary_rebuilds,
        };
        index.save(&bundle.path(INDEX))?;
        bundle.write_json(DATASET, &dataset)?;
        bundle.write_json(VOCAB, &dataset.vocab.sidecar_json())?;
        bundle.write_json(PROFILES, &profiles.values().collect::<Vec<_>>())?;
    }
    emit(ctx, &out, || format!("{} profiles updated", out.profiles_updated))
}

pub fn index_verify(ctx: &Ctx, dir: &Path) -> Result<()> {
    let bundle = Bundle::open(dir);
    let index = CppseIndex::load(&bundle.path(INDEX), true)?;
    let s = IndexSummary::of(&index, &bundle)?;
    emit(ctx, &s, || format!("index ok: {}", s.text()))
}

pub fn simulate(ctx: &Ctx, source: &DataSource, oracle: bool, timing: bool, out: Option<&Path>) -> Result<()> {
    let dataset = source.load()?;
    let mode = if oracle { SearchMode::Oracle } else { SearchMode::Index };
    let mut config = ctx.cfg.simulation(mode);
    config.timing = timing;
    let report = run_stream_simulation(&dataset, &config)?;
    if let Some(path) = out {
        std::fs::write(path, report.to_json()? + "\n").map_err(|e| ssrec_core::Error::io(path, e))?;
    }
    emit(ctx, &report, || report.to_text())
}

pub fn sweep(ctx: &Ctx, source: &DataSource, param: SweepParameter, grid: Option<Vec<f64>>, csv: bool) -> Result<()> {
    let dataset = source.load()?;
    let config = ctx.cfg.simulation(SearchMode::Index);
    let simulator = Simulator::prepare(&dataset, &config)?;
    let grid = grid.unwrap_or_else(|| param.default_grid());
    let report = run_sweep(&simulator, param, &grid, &config)?;
    if csv {
        print!("{}", report.to_csv()?);
        return Ok(());
    }
    emit(ctx, &report, || report.to_text())
}

pub fn bench(ctx: &Ctx, source: &DataSource) -> Result<()> {
    let dataset = source.load()?;
    let cfg = &ctx.cfg;
    let total = dataset.interactions.len();
    let cut = (total as f64 * cfg.bench.train_fraction) as usize;
    if cut == 0 || cut >= total {
        return Err(UsageError(format!("{total} interactions are too few to split for a benchmark")).into());
    }
    let (train, test) = dataset.interactions.split_at(cut);
    let n = dataset.n_categories();
    let profiles = build_profiles(train, &dataset.items, cfg.window)?;
    // Latency does not depend on how the predictions were learned; empirical models keep
    // the setup cheap.
    let models = ModelBundle::default();
    let bg = BackgroundModel::from_profiles(profiles.values());
    let states = profiles.values().map(|p| state_of(ctx, p, &models, n)).collect();
    let index = CppseIndex::build(states, bg, cfg.scoring, cfg.index, n)?;

    let boundary = test[0].timestamp;
    let browsed: HashSet<ItemKey> = train.iter().map(|i| i.item).collect();
    let known = dataset.items.iter().filter(|it| browsed.contains(&it.key) || it.timestamp < boundary);
    let stats = build_cooccurrence(known, &cfg.expansion)?;
    let mut seen = HashSet::new();
    let queries: Vec<ItemQuery> = test
        .iter()
        .filter(|i| seen.insert(i.item))
        .take(cfg.bench.queries)
        .map(|i| ItemQuery::new(dataset.item(i.item), &stats, cfg.expansion.per_entity))
        .collect();
    let report = bench_latency(&index, &queries, cfg.k_max())?;
    emit(ctx, &report, || {
        format!(
            "{} users, {} queries, k={}\nindex        mean {:.1}us  median {:.1}us  p99 {:.1}us\nsequential   mean {:.1}us  median {:.1}us  p99 {:.1}us\nspeedup {:.2}x, oracle mismatches {}",
            report.users,
            report.items,
            report.k,
            report.index.mean_us,
            report.index.median_us,
            report.index.p99_us,
            report.brute_force.mean_us,
            report.brute_force.median_us,
            report.brute_force.p99_us,
            report.speedup,
            report.oracle_mismatches
        )
    })
}

pub fn accuracy(ctx: &Ctx, source: &DataSource, min_states: usize, max_states: usize) -> Result<()> {
    if min_states == 0 || min_states > max_states {
        return Err(UsageError(format!("bad state range {min_states}..={max_states}")).into());
    }
    let dataset = source.load()?;
    let n = dataset.n_categories();
    let cfg = &ctx.cfg;
    let profiles = profiles_of(ctx, &dataset)?;
    let producers = train_producer_models(&group_by_producer(&dataset.items), n, &cfg.producer_states, &cfg.train)?.models;
    let report = compare_prediction_accuracy(&profiles, &producers, n, min_states..=max_states, &cfg.train)?;
    emit(ctx, &report, || {
        let mut out = format!(
            "{} users ({} skipped): HMM {:.4}, BiHMM {:.4}\nstates\tusers\tHMM\tBiHMM",
            report.users, report.skipped, report.hmm, report.bihmm
        );
        for g in &report.groups {
            out.push_str(&format!("\n{}\t{}\t{:.4}\t{:.4}", g.states, g.users, g.hmm, g.bihmm));
        }
        out
    })
}

#[derive(Serialize)]
struct SynthSummary {
    rows: usize,
    browses: usize,
    path: PathBuf,
}

pub fn synth(ctx: &Ctx, out: &Path, spec: Option<&Path>, consumers: Option<usize>, ticks: Option<usize>) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read spec {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| UsageError(format!("bad spec {}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = ctx.flags.seed {
        spec.seed = seed;
    }
    if let Some(c) = consumers {
        spec.consumers = c;
    }
    if let Some(t) = ticks {
        spec.ticks = t;
    }
    let rows = generate_synthetic(&spec)?;
    write_jsonl(&rows, out)?;
    let s = SynthSummary {
        rows: rows.len(),
        browses: rows.iter().filter(|r| r.consumer.is_some()).count(),
        path: out.to_path_buf(),
    };
    emit(ctx, &s, || format!("{} rows ({} browses) written to {}", s.rows, s.browses, s.path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssrec_core::expansion::CooccurrenceStats;

    #[test]
    fn unknown_names_never_collide_with_known_ones() {
        let mut vocab = Vocabularies::default();
        vocab.categories.intern("sports");
        vocab.users.intern("bbc");
        vocab.entities.intern("a");
        let spec = ItemSpec {
            category: "sports".into(),
            producer: "nobody".into(),
            entities: vec!["a".into(), "x".into(), "y".into(), "x".into()],
        };
        let item = resolve_item(&spec, &vocab).unwrap();
        assert_eq!(item.producer, ProducerId(1));
        assert_eq!(item.entities, vec![EntityId(0), EntityId(1), EntityId(2), EntityId(1)]);
        let none = ItemSpec {
            category: "news".into(),
            ..spec
        };
        assert!(resolve_item(&none, &vocab).is_none());
    }

    #[test]
    fn format_follows_the_extension() {
        assert_eq!(guess_format(Path::new("a/b.CSV")), LogFormat::Csv);
        assert_eq!(guess_format(Path::new("a/b.jsonl")), LogFormat::Jsonl);
        assert_eq!(guess_format(Path::new("log")), LogFormat::Jsonl);
    }

    #[test]
    fn stats_default_expands_nothing() {
        let item = SocialItem {
            key: ItemKey(0),
            category: CategoryId(0),
            producer: ProducerId(0),
            entities: vec![EntityId(3)],
            timestamp: 0,
        };
        let q = ItemQuery::new(&item, &CooccurrenceStats::default(), 2);
        assert_eq!(q.expanded, vec![(EntityId(3), 1.0)]);
    }
}
