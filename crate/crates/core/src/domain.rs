//! Identifiers, social items, interactions and the long-term/short-term user profiles
//! built from an interaction log.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Index into the fixed category set `[0, |C|)`.
    CategoryId
);
dense_id!(
    /// A user acting as the author of items. Shares the user namespace with [`ConsumerId`].
    ProducerId
);
dense_id!(
    /// A user acting as a browser of items. Shares the user namespace with [`ProducerId`].
    ConsumerId
);
dense_id!(EntityId);
dense_id!(
    /// Interned item identifier; doubles as the position of the item in [`Dataset::items`].
    ItemKey
);

/// String interner. Ids are dense and assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `name → id` view, ordered by name.
    pub fn to_map(&self) -> BTreeMap<&str, u32> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32))
            .collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mut vocab = Vocab::new();
        for n in &names {
            vocab.intern(n);
        }
        if vocab.len() != names.len() {
            return Err(serde::de::Error::custom("duplicate name in vocabulary"));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub categories: Vocab,
    /// Producers and consumers live in one user namespace.
    pub users: Vocab,
    pub entities: Vocab,
    pub items: Vocab,
}

impl Vocabularies {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// The sidecar document: one `name → id` map per vocabulary.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "categories": self.categories.to_map(),
            "users": self.users.to_map(),
            "entities": self.entities.to_map(),
            "items": self.items.to_map(),
        })
    }
}

/// The `<category, producer, entities>` triplet flowing on the item stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialItem {
    pub key: ItemKey,
    pub category: CategoryId,
    pub producer: ProducerId,
    /// Ordered multiset: order as given, duplicates kept.
    pub entities: Vec<EntityId>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub consumer: ConsumerId,
    pub item: ItemKey,
    pub timestamp: u64,
}

/// An ingested interaction log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocabularies,
    /// Indexed by `ItemKey`.
    pub items: Vec<SocialItem>,
    /// Sorted by timestamp; ties keep input order.
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    pub fn item(&self, key: ItemKey) -> &SocialItem {
        &self.items[key.index()]
    }

    pub fn n_categories(&self) -> usize {
        self.vocab.n_categories()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(LogFormat::Jsonl),
            "csv" => Ok(LogFormat::Csv),
            other => Err(Error::config(format!("unknown log format `{other}`"))),
        }
    }
}

/// One row of an interaction log. A row without a consumer only records item creation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRow {
    pub ts: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer: Option<String>,
    pub item: String,
    pub category: String,
    pub producer: String,
    #[serde(default)]
    pub entities: Vec<String>,
}

pub const CSV_COLUMNS: [&str; 6] = ["ts", "consumer", "item", "category", "producer", "entities"];

pub fn ingest_log(path: &Path, format: LogFormat) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), format)
}

pub fn ingest_reader<R: Read>(reader: R, format: LogFormat) -> Result<Dataset> {
    let rows = read_rows(reader, format)?;
    let mut builder = DatasetBuilder::default();
    for (line, row) in rows {
        builder.push(line, &row)?;
    }
    Ok(builder.finish())
}

/// Parsed rows with their 1-based line numbers, without interning anything.
pub fn read_rows<R: Read>(reader: R, format: LogFormat) -> Result<Vec<(usize, LogRow)>> {
    match format {
        LogFormat::Jsonl => read_jsonl(BufReader::new(reader)),
        LogFormat::Csv => read_csv(reader),
    }
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<(usize, LogRow)>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LogRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        rows.push((line_no, row));
    }
    Ok(rows)
}

fn read_csv<R: Read>(reader: R) -> Result<Vec<(usize, LogRow)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        // an empty file has no header row at all
        Err(_) => return Ok(Vec::new()),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })?;
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line_no = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(cols[c]).unwrap_or("").trim();
        let ts = field(0).parse::<i64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad timestamp `{}`: {e}", field(0)),
        })?;
        let consumer = Some(field(1).to_owned()).filter(|c| !c.is_empty());
        let entities = field(5)
            .split('|')
            .map(str::trim)
            .filter(|e| !e.is_empty())
            .map(str::to_owned)
            .collect();
        rows.push((
            line_no,
            LogRow {
                ts,
                consumer,
                item: field(2).to_owned(),
                category: field(3).to_owned(),
                producer: field(4).to_owned(),
                entities,
            },
        ));
    }
    Ok(rows)
}

/// Incremental dataset construction; also used to ingest update batches against an
/// existing vocabulary.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    dataset: Dataset,
}

impl DatasetBuilder {
    pub fn from_dataset(dataset: Dataset) -> Self {
        Self { dataset }
    }

    /// Adds one row. Returns the interaction it produced, if any.
    pub fn push(&mut self, line: usize, row: &LogRow) -> Result<Option<Interaction>> {
        let parse_err = |message: String| Error::Parse { line, message };
        if row.ts < 0 {
            return Err(parse_err(format!("negative timestamp {}", row.ts)));
        }
        if row.item.is_empty() || row.category.is_empty() || row.producer.is_empty() {
            return Err(parse_err("item, category and producer are required".into()));
        }
        let ts = row.ts as u64;
        let vocab = &mut self.dataset.vocab;
        let category = CategoryId(vocab.categories.intern(&row.category));
        let producer = ProducerId(vocab.users.intern(&row.producer));
        let key = ItemKey(vocab.items.intern(&row.item));
        if key.index() == self.dataset.items.len() {
            let entities = row
                .entities
                .iter()
                .map(|e| EntityId(vocab.entities.intern(e)))
                .collect();
            self.dataset.items.push(SocialItem {
                key,
                category,
                producer,
                entities,
                timestamp: ts,
            });
        } else {
            let item = &mut self.dataset.items[key.index()];
            if item.category != category || item.producer != producer {
                return Err(parse_err(format!(
                    "item `{}` redeclared with a different category or producer",
                    row.item
                )));
            }
            item.timestamp = item.timestamp.min(ts);
        }
        let consumer = match row.consumer.as_deref() {
            Some(c) if !c.is_empty() => c,
            _ => return Ok(None),
        };
        let interaction = Interaction {
            consumer: ConsumerId(self.dataset.vocab.users.intern(consumer)),
            item: key,
            timestamp: ts,
        };
        self.dataset.interactions.push(interaction);
        Ok(Some(interaction))
    }

    pub fn finish(mut self) -> Dataset {
        // stable: equal timestamps keep input order
        self.dataset.interactions.sort_by_key(|i| i.timestamp);
        self.dataset
    }
}

/// One browsed item as remembered by a user profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item: ItemKey,
    pub category: CategoryId,
    pub producer: ProducerId,
    pub entities: Vec<EntityId>,
    pub timestamp: u64,
}

impl HistoryEntry {
    pub fn new(item: &SocialItem, timestamp: u64) -> Self {
        Self {
            item: item.key,
            category: item.category,
            producer: item.producer,
            entities: item.entities.clone(),
            timestamp,
        }
    }
}

/// All interactions older than the short-term window, with derived counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTermList {
    entries: Vec<HistoryEntry>,
    producer_counts: BTreeMap<ProducerId, u32>,
    entity_counts: BTreeMap<EntityId, u32>,
    category_counts: BTreeMap<CategoryId, u32>,
    total_producers: u32,
    total_entities: u32,
}

impl LongTermList {
    pub fn from_entries(entries: Vec<HistoryEntry>) -> Self {
        let mut list = Self::default();
        for e in entries {
            list.push(e);
        }
        list
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        *self.producer_counts.entry(entry.producer).or_default() += 1;
        *self.category_counts.entry(entry.category).or_default() += 1;
        self.total_producers += 1;
        for &e in &entry.entities {
            *self.entity_counts.entry(e).or_default() += 1;
            self.total_entities += 1;
        }
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn producer_count(&self, p: ProducerId) -> u32 {
        self.producer_counts.get(&p).copied().unwrap_or(0)
    }

    pub fn entity_count(&self, e: EntityId) -> u32 {
        self.entity_counts.get(&e).copied().unwrap_or(0)
    }

    pub fn producer_counts(&self) -> &BTreeMap<ProducerId, u32> {
        &self.producer_counts
    }

    pub fn entity_counts(&self) -> &BTreeMap<EntityId, u32> {
        &self.entity_counts
    }

    pub fn category_counts(&self) -> &BTreeMap<CategoryId, u32> {
        &self.category_counts
    }

    /// `|U^p|`: number of producer interactions.
    pub fn total_producers(&self) -> u32 {
        self.total_producers
    }

    /// `|E|`: number of entity occurrences.
    pub fn total_entities(&self) -> u32 {
        self.total_entities
    }

    /// True when the stored counts agree with a recount of the entries.
    pub fn counts_consistent(&self) -> bool {
        let recount = Self::from_entries(self.entries.clone());
        recount == *self
    }
}

/// Fixed-capacity FIFO of the most recent interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortTermWindow {
    capacity: usize,
    items: VecDeque<HistoryEntry>,
}

impl ShortTermWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("short-term window capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.items.iter()
    }

    /// Pushes `entry`; when the window was already full its whole content is drained
    /// first and returned.
    pub fn push(&mut self, entry: HistoryEntry) -> Vec<HistoryEntry> {
        let flushed = if self.is_full() {
            self.items.drain(..).collect()
        } else {
            Vec::new()
        };
        self.items.push_back(entry);
        flushed
    }
}

/// The CPPse pair of a consumer: long-term list plus short-term window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub consumer: ConsumerId,
    pub long_term: LongTermList,
    pub short_term: ShortTermWindow,
}

impl UserProfile {
    pub fn new(consumer: ConsumerId, window_capacity: usize) -> Result<Self> {
        Ok(Self {
            consumer,
            long_term: LongTermList::default(),
            short_term: ShortTermWindow::new(window_capacity)?,
        })
    }

    /// Records a browse. Returns the number of entries flushed into the long-term list.
    pub fn push(&mut self, entry: HistoryEntry) -> usize {
        let flushed = self.short_term.push(entry);
        let n = flushed.len();
        for e in flushed {
            self.long_term.push(e);
        }
        n
    }

    pub fn len(&self) -> usize {
        self.long_term.len() + self.short_term.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whole history in temporal order: long-term entries then the window.
    pub fn history(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.long_term.entries().iter().chain(self.short_term.iter())
    }

    /// Categories occurring anywhere in the history, ascending.
    pub fn categories(&self) -> BTreeSet<CategoryId> {
        self.history().map(|e| e.category).collect()
    }
}

/// Replays interactions through the flush rule, one profile per consumer.
pub fn build_profiles(
    interactions: &[Interaction],
    items: &[SocialItem],
    window_capacity: usize,
) -> Result<BTreeMap<ConsumerId, UserProfile>> {
    if window_capacity == 0 {
        return Err(Error::config("short-term window capacity must be at least 1"));
    }
    let mut profiles: BTreeMap<ConsumerId, UserProfile> = BTreeMap::new();
    for it in interactions {
        let item = items
            .get(it.item.index())
            .ok_or_else(|| Error::invalid(format!("interaction references unknown item {}", it.item)))?;
        let profile = match profiles.entry(it.consumer) {
            std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(UserProfile::new(it.consumer, window_capacity)?)
            }
        };
        profile.push(HistoryEntry::new(item, it.timestamp));
    }
    Ok(profiles)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserModes {
    pub producers: BTreeSet<ProducerId>,
    pub consumers: BTreeSet<ConsumerId>,
}

impl UserModes {
    /// Users that author but never browse; they receive no profile.
    pub fn pure_producers(&self) -> impl Iterator<Item = ProducerId> + '_ {
        self.producers
            .iter()
            .copied()
            .filter(|p| !self.consumers.contains(&ConsumerId(p.0)))
    }
}

pub fn classify_user_modes(interactions: &[Interaction], items: &[SocialItem]) -> UserModes {
    UserModes {
        producers: items.iter().map(|i| i.producer).collect(),
        consumers: interactions.iter().map(|i| i.consumer).collect(),
    }
}
