//! Enrolment database: a directory holding `manifest.json` and `faces/*.pgm`.
//!
//! The store keeps at most `capacity` people. When an enrolment would exceed
//! it, the least frequently used person is evicted, with ties broken by least
//! recent use, then oldest enrolment, then smallest id. Display names and notes
//! are sealed with an authenticated cipher before they reach the manifest.

mod crypto;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{load_pgm, save_pgm, GrayImage, PgmError};
use crate::lbph::{train, LbpParams, LbphError, RecognizerModel};
use crate::Timestamp;

pub use crypto::{SealedField, CIPHER_NAME};
use crypto::{FieldKey, OpenError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FACES_DIR: &str = "faces";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("display name must not be empty")]
    EmptyName,
    #[error("unknown person {0:?}")]
    UnknownPerson(String),
    #[error("capacity must be at least 1")]
    InvalidCapacity,
    #[error("encryption key is not available from {0}")]
    MissingKey(String),
    #[error("could not authenticate encrypted field of person {0:?}; wrong key?")]
    Decryption(String),
    #[error("person {person:?} references missing face image {file}")]
    MissingImage { person: String, file: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("face image {file}: {source}")]
    FaceImage { file: String, source: PgmError },
    #[error("the store has no enrolled faces")]
    Empty,
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Recognizer(#[from] LbphError),
}

/// Where the field-encryption secret comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySource {
    /// Name of an environment variable holding the secret.
    EnvVar(String),
    /// Secret supplied directly by the host.
    Secret(String),
}

impl KeySource {
    fn describe(&self) -> String {
        match self {
            KeySource::EnvVar(name) => format!("environment variable {name}"),
            KeySource::Secret(_) => "the configured secret".to_string(),
        }
    }

    fn resolve(&self) -> Option<FieldKey> {
        match self {
            KeySource::EnvVar(name) => std::env::var(name)
                .ok()
                .filter(|v| !v.is_empty())
                .map(|v| FieldKey::from_secret(v.as_bytes())),
            KeySource::Secret(s) => Some(FieldKey::from_secret(s.as_bytes())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub capacity: usize,
    pub key_source: KeySource,
    pub root: PathBuf,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>, capacity: usize, key_source: KeySource) -> Self {
        StoreConfig {
            capacity,
            key_source,
            root: root.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PersonRecord {
    pub id: String,
    pub display_name: String,
    pub notes: String,
    pub face_images: Vec<String>,
    pub usage_count: u64,
    pub created_at: Timestamp,
    pub last_used_at: Timestamp,
}

impl PersonRecord {
    fn retention_key(&self) -> (u64, Timestamp, Timestamp, &str) {
        (self.usage_count, self.last_used_at, self.created_at, &self.id)
    }
}

/// Total order under which the smallest record is evicted first.
pub fn retention_cmp(a: &PersonRecord, b: &PersonRecord) -> Ordering {
    a.retention_key().cmp(&b.retention_key())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Manifest {
    version: u32,
    capacity: usize,
    persons: Vec<StoredPerson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct StoredPerson {
    id: String,
    display_name: SealedField,
    notes: SealedField,
    face_images: Vec<String>,
    usage_count: u64,
    created_at: Timestamp,
    last_used_at: Timestamp,
}

#[derive(Debug, Clone)]
struct Entry {
    record: PersonRecord,
    sealed_name: SealedField,
    sealed_notes: SealedField,
}

impl Entry {
    fn stored(&self) -> StoredPerson {
        let r = &self.record;
        StoredPerson {
            id: r.id.clone(),
            display_name: self.sealed_name.clone(),
            notes: self.sealed_notes.clone(),
            face_images: r.face_images.clone(),
            usage_count: r.usage_count,
            created_at: r.created_at,
            last_used_at: r.last_used_at,
        }
    }
}

fn field_context(id: &str, field: &str) -> String {
    format!("{id}:{field}")
}

pub type SharedStore = Arc<Mutex<FaceStore>>;

pub struct FaceStore {
    config: StoreConfig,
    key: Option<FieldKey>,
    entries: BTreeMap<String, Entry>,
    // Bumped whenever the set of face images changes.
    faces_generation: u64,
    recognizer: Option<(u64, LbpParams, Arc<RecognizerModel>)>,
}

impl std::fmt::Debug for FaceStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FaceStore")
            .field("root", &self.config.root)
            .field("capacity", &self.config.capacity)
            .field("persons", &self.entries.len())
            .finish()
    }
}

impl FaceStore {
    /// Opens the store at `config.root`, creating an empty one when no manifest
    /// exists. Nothing is returned unless every record decrypts and every face
    /// image is present.
    pub fn open(config: StoreConfig) -> Result<Self, StoreError> {
        if config.capacity == 0 {
            return Err(StoreError::InvalidCapacity);
        }
        fs::create_dir_all(config.root.join(FACES_DIR))?;
        let key = config.key_source.resolve();
        let manifest_path = config.root.join(MANIFEST_FILE);

        let mut entries = BTreeMap::new();
        if manifest_path.exists() {
            let bytes = fs::read(&manifest_path)?;
            let manifest: Manifest =
                serde_json::from_slice(&bytes).map_err(|e| StoreError::Manifest(e.to_string()))?;
            if manifest.version != MANIFEST_VERSION {
                return Err(StoreError::Manifest(format!(
                    "unsupported version {}",
                    manifest.version
                )));
            }
            if !manifest.persons.is_empty() && key.is_none() {
                return Err(StoreError::MissingKey(config.key_source.describe()));
            }
            for stored in manifest.persons {
                let entry = open_entry(&config.root, key.as_ref(), stored)?;
                if entries.insert(entry.record.id.clone(), entry).is_some() {
                    return Err(StoreError::Manifest("duplicate person id".into()));
                }
            }
        }

        let mut store = FaceStore {
            config,
            key,
            entries,
            faces_generation: 0,
            recognizer: None,
        };
        if store.entries.len() > store.config.capacity {
            tracing::warn!(
                persons = store.entries.len(),
                capacity = store.config.capacity,
                "store exceeds configured capacity, evicting"
            );
            let mut evicted = Vec::new();
            while store.entries.len() > store.config.capacity {
                let victim = store.eviction_victim().expect("non-empty").to_string();
                evicted.push(store.entries.remove(&victim).expect("victim exists"));
            }
            store.persist()?;
            for entry in evicted {
                store.remove_images(&entry.record);
            }
        }
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PersonRecord> {
        self.entries.get(id).map(|e| &e.record)
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = &PersonRecord> {
        self.entries.values().map(|e| &e.record)
    }

    /// Records ordered from most to least strongly retained.
    pub fn retention_ranking(&self) -> Vec<&PersonRecord> {
        let mut out: Vec<&PersonRecord> = self.records().collect();
        out.sort_by(|a, b| retention_cmp(b, a));
        out
    }

    pub fn faces_dir(&self) -> PathBuf {
        self.config.root.join(FACES_DIR)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.config.root.join(MANIFEST_FILE)
    }

    pub fn load_face(&self, file: &str) -> Result<GrayImage, StoreError> {
        let bytes = fs::read(self.faces_dir().join(file))?;
        load_pgm(&bytes).map_err(|source| StoreError::FaceImage {
            file: file.to_string(),
            source,
        })
    }

    pub fn face_bytes(&self, file: &str) -> Result<Vec<u8>, StoreError> {
        Ok(fs::read(self.faces_dir().join(file))?)
    }

    fn eviction_victim(&self) -> Option<&str> {
        self.entries
            .values()
            .map(|e| &e.record)
            .min_by(|a, b| retention_cmp(a, b))
            .map(|r| r.id.as_str())
    }

    fn key(&mut self) -> Result<FieldKey, StoreError> {
        if self.key.is_none() {
            self.key = self.config.key_source.resolve();
        }
        self.key
            .clone()
            .ok_or_else(|| StoreError::MissingKey(self.config.key_source.describe()))
    }

    /// Adds a person with one face image, evicting first if the store is full.
    pub fn enroll(
        &mut self,
        display_name: &str,
        notes: &str,
        face: &GrayImage,
        now: Timestamp,
    ) -> Result<PersonRecord, StoreError> {
        if display_name.trim().is_empty() {
            return Err(StoreError::EmptyName);
        }
        let key = self.key()?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let file = format!("{id}-0.pgm");
        write_atomically(&self.faces_dir().join(&file), &save_pgm(face))?;

        let record = PersonRecord {
            id: id.clone(),
            display_name: display_name.to_string(),
            notes: notes.to_string(),
            face_images: vec![file],
            usage_count: 0,
            created_at: now,
            last_used_at: now,
        };
        let entry = Entry {
            sealed_name: key.seal(display_name, &field_context(&id, "displayName")),
            sealed_notes: key.seal(notes, &field_context(&id, "notes")),
            record: record.clone(),
        };

        let mut evicted = Vec::new();
        while self.entries.len() >= self.config.capacity {
            let victim = self.eviction_victim().expect("non-empty").to_string();
            evicted.push(self.entries.remove(&victim).expect("victim exists"));
        }
        self.entries.insert(id.clone(), entry);

        if let Err(e) = self.persist() {
            self.entries.remove(&id);
            for entry in evicted {
                self.entries.insert(entry.record.id.clone(), entry);
            }
            self.remove_images(&record);
            return Err(e);
        }
        for entry in &evicted {
            tracing::info!(person = %entry.record.id, "evicted to respect capacity");
            self.remove_images(&entry.record);
        }
        self.faces_generation += 1;
        Ok(record)
    }

    /// Counts one identification of `id` at time `now`.
    pub fn record_usage(&mut self, id: &str, now: Timestamp) -> Result<PersonRecord, StoreError> {
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownPerson(id.to_string()))?;
        let previous = entry.record.clone();
        entry.record.usage_count += 1;
        entry.record.last_used_at = now.max(entry.record.created_at);
        let updated = entry.record.clone();
        if let Err(e) = self.persist() {
            self.entries.get_mut(id).expect("present").record = previous;
            return Err(e);
        }
        Ok(updated)
    }

    pub fn delete_person(&mut self, id: &str) -> Result<(), StoreError> {
        let entry = self
            .entries
            .remove(id)
            .ok_or_else(|| StoreError::UnknownPerson(id.to_string()))?;
        if let Err(e) = self.persist() {
            self.entries.insert(id.to_string(), entry);
            return Err(e);
        }
        self.remove_images(&entry.record);
        self.faces_generation += 1;
        Ok(())
    }

    /// Trains a recognizer over every stored face, walking people in ascending
    /// id order. Labels are person ids.
    pub fn build_recognizer(&self, params: &LbpParams) -> Result<RecognizerModel, StoreError> {
        if self.entries.is_empty() {
            return Err(StoreError::Empty);
        }
        let mut faces = Vec::new();
        for record in self.records() {
            for file in &record.face_images {
                faces.push((self.load_face(file)?, record.id.as_str()));
            }
        }
        Ok(train(faces.iter().map(|(img, id)| (img, *id)), params)?)
    }

    /// Like [`build_recognizer`](Self::build_recognizer) but reuses the last
    /// model while the stored faces are unchanged.
    pub fn recognizer(&mut self, params: &LbpParams) -> Result<Arc<RecognizerModel>, StoreError> {
        if let Some((generation, cached_params, model)) = &self.recognizer {
            if *generation == self.faces_generation && cached_params == params {
                return Ok(Arc::clone(model));
            }
        }
        let model = Arc::new(self.build_recognizer(params)?);
        self.recognizer = Some((self.faces_generation, params.clone(), Arc::clone(&model)));
        Ok(model)
    }

    fn persist(&self) -> Result<(), StoreError> {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            capacity: self.config.capacity,
            persons: self.entries.values().map(Entry::stored).collect(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
        write_atomically(&self.manifest_path(), &bytes)?;
        Ok(())
    }

    fn remove_images(&self, record: &PersonRecord) {
        for file in &record.face_images {
            if let Err(e) = fs::remove_file(self.faces_dir().join(file)) {
                tracing::warn!(%file, error = %e, "could not remove face image");
            }
        }
    }
}

fn open_entry(root: &Path, key: Option<&FieldKey>, stored: StoredPerson) -> Result<Entry, StoreError> {
    let key = key.ok_or_else(|| StoreError::MissingKey(String::new()))?;
    let open = |field: &SealedField, name: &str| {
        key.open(field, &field_context(&stored.id, name))
            .map_err(|e| match e {
                OpenError::UnsupportedCipher(c) => {
                    StoreError::Manifest(format!("unsupported cipher {c:?}"))
                }
                OpenError::Encoding | OpenError::Authentication => {
                    StoreError::Decryption(stored.id.clone())
                }
            })
    };
    let display_name = open(&stored.display_name, "displayName")?;
    let notes = open(&stored.notes, "notes")?;
    if stored.face_images.is_empty() {
        return Err(StoreError::Manifest(format!("person {:?} has no face images", stored.id)));
    }
    for file in &stored.face_images {
        if file.contains('/') || file.contains('\\') || !root.join(FACES_DIR).join(file).is_file() {
            return Err(StoreError::MissingImage {
                person: stored.id.clone(),
                file: file.clone(),
            });
        }
    }
    if stored.last_used_at < stored.created_at {
        return Err(StoreError::Manifest(format!(
            "person {:?} was last used before it was created",
            stored.id
        )));
    }
    Ok(Entry {
        record: PersonRecord {
            id: stored.id.clone(),
            display_name,
            notes,
            face_images: stored.face_images.clone(),
            usage_count: stored.usage_count,
            created_at: stored.created_at,
            last_used_at: stored.last_used_at,
        },
        sealed_name: stored.display_name,
        sealed_notes: stored.notes,
    })
}

/// Write to a sibling temp file, then rename over the target.
fn write_atomically(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}
