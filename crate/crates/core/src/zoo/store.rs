use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::record::{content_hash, meta_text, RecordHeader, ZooRecord};
use crate::error::{Error, Result};
use crate::model::ModelArch;

pub const FORMAT_HEADER: &str = "metaprune-zoo v1";
const MANIFEST: &str = "manifest.txt";
const MANIFEST_TMP: &str = "manifest.txt.tmp";
const WEIGHTS: &str = "weights.bin";
const LOCK: &str = "zoo.lock";

/// Parsed `manifest.txt`: registered architectures and the record index in
/// append order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub archs: BTreeMap<String, ModelArch>,
    pub records: Vec<RecordHeader>,
}

impl Manifest {
    /// End of the last indexed blob.
    pub fn end(&self) -> u64 {
        self.records.iter().map(|r| r.offset + r.len).max().unwrap_or(0)
    }

    pub fn contains(&self, task_id: u64) -> bool {
        self.records.iter().any(|r| r.task_id == task_id)
    }

    fn render(&self) -> String {
        let mut s = format!("{FORMAT_HEADER}\n");
        for (h, a) in &self.archs {
            s.push_str(&format!("arch {h} {a}\n"));
        }
        for r in &self.records {
            s.push_str(&format!("{r}\n"));
        }
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(FORMAT_HEADER) => {}
            Some(other) => return Err(Error::Parse(format!("unsupported zoo format {other:?}"))),
            None => return Err(Error::Parse("empty zoo manifest".into())),
        }
        let mut m = Manifest::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("arch ") {
                let (h, desc) = rest.split_once(' ').ok_or_else(|| Error::Parse(format!("bad arch line {line:?}")))?;
                m.archs.insert(h.to_string(), desc.parse()?);
            } else {
                m.records.push(line.parse()?);
            }
        }
        let mut spans: Vec<(u64, u64)> = m.records.iter().map(|r| (r.offset, r.offset + r.len)).collect();
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Corrupt { task_id: None, reason: "manifest blobs overlap".into() });
        }
        Ok(m)
    }
}

/// Points in [`ZooStore::append_with_hook`] where a crash can be simulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppendStage {
    /// The payload is in `weights.bin` but no manifest has been written.
    BlobWritten,
    /// The new manifest is in its temporary file but not yet renamed.
    ManifestStaged,
}

/// Result of [`ZooStore::integrity_check`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntegrityReport {
    pub checked: usize,
    pub failures: Vec<(u64, String)>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Append-only record store in one directory. Appends serialize through an
/// advisory lock on `zoo.lock`; readers take no lock and see the manifest as
/// of their read, because the manifest is replaced by rename and indexed
/// blobs are never rewritten.
#[derive(Clone, Debug)]
pub struct ZooStore {
    dir: PathBuf,
}

impl ZooStore {
    /// Opens `dir`, initializing an empty store if it has no manifest.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let store = Self { dir };
        if !store.path(MANIFEST).exists() {
            let _lock = store.lock()?;
            if !store.path(MANIFEST).exists() {
                store.publish(&Manifest::default())?;
            }
        }
        Ok(store)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let store = Self { dir: dir.as_ref().to_path_buf() };
        if !store.path(MANIFEST).exists() {
            return Err(Error::Config(format!("no zoo at {}", store.dir.display())));
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn lock(&self) -> Result<File> {
        let f = OpenOptions::new().create(true).truncate(false).write(true).open(self.path(LOCK))?;
        f.lock()?;
        Ok(f)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::parse(&fs::read_to_string(self.path(MANIFEST))?)
    }

    /// Writes `m` to the temporary manifest and renames it into place.
    fn publish(&self, m: &Manifest) -> Result<()> {
        self.stage(m)?;
        self.commit()
    }

    fn stage(&self, m: &Manifest) -> Result<()> {
        let mut f = File::create(self.path(MANIFEST_TMP))?;
        f.write_all(m.render().as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    fn commit(&self) -> Result<()> {
        fs::rename(self.path(MANIFEST_TMP), self.path(MANIFEST))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    /// Registers `arch` under its fingerprint (idempotent).
    pub fn register_arch(&self, arch: &ModelArch) -> Result<String> {
        let _lock = self.lock()?;
        let mut m = self.manifest()?;
        let h = arch.fingerprint();
        match m.archs.get(&h) {
            Some(a) if a == arch => {}
            Some(a) => return Err(Error::Corrupt { task_id: None, reason: format!("fingerprint {h} already names {a}") }),
            None => {
                m.archs.insert(h.clone(), arch.clone());
                self.publish(&m)?;
            }
        }
        Ok(h)
    }

    pub fn append(&self, rec: &ZooRecord) -> Result<()> {
        self.append_with_hook(rec, |_| Ok(()))
    }

    /// [`ZooStore::append`] with a hook run at each [`AppendStage`]; an error
    /// from the hook aborts the append at that point, as a crash would.
    pub fn append_with_hook(&self, rec: &ZooRecord, mut hook: impl FnMut(AppendStage) -> Result<()>) -> Result<()> {
        for (what, v) in [("method", &rec.meta.method), ("criterion", &rec.meta.criterion)] {
            if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '=') {
                return Err(Error::Contract(format!("record {what} {v:?} must be a single token")));
            }
        }
        let _lock = self.lock()?;
        let mut m = self.manifest()?;
        let arch = m
            .archs
            .get(&rec.arch_hash)
            .ok_or_else(|| Error::Contract(format!("architecture {} is not registered", rec.arch_hash)))?;
        if rec.mask.widths() != arch.widths() {
            return Err(Error::Contract(format!("record mask does not fit registered architecture {arch}")));
        }
        if m.contains(rec.task_id) {
            return Err(Error::DuplicateTask(rec.task_id));
        }
        let payload = rec.payload();
        let offset = m.end();
        let mut w = OpenOptions::new().create(true).truncate(false).write(true).open(self.path(WEIGHTS))?;
        // Drop bytes left behind by an append that never reached the manifest.
        w.set_len(offset)?;
        w.seek(SeekFrom::Start(offset))?;
        w.write_all(&payload)?;
        w.sync_data()?;
        hook(AppendStage::BlobWritten)?;
        m.records.push(RecordHeader {
            task_id: rec.task_id,
            arch_hash: rec.arch_hash.clone(),
            meta: rec.meta.clone(),
            offset,
            len: payload.len() as u64,
            hash: content_hash(&payload, &rec.meta_text()),
            classes: rec.classes.clone(),
        });
        self.stage(&m)?;
        hook(AppendStage::ManifestStaged)?;
        self.commit()
    }

    /// Headers matching `pred`, in append order.
    pub fn query(&self, pred: impl Fn(&RecordHeader) -> bool) -> Result<Vec<RecordHeader>> {
        Ok(self.manifest()?.records.into_iter().filter(|r| pred(r)).collect())
    }

    fn read_blob(&self, h: &RecordHeader) -> Result<Vec<u8>> {
        let mut f = File::open(self.path(WEIGHTS))?;
        let size = f.metadata()?.len();
        if h.offset + h.len > size {
            return Err(Error::Corrupt {
                task_id: Some(h.task_id),
                reason: format!("blob ends at byte {} but weights.bin has {size}", h.offset + h.len),
            });
        }
        f.seek(SeekFrom::Start(h.offset))?;
        let mut buf = vec![0u8; h.len as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn load_header(&self, m: &Manifest, h: &RecordHeader) -> Result<ZooRecord> {
        let payload = self.read_blob(h)?;
        let actual = content_hash(&payload, &meta_text(h.task_id, &h.arch_hash, &h.meta, &h.classes));
        if actual != h.hash {
            return Err(Error::Corrupt { task_id: Some(h.task_id), reason: "content hash mismatch".into() });
        }
        let arch = m.archs.get(&h.arch_hash).ok_or_else(|| Error::Corrupt {
            task_id: Some(h.task_id),
            reason: format!("unregistered architecture {}", h.arch_hash),
        })?;
        ZooRecord::decode(h, arch, &payload)
    }

    pub fn load(&self, task_id: u64) -> Result<ZooRecord> {
        let m = self.manifest()?;
        let h = m
            .records
            .iter()
            .find(|r| r.task_id == task_id)
            .ok_or_else(|| Error::Contract(format!("task {task_id} is not in the zoo")))?;
        self.load_header(&m, h)
    }

    /// Every record, in append order, from one manifest snapshot.
    pub fn load_all(&self) -> Result<Vec<ZooRecord>> {
        let m = self.manifest()?;
        m.records.iter().map(|h| self.load_header(&m, h)).collect()
    }

    /// Re-reads and re-hashes every record; failures are collected, not thrown.
    pub fn integrity_check(&self) -> Result<IntegrityReport> {
        let m = self.manifest()?;
        let mut report = IntegrityReport::default();
        for h in &m.records {
            report.checked += 1;
            if let Err(e) = self.load_header(&m, h) {
                report.failures.push((h.task_id, e.to_string()));
            }
        }
        Ok(report)
    }
}
