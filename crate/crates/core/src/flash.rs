//! Simulated NAND array: geometry, per-page abstract states, and page data.
//!
//! The array is sparse: pages that are in the pristine erased state (all
//! 0xFF, programmable) carry no record. Every mutation keeps that canonical
//! form so that two arrays with equal observable contents compare equal
//! record-for-record (and hash-for-hash).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Magic bytes at the start of a snapshot file.
const SNAPSHOT_MAGIC: &[u8; 4] = b"CCAT";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FlashError {
    #[error("address {0:?} out of bounds")]
    OutOfBounds(PageAddress),
    #[error("data length {got} does not match page size {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("corrupted data buffer required for ProgrammedDataNotOk")]
    MissingCorruptData,
    #[error("snapshot geometry {0:?} does not match array geometry {1:?}")]
    GeometryMismatch(Geometry, Geometry),
    #[error("bad snapshot file: {0}")]
    BadSnapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Array dimensions. Defaults follow a 32Gbit MLC part on an 8-bit bus:
/// 4096 blocks of 128 pages of 4096 bytes per chip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub buses: u32,
    pub chips_per_bus: u32,
    pub blocks_per_chip: u32,
    pub pages_per_block: u32,
    pub page_size_bytes: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            buses: 2,
            chips_per_bus: 2,
            blocks_per_chip: 4096,
            pages_per_block: 128,
            page_size_bytes: 4096,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("buses", self.buses),
            ("chips_per_bus", self.chips_per_bus),
            ("blocks_per_chip", self.blocks_per_chip),
            ("pages_per_block", self.pages_per_block),
            ("page_size_bytes", self.page_size_bytes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(format!("geometry field {name} must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, addr: PageAddress) -> bool {
        addr.bus < self.buses
            && addr.chip < self.chips_per_bus
            && addr.block < self.blocks_per_chip
            && addr.page < self.pages_per_block
    }

    pub fn page_size(&self) -> usize {
        self.page_size_bytes as usize
    }

    /// Total pages across the whole array.
    pub fn total_pages(&self) -> u64 {
        self.buses as u64
            * self.chips_per_bus as u64
            * self.blocks_per_chip as u64
            * self.pages_per_block as u64
    }

    /// Flat chip index, used for per-chip RNG streams and resource tables.
    pub fn chip_index(&self, bus: u32, chip: u32) -> usize {
        (bus * self.chips_per_bus + chip) as usize
    }

    pub fn chip_count(&self) -> usize {
        (self.buses * self.chips_per_bus) as usize
    }
}

/// (bus, chip, block, page) coordinate into the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageAddress {
    pub bus: u32,
    pub chip: u32,
    pub block: u32,
    pub page: u32,
}

impl PageAddress {
    pub fn new(bus: u32, chip: u32, block: u32, page: u32) -> Self {
        PageAddress { bus, chip, block, page }
    }

    /// Address of page 0 in the same block; erase operations are keyed on this.
    pub fn block_base(&self) -> PageAddress {
        PageAddress { page: 0, ..*self }
    }
}

impl std::fmt::Display for PageAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}.{}.{}", self.bus, self.chip, self.block, self.page)
    }
}

/// The four abstract per-page states of the fault model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbstractPageState {
    ErasedProgrammable,
    ErasedNotProgrammable,
    ProgrammedDataOk,
    ProgrammedDataNotOk,
}

impl AbstractPageState {
    pub fn is_erased(self) -> bool {
        matches!(
            self,
            AbstractPageState::ErasedProgrammable | AbstractPageState::ErasedNotProgrammable
        )
    }

    pub fn code(self) -> u8 {
        match self {
            AbstractPageState::ErasedProgrammable => 0,
            AbstractPageState::ErasedNotProgrammable => 1,
            AbstractPageState::ProgrammedDataOk => 2,
            AbstractPageState::ProgrammedDataNotOk => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AbstractPageState::ErasedProgrammable),
            1 => Some(AbstractPageState::ErasedNotProgrammable),
            2 => Some(AbstractPageState::ProgrammedDataOk),
            3 => Some(AbstractPageState::ProgrammedDataNotOk),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AbstractPageState::ErasedProgrammable => "erased_programmable",
            AbstractPageState::ErasedNotProgrammable => "erased_not_programmable",
            AbstractPageState::ProgrammedDataOk => "programmed_data_ok",
            AbstractPageState::ProgrammedDataNotOk => "programmed_data_not_ok",
        }
    }
}

/// State plus contents of one page. Erased states always hold all 0xFF.
#[derive(Debug, Clone, PartialEq, Eq)]
struct PageRecord {
    state: AbstractPageState,
    data: Vec<u8>,
}

/// In-memory array contents. Only pages that differ from the pristine
/// erased-programmable state are stored.
#[derive(Debug, Clone)]
pub struct FlashArray {
    geometry: Geometry,
    pages: BTreeMap<PageAddress, PageRecord>,
}

impl FlashArray {
    pub fn new(geometry: Geometry) -> Self {
        FlashArray { geometry, pages: BTreeMap::new() }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn check_bounds(&self, addr: PageAddress) -> Result<(), FlashError> {
        if self.geometry.contains(addr) {
            Ok(())
        } else {
            Err(FlashError::OutOfBounds(addr))
        }
    }

    fn erased_page(&self) -> Vec<u8> {
        vec![0xFF; self.geometry.page_size()]
    }

    /// Returns a copy of the stored bytes and the current abstract state.
    pub fn read_page(&self, addr: PageAddress) -> Result<(Vec<u8>, AbstractPageState), FlashError> {
        self.check_bounds(addr)?;
        match self.pages.get(&addr) {
            Some(rec) => Ok((rec.data.clone(), rec.state)),
            None => Ok((self.erased_page(), AbstractPageState::ErasedProgrammable)),
        }
    }

    /// State without copying the data.
    pub fn page_state(&self, addr: PageAddress) -> Result<AbstractPageState, FlashError> {
        self.check_bounds(addr)?;
        Ok(self
            .pages
            .get(&addr)
            .map(|r| r.state)
            .unwrap_or(AbstractPageState::ErasedProgrammable))
    }

    /// Records a successful program: the page now holds `data` and is valid.
    pub fn commit_program(&mut self, addr: PageAddress, data: &[u8]) -> Result<(), FlashError> {
        self.check_bounds(addr)?;
        if data.len() != self.geometry.page_size() {
            return Err(FlashError::SizeMismatch {
                got: data.len(),
                want: self.geometry.page_size(),
            });
        }
        self.pages.insert(
            addr,
            PageRecord { state: AbstractPageState::ProgrammedDataOk, data: data.to_vec() },
        );
        Ok(())
    }

    /// Records a successful erase: every page in the block returns to the
    /// pristine erased-programmable state.
    pub fn commit_erase(&mut self, addr: PageAddress) -> Result<(), FlashError> {
        self.check_bounds(addr)?;
        for page in 0..self.geometry.pages_per_block {
            self.pages.remove(&PageAddress { page, ..addr.block_base() });
        }
        Ok(())
    }

    /// Forces a page into an arbitrary abstract state, as decided by the
    /// fault model. Erased states discard `corrupted_data` and pin the page
    /// to all 0xFF; `ProgrammedDataNotOk` requires the corrupted buffer.
    pub fn set_state(
        &mut self,
        addr: PageAddress,
        state: AbstractPageState,
        corrupted_data: Option<&[u8]>,
    ) -> Result<(), FlashError> {
        self.check_bounds(addr)?;
        match state {
            AbstractPageState::ErasedProgrammable => {
                // Canonical form: pristine pages carry no record.
                self.pages.remove(&addr);
            }
            AbstractPageState::ErasedNotProgrammable => {
                self.pages.insert(addr, PageRecord { state, data: self.erased_page() });
            }
            AbstractPageState::ProgrammedDataOk => {
                let data = match corrupted_data {
                    Some(d) => d.to_vec(),
                    // Keep whatever the page currently holds.
                    None => self.read_page(addr)?.0,
                };
                if data.len() != self.geometry.page_size() {
                    return Err(FlashError::SizeMismatch {
                        got: data.len(),
                        want: self.geometry.page_size(),
                    });
                }
                self.pages.insert(addr, PageRecord { state, data });
            }
            AbstractPageState::ProgrammedDataNotOk => {
                let data = corrupted_data.ok_or(FlashError::MissingCorruptData)?;
                if data.len() != self.geometry.page_size() {
                    return Err(FlashError::SizeMismatch {
                        got: data.len(),
                        want: self.geometry.page_size(),
                    });
                }
                self.pages.insert(addr, PageRecord { state, data: data.to_vec() });
            }
        }
        Ok(())
    }

    /// Count of pages per state over the whole array, indexed by state code.
    pub fn state_tallies(&self) -> [u64; 4] {
        let mut tallies = [0u64; 4];
        for rec in self.pages.values() {
            tallies[rec.state.code() as usize] += 1;
        }
        let recorded: u64 = tallies.iter().sum();
        tallies[0] += self.geometry.total_pages() - recorded;
        tallies
    }

    /// Checks the erased-implies-0xFF invariant over every stored record.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (addr, rec) in &self.pages {
            if rec.data.len() != self.geometry.page_size() {
                return Err(format!("page {addr}: bad record length {}", rec.data.len()));
            }
            if rec.state.is_erased() && rec.data.iter().any(|&b| b != 0xFF) {
                return Err(format!("page {addr}: erased state with non-0xFF data"));
            }
            if rec.state == AbstractPageState::ErasedProgrammable {
                return Err(format!("page {addr}: pristine page stored explicitly"));
            }
        }
        Ok(())
    }

    /// Content digest over geometry plus every non-pristine page, in address
    /// order. Two arrays with identical observable contents hash identically.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let g = &self.geometry;
        for v in [g.buses, g.chips_per_bus, g.blocks_per_chip, g.pages_per_block, g.page_size_bytes]
        {
            hasher.update(v.to_le_bytes());
        }
        for (addr, rec) in &self.pages {
            for v in [addr.bus, addr.chip, addr.block, addr.page] {
                hasher.update(v.to_le_bytes());
            }
            hasher.update([rec.state.code()]);
            hasher.update(&rec.data);
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// Writes the full array (header + one state byte and the raw page bytes
    /// per page, in address order) to `path`.
    pub fn snapshot(&self, path: &Path) -> Result<(), FlashError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        let g = &self.geometry;
        for v in [g.buses, g.chips_per_bus, g.blocks_per_chip, g.pages_per_block, g.page_size_bytes]
        {
            w.write_all(&v.to_le_bytes())?;
        }
        let erased = self.erased_page();
        for bus in 0..g.buses {
            for chip in 0..g.chips_per_bus {
                for block in 0..g.blocks_per_chip {
                    for page in 0..g.pages_per_block {
                        let addr = PageAddress::new(bus, chip, block, page);
                        match self.pages.get(&addr) {
                            Some(rec) => {
                                w.write_all(&[rec.state.code()])?;
                                w.write_all(&rec.data)?;
                            }
                            None => {
                                w.write_all(&[AbstractPageState::ErasedProgrammable.code()])?;
                                w.write_all(&erased)?;
                            }
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Replaces the array contents with a snapshot taken from an array of the
    /// same geometry.
    pub fn restore(&mut self, path: &Path) -> Result<(), FlashError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(FlashError::BadSnapshot("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != SNAPSHOT_VERSION {
            return Err(FlashError::BadSnapshot(format!("unsupported version {version}")));
        }
        let mut fields = [0u32; 5];
        for f in &mut fields {
            r.read_exact(&mut word)?;
            *f = u32::from_le_bytes(word);
        }
        let file_geom = Geometry {
            buses: fields[0],
            chips_per_bus: fields[1],
            blocks_per_chip: fields[2],
            pages_per_block: fields[3],
            page_size_bytes: fields[4],
        };
        if file_geom != self.geometry {
            return Err(FlashError::GeometryMismatch(file_geom, self.geometry));
        }
        let g = self.geometry;
        let mut pages = BTreeMap::new();
        let mut state_byte = [0u8; 1];
        let mut data = vec![0u8; g.page_size()];
        for bus in 0..g.buses {
            for chip in 0..g.chips_per_bus {
                for block in 0..g.blocks_per_chip {
                    for page in 0..g.pages_per_block {
                        r.read_exact(&mut state_byte)?;
                        let state = AbstractPageState::from_code(state_byte[0]).ok_or_else(
                            || FlashError::BadSnapshot(format!("state code {}", state_byte[0])),
                        )?;
                        r.read_exact(&mut data)?;
                        if state != AbstractPageState::ErasedProgrammable {
                            pages.insert(
                                PageAddress::new(bus, chip, block, page),
                                PageRecord { state, data: data.clone() },
                            );
                        }
                    }
                }
            }
        }
        self.pages = pages;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geometry() -> Geometry {
        Geometry {
            buses: 1,
            chips_per_bus: 2,
            blocks_per_chip: 4,
            pages_per_block: 128,
            page_size_bytes: 64,
        }
    }

    fn addr(block: u32, page: u32) -> PageAddress {
        PageAddress::new(0, 0, block, page)
    }

    #[test]
    fn fresh_page_reads_erased_ff() {
        let arr = FlashArray::new(small_geometry());
        let (data, state) = arr.read_page(addr(0, 0)).unwrap();
        assert_eq!(state, AbstractPageState::ErasedProgrammable);
        assert!(data.iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn program_then_read_round_trip() {
        let mut arr = FlashArray::new(small_geometry());
        let pattern: Vec<u8> = (0..64).map(|i| i as u8).collect();
        arr.commit_program(addr(1, 3), &pattern).unwrap();
        let (data, state) = arr.read_page(addr(1, 3)).unwrap();
        assert_eq!(state, AbstractPageState::ProgrammedDataOk);
        assert_eq!(data, pattern);
    }

    #[test]
    fn program_isolation() {
        let mut arr = FlashArray::new(small_geometry());
        arr.commit_program(addr(0, 0), &[0xAB; 64]).unwrap();
        let (data, state) = arr.read_page(addr(0, 1)).unwrap();
        assert_eq!(state, AbstractPageState::ErasedProgrammable);
        assert!(data.iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn fill_block_and_read_back() {
        let g = small_geometry();
        let mut arr = FlashArray::new(g);
        for page in 0..g.pages_per_block {
            arr.commit_program(addr(2, page), &[page as u8; 64]).unwrap();
        }
        for page in 0..g.pages_per_block {
            let (data, state) = arr.read_page(addr(2, page)).unwrap();
            assert_eq!(state, AbstractPageState::ProgrammedDataOk);
            assert_eq!(data, vec![page as u8; 64]);
        }
    }

    #[test]
    fn erase_resets_whole_block() {
        let g = small_geometry();
        let mut arr = FlashArray::new(g);
        for page in [0, 5, 17] {
            arr.commit_program(addr(1, page), &[0x55; 64]).unwrap();
        }
        arr.commit_erase(addr(1, 9).block_base()).unwrap();
        for page in 0..g.pages_per_block {
            let (data, state) = arr.read_page(addr(1, page)).unwrap();
            assert_eq!(state, AbstractPageState::ErasedProgrammable);
            assert!(data.iter().all(|&b| b == 0xFF));
        }
    }

    #[test]
    fn erase_does_not_touch_neighbor_block() {
        let mut arr = FlashArray::new(small_geometry());
        arr.commit_program(addr(2, 0), &[0x77; 64]).unwrap();
        arr.commit_erase(addr(1, 0)).unwrap();
        let (data, state) = arr.read_page(addr(2, 0)).unwrap();
        assert_eq!(state, AbstractPageState::ProgrammedDataOk);
        assert_eq!(data, vec![0x77; 64]);
    }

    #[test]
    fn erase_program_erase_restores_initial_hash() {
        let mut arr = FlashArray::new(small_geometry());
        let initial = arr.content_hash();
        arr.commit_program(addr(0, 4), &[0x11; 64]).unwrap();
        assert_ne!(arr.content_hash(), initial);
        arr.commit_erase(addr(0, 0)).unwrap();
        assert_eq!(arr.content_hash(), initial);
    }

    #[test]
    fn set_state_erased_not_programmable_reads_ff() {
        let mut arr = FlashArray::new(small_geometry());
        arr.commit_program(addr(0, 0), &[0u8; 64]).unwrap();
        arr.set_state(addr(0, 0), AbstractPageState::ErasedNotProgrammable, None).unwrap();
        let (data, state) = arr.read_page(addr(0, 0)).unwrap();
        assert_eq!(state, AbstractPageState::ErasedNotProgrammable);
        assert!(data.iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn set_state_not_ok_requires_and_keeps_corrupt_buffer() {
        let mut arr = FlashArray::new(small_geometry());
        let err = arr.set_state(addr(0, 0), AbstractPageState::ProgrammedDataNotOk, None);
        assert!(matches!(err, Err(FlashError::MissingCorruptData)));
        let corrupted = vec![0xA5; 64];
        arr.set_state(addr(0, 0), AbstractPageState::ProgrammedDataNotOk, Some(&corrupted))
            .unwrap();
        let (data, state) = arr.read_page(addr(0, 0)).unwrap();
        assert_eq!(state, AbstractPageState::ProgrammedDataNotOk);
        assert_eq!(data, corrupted);
    }

    #[test]
    fn out_of_bounds_is_rejected_everywhere() {
        let mut arr = FlashArray::new(small_geometry());
        let bad = PageAddress::new(0, 0, 4, 0);
        assert!(matches!(arr.read_page(bad), Err(FlashError::OutOfBounds(_))));
        assert!(matches!(arr.commit_program(bad, &[0; 64]), Err(FlashError::OutOfBounds(_))));
        assert!(matches!(arr.commit_erase(bad), Err(FlashError::OutOfBounds(_))));
        assert!(matches!(
            arr.set_state(bad, AbstractPageState::ErasedProgrammable, None),
            Err(FlashError::OutOfBounds(_))
        ));
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let g = small_geometry();
        let mut arr = FlashArray::new(g);
        arr.commit_program(addr(0, 1), &[0x42; 64]).unwrap();
        arr.set_state(addr(3, 2), AbstractPageState::ErasedNotProgrammable, None).unwrap();
        arr.set_state(addr(2, 7), AbstractPageState::ProgrammedDataNotOk, Some(&[0x99; 64]))
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("array.snap");
        arr.snapshot(&path).unwrap();

        let mut restored = FlashArray::new(g);
        restored.restore(&path).unwrap();
        assert_eq!(restored.content_hash(), arr.content_hash());
        for block in 0..g.blocks_per_chip {
            for page in 0..g.pages_per_block {
                assert_eq!(
                    restored.read_page(addr(block, page)).unwrap(),
                    arr.read_page(addr(block, page)).unwrap()
                );
            }
        }
    }

    #[test]
    fn restore_rejects_mismatched_geometry() {
        let arr = FlashArray::new(small_geometry());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("array.snap");
        arr.snapshot(&path).unwrap();

        let other = Geometry { blocks_per_chip: 8, ..small_geometry() };
        let mut target = FlashArray::new(other);
        assert!(matches!(target.restore(&path), Err(FlashError::GeometryMismatch(_, _))));
    }

    #[test]
    fn random_set_state_sequences_keep_invariants() {
        use rand::{Rng, SeedableRng};
        let g = small_geometry();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut arr = FlashArray::new(g);
        let states = [
            AbstractPageState::ErasedProgrammable,
            AbstractPageState::ErasedNotProgrammable,
            AbstractPageState::ProgrammedDataOk,
            AbstractPageState::ProgrammedDataNotOk,
        ];
        for _ in 0..2000 {
            let a = PageAddress::new(
                0,
                rng.random_range(0..g.chips_per_bus),
                rng.random_range(0..g.blocks_per_chip),
                rng.random_range(0..g.pages_per_block),
            );
            let s = states[rng.random_range(0..4)];
            let buf = vec![rng.random::<u8>(); g.page_size()];
            let corrupted = matches!(
                s,
                AbstractPageState::ProgrammedDataNotOk | AbstractPageState::ProgrammedDataOk
            )
            .then_some(buf.as_slice());
            arr.set_state(a, s, corrupted).unwrap();
            let (data, state) = arr.read_page(a).unwrap();
            assert_eq!(state, s);
            if state.is_erased() {
                assert!(data.iter().all(|&b| b == 0xFF));
            }
        }
        arr.check_invariants().unwrap();
    }
}
