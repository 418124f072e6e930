//! The abstract fault model: probabilistic internal erase/program faults,
//! power-failure outcomes, and data corruption for bad pages.
//!
//! Each page behaves as a nondeterministic state machine over the four
//! abstract states. Internal faults are reported by the status check of the
//! failing operation; a power failure produces no status at all and leaves
//! every interrupted erase/program in a configurable distribution over the
//! state set. The exact transition arcs are a weakest-assumption superset:
//! every weight is config-exposed so a stricter model can be dialed in.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{AbstractPageState, FlashArray, FlashError, PageAddress};
use crate::timing::OpKind;

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("page {0} is not programmable (state {1:?})")]
    PreconditionViolated(PageAddress, AbstractPageState),
    #[error(transparent)]
    Flash(#[from] FlashError),
}

/// Internal faults surface through the status check; external faults
/// (power failures) arrive as events and produce no status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    InternalFault,
    PowerFailure,
}

/// Probabilities and weights of the fault model.
///
/// The four-element weight vectors are indexed by abstract state code:
/// erased-programmable, erased-not-programmable, programmed-data-ok,
/// programmed-data-not-ok. `erase_if_weights` covers the two failure-flavored
/// states an internally failed erase can leave behind (not-programmable,
/// data-not-ok).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    pub p_erase_internal: f64,
    pub p_program_internal: f64,
    /// A program is failed when the page differs from the intended data in
    /// more than this many bits.
    pub program_bitdiff_threshold: u32,
    pub pf_program_weights: [f64; 4],
    pub pf_erase_weights: [f64; 4],
    pub erase_if_weights: [f64; 2],
    /// Lower bound on injected bit flips; must exceed the bit-diff threshold
    /// so corrupted pages are always detectable.
    pub corrupt_min_flips: u32,
    pub rng_seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            p_erase_internal: 0.0,
            p_program_internal: 0.0,
            program_bitdiff_threshold: 8,
            pf_program_weights: [0.25; 4],
            pf_erase_weights: [0.25; 4],
            erase_if_weights: [0.5; 2],
            corrupt_min_flips: 16,
            rng_seed: 42,
        }
    }
}

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

impl FaultConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in
            [("p_erase_internal", self.p_erase_internal), ("p_program_internal", self.p_program_internal)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0,1]"));
            }
        }
        for (name, sum) in [
            ("pf_program_weights", self.pf_program_weights.iter().sum::<f64>()),
            ("pf_erase_weights", self.pf_erase_weights.iter().sum::<f64>()),
            ("erase_if_weights", self.erase_if_weights.iter().sum::<f64>()),
        ] {
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(format!("{name} must sum to 1 (got {sum})"));
            }
        }
        if self
            .pf_program_weights
            .iter()
            .chain(self.pf_erase_weights.iter())
            .chain(self.erase_if_weights.iter())
            .any(|w| !(0.0..=1.0).contains(w))
        {
            return Err("fault weights must be in [0,1]".into());
        }
        if self.corrupt_min_flips <= self.program_bitdiff_threshold {
            return Err("corrupt_min_flips must exceed program_bitdiff_threshold".into());
        }
        Ok(())
    }
}

/// Draws an index from a normalized weight vector using a single RNG value.
fn weighted_draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i;
        }
    }
    weights.len() - 1
}

const STATE_BY_CODE: [AbstractPageState; 4] = [
    AbstractPageState::ErasedProgrammable,
    AbstractPageState::ErasedNotProgrammable,
    AbstractPageState::ProgrammedDataOk,
    AbstractPageState::ProgrammedDataNotOk,
];

/// Applies fault outcomes to the array per the configured model.
#[derive(Debug, Clone)]
pub struct FaultEngine {
    cfg: FaultConfig,
}

impl FaultEngine {
    pub fn new(cfg: FaultConfig) -> Self {
        FaultEngine { cfg }
    }

    pub fn config(&self) -> &FaultConfig {
        &self.cfg
    }

    /// Decides whether this erase/program suffers an internal fault. Draws
    /// exactly one RNG value so replays stay aligned.
    pub fn roll_internal_fault<R: Rng + ?Sized>(&self, op: OpKind, rng: &mut R) -> bool {
        let p = match op {
            OpKind::Erase => self.cfg.p_erase_internal,
            OpKind::Program => self.cfg.p_program_internal,
            OpKind::Read => 0.0,
        };
        rng.random_bool(p)
    }

    /// Flips k distinct bits, k uniform in [corrupt_min_flips,
    /// 2*corrupt_min_flips], so the result always exceeds the bit-diff
    /// threshold. Deterministic for a given (data, rng state).
    pub fn corrupt<R: Rng + ?Sized>(&self, data: &[u8], rng: &mut R) -> Vec<u8> {
        let total_bits = data.len() as u64 * 8;
        let min = self.cfg.corrupt_min_flips as u64;
        let k = rng.random_range(min..=2 * min).min(total_bits);
        let mut out = data.to_vec();
        let mut flipped = std::collections::HashSet::with_capacity(k as usize);
        while (flipped.len() as u64) < k {
            let bit = rng.random_range(0..total_bits);
            if flipped.insert(bit) {
                out[(bit / 8) as usize] ^= 1 << (bit % 8);
            }
        }
        out
    }

    /// Resolves a program operation on a programmable page.
    ///
    /// No fault commits the intended data. An internal fault corrupts it and
    /// leaves the page data-not-ok (the status check reports the failure).
    /// A power failure draws the resulting state from `pf_program_weights`;
    /// the two flags never arrive together because losing power suppresses
    /// the status check entirely.
    pub fn apply_program_outcome<R: Rng + ?Sized>(
        &self,
        flash: &mut FlashArray,
        addr: PageAddress,
        intended_data: &[u8],
        internal_fault: bool,
        power_failure: bool,
        rng: &mut R,
    ) -> Result<AbstractPageState, FaultError> {
        assert!(!(internal_fault && power_failure), "power failure preempts the status check");
        let current = flash.page_state(addr)?;
        if current != AbstractPageState::ErasedProgrammable {
            return Err(FaultError::PreconditionViolated(addr, current));
        }
        let state = if power_failure {
            STATE_BY_CODE[weighted_draw(&self.cfg.pf_program_weights, rng)]
        } else if internal_fault {
            AbstractPageState::ProgrammedDataNotOk
        } else {
            AbstractPageState::ProgrammedDataOk
        };
        match state {
            AbstractPageState::ErasedProgrammable | AbstractPageState::ErasedNotProgrammable => {
                flash.set_state(addr, state, None)?;
            }
            AbstractPageState::ProgrammedDataOk => {
                flash.commit_program(addr, intended_data)?;
            }
            AbstractPageState::ProgrammedDataNotOk => {
                let corrupted = self.corrupt(intended_data, rng);
                flash.set_state(addr, state, Some(&corrupted))?;
            }
        }
        Ok(state)
    }

    /// Resolves an erase operation over a whole block, returning the
    /// resulting state of each page in page order.
    ///
    /// A clean erase resets every page. An internal fault draws each page
    /// independently from the two failure-flavored states; a power failure
    /// draws each page independently from all four states.
    pub fn apply_erase_outcome<R: Rng + ?Sized>(
        &self,
        flash: &mut FlashArray,
        block_addr: PageAddress,
        internal_fault: bool,
        power_failure: bool,
        rng: &mut R,
    ) -> Result<Vec<AbstractPageState>, FaultError> {
        assert!(!(internal_fault && power_failure), "power failure preempts the status check");
        let base = block_addr.block_base();
        let pages = flash.geometry().pages_per_block;
        if !flash.geometry().contains(base) {
            return Err(FlashError::OutOfBounds(base).into());
        }
        let mut states = Vec::with_capacity(pages as usize);
        for page in 0..pages {
            let addr = PageAddress { page, ..base };
            let state = if power_failure {
                STATE_BY_CODE[weighted_draw(&self.cfg.pf_erase_weights, rng)]
            } else if internal_fault {
                match weighted_draw(&self.cfg.erase_if_weights, rng) {
                    0 => AbstractPageState::ErasedNotProgrammable,
                    _ => AbstractPageState::ProgrammedDataNotOk,
                }
            } else {
                AbstractPageState::ErasedProgrammable
            };
            match state {
                AbstractPageState::ProgrammedDataOk => {
                    // Old contents survive the interrupted erase untouched.
                    flash.set_state(addr, state, None)?;
                }
                AbstractPageState::ProgrammedDataNotOk => {
                    let (current, _) = flash.read_page(addr)?;
                    let corrupted = self.corrupt(&current, rng);
                    flash.set_state(addr, state, Some(&corrupted))?;
                }
                _ => flash.set_state(addr, state, None)?,
            }
            states.push(state);
        }
        Ok(states)
    }
}

/// Number of differing bits between two equal-length buffers.
pub fn bit_difference(a: &[u8], b: &[u8]) -> u64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
}
