//! Optional processor-affinity hints for the dedicated threads.
//!
//! Set `NANDSIM_AFFINITY=engine=0,executor=1,align=2` to pin the engine,
//! execution unit, and alignment unit to specific cores. Unset roles float.

/// Per-role core assignments parsed from the environment.
#[derive(Debug, Clone, Copy, Default)]
pub struct AffinityHints {
    pub engine: Option<usize>,
    pub executor: Option<usize>,
    pub align: Option<usize>,
}

pub const AFFINITY_ENV: &str = "NANDSIM_AFFINITY";

impl AffinityHints {
    pub fn from_env() -> Self {
        match std::env::var(AFFINITY_ENV) {
            Ok(v) => Self::parse(&v),
            Err(_) => AffinityHints::default(),
        }
    }

    pub fn parse(text: &str) -> Self {
        let mut hints = AffinityHints::default();
        for part in text.split(',') {
            let Some((role, core)) = part.split_once('=') else { continue };
            let Ok(core) = core.trim().parse::<usize>() else { continue };
            match role.trim() {
                "engine" => hints.engine = Some(core),
                "executor" => hints.executor = Some(core),
                "align" => hints.align = Some(core),
                _ => {}
            }
        }
        hints
    }
}

/// Pins the calling thread to `core`. Best effort: failures are ignored,
/// this is a hint.
#[cfg(target_os = "linux")]
pub fn pin_current_thread(core: usize) {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(core, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread(_core: usize) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_role_assignments() {
        let h = AffinityHints::parse("engine=2,align=0");
        assert_eq!(h.engine, Some(2));
        assert_eq!(h.executor, None);
        assert_eq!(h.align, Some(0));
        let h = AffinityHints::parse("nonsense");
        assert_eq!(h.engine, None);
    }
}
