use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Cooperative cancellation shared between a caller and a long search.
#[derive(Clone, Debug, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> CancelToken {
        CancelToken::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::Relaxed);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::Relaxed)
    }

    pub fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }
}

/// Stage horizon plus cancellation, threaded through the searches.
#[derive(Clone, Debug)]
pub struct Horizon {
    pub max_stage: usize,
    pub cancel: CancelToken,
}

impl Horizon {
    pub fn new(max_stage: usize) -> Horizon {
        Horizon { max_stage, cancel: CancelToken::new() }
    }

    pub fn check(&self) -> Result<()> {
        self.cancel.check()
    }
}

impl Default for Horizon {
    fn default() -> Horizon {
        Horizon::new(16)
    }
}
