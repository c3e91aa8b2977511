use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::SandboxError;

/// Per-tag build deduplication. Builds for different tags run in parallel;
/// concurrent requests for one tag wait for a single build. Failures are
/// not cached, so a later call retries.
#[derive(Debug, Default)]
pub struct ImageCache {
    slots: Mutex<HashMap<String, Arc<Mutex<bool>>>>,
}

impl ImageCache {
    pub fn get_or_build<F>(&self, tag: &str, build: F) -> Result<String, SandboxError>
    where
        F: FnOnce() -> Result<(), SandboxError>,
    {
        let slot = self
            .slots
            .lock()
            .unwrap()
            .entry(tag.to_string())
            .or_default()
            .clone();
        let mut built = slot.lock().unwrap();
        if !*built {
            build()?;
            *built = true;
        }
        Ok(tag.to_string())
    }

    pub fn contains(&self, tag: &str) -> bool {
        let slot = self.slots.lock().unwrap().get(tag).cloned();
        slot.is_some_and(|s| *s.lock().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::thread;
    use std::time::Duration;

    #[test]
    fn builds_once_per_tag_under_contention() {
        let cache = Arc::new(ImageCache::default());
        let builds = Arc::new(AtomicUsize::new(0));
        let workers: Vec<_> = (0..8)
            .map(|i| {
                let (cache, builds) = (cache.clone(), builds.clone());
                thread::spawn(move || {
                    let tag = if i % 2 == 0 { "a" } else { "b" };
                    cache
                        .get_or_build(tag, || {
                            builds.fetch_add(1, Ordering::SeqCst);
                            thread::sleep(Duration::from_millis(50));
                            Ok(())
                        })
                        .unwrap()
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        assert_eq!(builds.load(Ordering::SeqCst), 2);
        assert!(cache.contains("a") && cache.contains("b"));
    }

    #[test]
    fn failures_are_retried() {
        let cache = ImageCache::default();
        let err = cache.get_or_build("t", || {
            Err(SandboxError::BuildError {
                tag: "t".into(),
                log_tail: "boom".into(),
            })
        });
        assert!(err.is_err());
        assert!(!cache.contains("t"));
        assert!(cache.get_or_build("t", || Ok(())).is_ok());
        assert!(cache.contains("t"));
    }
}
