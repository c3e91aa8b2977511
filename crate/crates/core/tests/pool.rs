mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use polyjudge_core::harness::{JobRequest, TestStatus};
use polyjudge_core::langconfig::build_plan;
use polyjudge_core::sandbox::{
    ContainerState, Isolation, Pool, ProcessDriver, ReturnVerdict, SandboxDriver, SandboxError,
};
use polyjudge_core::verifier::{build_job, VerifyOptions};

fn bash_job(program: &str, tests: &[(&str, &str)]) -> JobRequest {
    let options = VerifyOptions {
        test_timeout: Duration::from_secs(5),
        ..VerifyOptions::default()
    };
    build_job(program, &task("t", tests), &config("bash"), &options)
}

fn kill(pid: u32) {
    // SAFETY: plain kill(2) on a pid we spawned.
    unsafe { libc::kill(pid as i32, libc::SIGKILL) };
}

/// True once `pid` is gone or a zombie.
fn is_dead(pid: u32) -> bool {
    std::fs::read_to_string(format!("/proc/{pid}/stat"))
        .map(|s| s.rsplit(')').next().unwrap_or("").trim_start().starts_with('Z'))
        .unwrap_or(true)
}

fn wait_for(what: &str, timeout: Duration, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + timeout;
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn two_checkouts_get_distinct_busy_containers() {
    let pool = process_pool(small_pool_config(2), &["bash"]);
    let a = pool.checkout("bash").unwrap();
    let b = pool.checkout("bash").unwrap();
    assert_ne!(a.id(), b.id());
    assert_eq!(a.state(), ContainerState::Busy);
    assert_eq!(b.state(), ContainerState::Busy);
    let m = &pool.metrics().languages["bash"];
    assert_eq!((m.warm, m.busy), (0, 2));
    a.give_back(ReturnVerdict::Clean);
    b.give_back(ReturnVerdict::Clean);
}

#[test]
fn third_checkout_blocks_until_a_return() {
    let pool = process_pool(small_pool_config(2), &["bash"]);
    let a = pool.checkout("bash").unwrap();
    let b = pool.checkout("bash").unwrap();
    let (tx, rx) = mpsc::channel();
    let p = pool.clone();
    let waiter = thread::spawn(move || {
        let c = p.checkout("bash").unwrap();
        tx.send(c.id().to_string()).unwrap();
        c.give_back(ReturnVerdict::Clean);
    });
    assert!(rx.recv_timeout(Duration::from_millis(500)).is_err());
    let returned = a.id().to_string();
    a.give_back(ReturnVerdict::Clean);
    let got = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(got, returned);
    waiter.join().unwrap();
    b.give_back(ReturnVerdict::Clean);
}

#[test]
fn clean_return_reuses_container_with_empty_workdir() {
    let pool = process_pool(small_pool_config(1), &["bash"]);
    let mut h = pool.checkout("bash").unwrap();
    let id = h.id().to_string();
    let report = h
        .run_job(&bash_job("echo data > leftover.txt; ls\n", &[("", "leftover.txt\nmain.sh\n")]))
        .unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::Passed);
    h.give_back(ReturnVerdict::Clean);

    let mut h = pool.checkout("bash").unwrap();
    assert_eq!(h.id(), id);
    assert_eq!(h.jobs_served(), 1);
    let report = h.run_job(&bash_job("ls -A\n", &[("", "main.sh\n")])).unwrap();
    assert_eq!(
        report.outcomes[0].status,
        TestStatus::Passed,
        "{:?}",
        report.outcomes[0]
    );
    h.give_back(ReturnVerdict::Clean);
}

#[test]
fn dirty_return_never_reappears() {
    let pool = process_pool(small_pool_config(2), &["bash"]);
    let h = pool.checkout("bash").unwrap();
    let dirty = h.id().to_string();
    h.give_back(ReturnVerdict::Dirty);
    for _ in 0..20 {
        let h = pool.checkout("bash").unwrap();
        assert_ne!(h.id(), dirty);
        h.give_back(ReturnVerdict::Clean);
    }
    pool.wait_until_ready("bash", Duration::from_secs(10)).unwrap();
    assert!(pool.snapshot("bash").iter().all(|c| c.id != dirty));
    assert_eq!(pool.metrics().languages["bash"].discarded, 1);
}

#[test]
fn dropped_handle_counts_as_dirty() {
    let pool = process_pool(small_pool_config(1), &["bash"]);
    let id = {
        let h = pool.checkout("bash").unwrap();
        h.id().to_string()
    };
    let h = pool.checkout("bash").unwrap();
    assert_ne!(h.id(), id);
}

#[test]
fn retirement_after_max_jobs() {
    let mut cfg = small_pool_config(1);
    cfg.max_jobs_per_container = Some(100);
    let pool = process_pool(cfg, &["bash"]);
    let mut ids = HashSet::new();
    for _ in 0..1000 {
        let h = pool.checkout("bash").unwrap();
        ids.insert(h.id().to_string());
        assert!(h.jobs_served() < 100);
        h.give_back(ReturnVerdict::Clean);
    }
    assert!(ids.len() >= 10, "{} ids", ids.len());
    let m = &pool.metrics().languages["bash"];
    assert_eq!(m.jobs_served, 1000);
    assert_eq!(m.retired, 10);
}

#[test]
fn unlimited_jobs_keep_one_container() {
    let mut cfg = small_pool_config(1);
    cfg.max_jobs_per_container = None;
    let pool = process_pool(cfg, &["bash"]);
    let mut ids = HashSet::new();
    for _ in 0..600 {
        let h = pool.checkout("bash").unwrap();
        ids.insert(h.id().to_string());
        h.give_back(ReturnVerdict::Clean);
    }
    assert_eq!(ids.len(), 1);
}

#[test]
fn killed_warm_container_is_replaced() {
    let cfg = small_pool_config(2);
    let spawn_timeout = cfg.spawn_timeout;
    let pool = process_pool(cfg, &["bash"]);
    let victim = pool.snapshot("bash")[0].clone();
    let pid = victim.host_pid.unwrap();
    kill(pid);
    wait_for("kill", Duration::from_secs(5), || is_dead(pid));
    let h = pool.checkout("bash").unwrap();
    assert_ne!(h.id(), victim.id);
    let h2 = pool.checkout("bash").unwrap();
    assert_ne!(h2.id(), victim.id);
    h.give_back(ReturnVerdict::Clean);
    h2.give_back(ReturnVerdict::Clean);
    wait_for("pool refill", spawn_timeout, || {
        let m = &pool.metrics().languages["bash"];
        m.warm == 2 && m.spawning == 0
    });
    assert!(pool.snapshot("bash").iter().all(|c| c.id != victim.id));
    assert!(pool.metrics().languages["bash"].crashes >= 1);
}

#[test]
fn busy_container_killed_mid_job_reports_crash() {
    let pool = process_pool(small_pool_config(1), &["bash"]);
    let mut h = pool.checkout("bash").unwrap();
    let pid = h.host_pid().unwrap();
    let killer = thread::spawn(move || {
        thread::sleep(Duration::from_millis(300));
        kill(pid);
    });
    let result = h.run_job(&bash_job("sleep 3\n", &[("", "")]));
    killer.join().unwrap();
    assert!(result.is_err(), "{result:?}");
    h.give_back(ReturnVerdict::Dirty);
    let h = pool.checkout("bash").unwrap();
    assert_ne!(h.host_pid(), Some(pid));
    assert_eq!(pool.metrics().languages["bash"].crashes, 1);
}

#[test]
fn concurrent_load_never_double_books() {
    let pool = process_pool(small_pool_config(3), &["bash"]);
    let job = bash_job("cat\n", &[("x\n", "x\n")]);
    let active = Arc::new(std::sync::Mutex::new(HashSet::new()));
    let overlaps = Arc::new(AtomicUsize::new(0));
    let workers: Vec<_> = (0..8)
        .map(|_| {
            let (pool, job, active, overlaps) =
                (pool.clone(), job.clone(), active.clone(), overlaps.clone());
            thread::spawn(move || {
                for _ in 0..15 {
                    let mut h = pool.checkout("bash").unwrap();
                    if !active.lock().unwrap().insert(h.id().to_string()) {
                        overlaps.fetch_add(1, Ordering::SeqCst);
                    }
                    let report = h.run_job(&job).unwrap();
                    assert_eq!(report.outcomes[0].status, TestStatus::Passed);
                    active.lock().unwrap().remove(h.id());
                    h.give_back(ReturnVerdict::Clean);
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    assert_eq!(overlaps.load(Ordering::SeqCst), 0);
    let m = pool.metrics();
    assert_eq!(m.tag_violations, 0);
    assert_eq!(m.languages["bash"].jobs_served, 120);
}

#[test]
fn spawn_failure_times_out_checkout() {
    let driver = Arc::new(ProcessDriver::detect(
        polyjudge_core::sandbox::AgentCommand::new("/nonexistent/agent"),
    ));
    let mut cfg = small_pool_config(1);
    cfg.spawn_timeout = Duration::from_millis(500);
    let pool = Pool::new(driver, cfg).unwrap();
    pool.start_language(&config("bash")).unwrap();
    let started = Instant::now();
    match pool.checkout("bash") {
        Err(SandboxError::SpawnTimeout { .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(started.elapsed() < Duration::from_secs(3));
    let m = &pool.metrics().languages["bash"];
    assert!(m.spawn_failures >= 1);
    assert!(m.last_spawn_error.is_some());
}

#[test]
fn unknown_language_and_stopped_pool() {
    let pool = process_pool(small_pool_config(1), &["bash"]);
    assert!(matches!(
        pool.checkout("cobol"),
        Err(SandboxError::UnknownLanguage(_))
    ));
    let h = pool.checkout("bash").unwrap();
    pool.shutdown();
    assert!(matches!(pool.checkout("bash"), Err(SandboxError::PoolStopped)));
    h.give_back(ReturnVerdict::Clean);
    assert_eq!(pool.metrics().languages["bash"].warm, 0);
}

#[test]
fn fresh_containers_are_destroyed_after_use() {
    let pool = process_pool(small_pool_config(1), &["bash"]);
    let mut h = pool.spawn_fresh("bash").unwrap();
    assert!(h.is_fresh());
    let pid = h.host_pid().unwrap();
    assert!(pool.snapshot("bash").iter().all(|c| c.id != h.id()));
    let report = h.run_job(&bash_job("cat\n", &[("x\n", "x\n")])).unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::Passed);
    h.give_back(ReturnVerdict::Clean);
    assert!(!std::path::Path::new(&format!("/proc/{pid}")).exists());
    assert_eq!(pool.metrics().languages["bash"].jobs_served, 0);
}

#[test]
fn process_driver_reports_host_image() {
    let driver = ProcessDriver::detect(agent());
    let plan = build_plan(&config("lua"));
    let tag = driver.ensure_image(&plan).unwrap();
    assert_eq!(tag, format!("host:{}", plan.tag));
    assert_eq!(driver.ensure_image(&plan).unwrap(), tag);
}

#[test]
fn workdir_is_a_sized_ram_disk_when_isolated() {
    if Isolation::probe() != Isolation::Namespaces {
        eprintln!("skipped: namespaces unavailable on this host");
        return;
    }
    let mut cfg = small_pool_config(1);
    cfg.limits.writable_fs_bytes = 8 << 20;
    let pool = process_pool(cfg, &["bash"]);
    let mut h = pool.checkout("bash").unwrap();
    let workdir = h.ram_disk_path().display().to_string();
    let report = h
        .run_job(&bash_job(
            &format!("df -k --output=fstype,size {workdir} | tail -1 | tr -s ' '\n"),
            &[("", "tmpfs 8192\n")],
        ))
        .unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::Passed, "{:?}", report.outcomes[0]);
    // Writing past the RAM disk size fails instead of filling the host.
    let report = h
        .run_job(&bash_job(
            "head -c 20000000 /dev/zero > big.bin || echo full\n",
            &[("", "full\n")],
        ))
        .unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::Passed, "{:?}", report.outcomes[0]);
    h.give_back(ReturnVerdict::Clean);
}

#[test]
fn network_is_disabled_when_isolated() {
    if Isolation::probe() != Isolation::Namespaces {
        eprintln!("skipped: namespaces unavailable on this host");
        return;
    }
    let pool = process_pool(small_pool_config(1), &["bash"]);
    let mut h = pool.checkout("bash").unwrap();
    let report = h
        .run_job(&bash_job(
            "tail -n +3 /proc/net/dev | cut -d: -f1 | tr -d ' '\n",
            &[("", "lo\n")],
        ))
        .unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::Passed, "{:?}", report.outcomes[0]);
    h.give_back(ReturnVerdict::Clean);
}

#[test]
fn memory_bomb_is_contained() {
    let mut cfg = small_pool_config(1);
    cfg.limits.memory_bytes = 256 << 20;
    let pool = process_pool(cfg, &["python"]);
    let options = VerifyOptions {
        test_timeout: Duration::from_secs(20),
        ..VerifyOptions::default()
    };
    let bomb = "chunks = []\nwhile True:\n    chunks.append(bytearray(16 << 20))\n";
    let job = build_job(bomb, &task("m", &[("", "x\n")]), &config("python"), &options);
    let mut h = pool.checkout("python").unwrap();
    let started = Instant::now();
    let report = h.run_job(&job).unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::RuntimeError, "{report:?}");
    assert!(started.elapsed() < Duration::from_secs(15));
    // The agent itself survived.
    let report = h
        .run_job(&build_job("print('x')\n", &task("m", &[("", "x\n")]), &config("python"), &options))
        .unwrap();
    assert_eq!(report.outcomes[0].status, TestStatus::Passed);
    h.give_back(ReturnVerdict::Clean);
}
