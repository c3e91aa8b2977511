mod common;

use std::time::{Duration, Instant};

use common::*;
use polyjudge_core::harness::TestStatus;
use polyjudge_core::verifier::{
    Candidate, ExecutionMode, FailureKind, Verdict, Verifier, VerifyOptions,
};
use proptest::prelude::*;

fn fast_options() -> VerifyOptions {
    VerifyOptions {
        test_timeout: Duration::from_secs(1),
        ..VerifyOptions::default()
    }
}

fn verifier(languages: &[&str], target: usize) -> Verifier {
    Verifier::new(process_pool(small_pool_config(target), languages)).with_options(fast_options())
}

fn summary(v: &Verdict) -> (u8, FailureKind, Vec<TestStatus>) {
    (
        v.reward,
        v.failure_kind,
        v.report.outcomes.iter().map(|o| o.status).collect(),
    )
}

/// Walks up from the running program to the agent and kills it.
const KILL_AGENT: &str = r#"p=$PPID
while [ "$(cat /proc/$p/comm)" != polyjudge-agent ]; do
  p=$(cut -d' ' -f4 /proc/$p/stat)
done
kill -9 $p
"#;

#[test]
fn non_prime_task_examples() {
    let v = verifier(&["python"], 2);
    let tasks = golden_tasks();
    let task = tasks.get("mbpp/3").unwrap();
    let python = config("python");
    let correct = golden_programs("python")["mbpp/3"]["correct"].clone();
    let verdict = v.verify_candidate(&Candidate::new(fenced("python", &correct), "python"), task, &python);
    assert_eq!((verdict.reward, verdict.failure_kind), (1, FailureKind::None));

    let says_true_for_two = "print(True)\n";
    let verdict = v.verify_candidate(
        &Candidate::new(fenced("python", says_true_for_two), "python"),
        task,
        &python,
    );
    assert_eq!(verdict.reward, 0);
    assert_eq!(verdict.failure_kind, FailureKind::WrongOutput);
}

#[test]
fn mixed_group_matches_serial_oracle() {
    let v = verifier(&["python"], 4);
    let tasks = golden_tasks();
    let task = tasks.get("golden/gcd").unwrap();
    let programs = &golden_programs("python")["golden/gcd"];
    let candidates = vec![
        Candidate::new(fenced("python", &programs["correct"]), "python"),
        Candidate::new(fenced("python", &programs["wrong"]), "python"),
        Candidate::new(fenced("python", &programs["loop"]), "python"),
        Candidate::new("I am not sure how to solve this.", "python"),
    ];
    let python = config("python");
    let batch = v.verify_group(&candidates, task, &python);
    let rewards: Vec<u8> = batch.iter().map(|v| v.reward).collect();
    assert_eq!(rewards, [1, 0, 0, 0]);
    let kinds: Vec<_> = batch.iter().map(|v| v.failure_kind).collect();
    assert_eq!(
        kinds,
        [
            FailureKind::None,
            FailureKind::WrongOutput,
            FailureKind::Timeout,
            FailureKind::NoCodeBlock
        ]
    );
    let serial: Vec<_> = candidates
        .iter()
        .map(|c| summary(&v.verify_candidate(c, task, &python)))
        .collect();
    assert_eq!(batch.iter().map(summary).collect::<Vec<_>>(), serial);
}

#[test]
fn replicated_correct_group() {
    let v = verifier(&["bash"], 4);
    let candidate = Candidate::new(fenced("bash", "cat\n"), "bash");
    let group = vec![candidate; 32];
    let verdicts = v.verify_group(&group, &echo_task(), &config("bash"));
    assert_eq!(verdicts.len(), 32);
    assert!(verdicts.iter().all(|v| v.reward == 1));
}

#[test]
fn singleton_group_equals_candidate() {
    let v = verifier(&["bash"], 2);
    let candidate = Candidate::new(fenced("bash", "head -c 1; echo\n"), "bash");
    let one = v.verify_group(std::slice::from_ref(&candidate), &echo_task(), &config("bash"));
    let direct = v.verify_candidate(&candidate, &echo_task(), &config("bash"));
    assert_eq!(one.len(), 1);
    assert_eq!(summary(&one[0]), summary(&direct));
}

#[test]
fn no_code_block_consumes_no_container() {
    let v = verifier(&["bash"], 1);
    let before = v.pool().metrics().languages["bash"].jobs_served;
    let verdict = v.verify_candidate(
        &Candidate::new("just prose", "bash"),
        &echo_task(),
        &config("bash"),
    );
    assert_eq!(verdict.failure_kind, FailureKind::NoCodeBlock);
    assert_eq!(verdict.reward, 0);
    assert_eq!(v.pool().metrics().languages["bash"].jobs_served, before);
}

#[test]
fn partial_credit_is_zero() {
    let v = verifier(&["bash"], 1);
    // Passes the first test only.
    let candidate = Candidate::new(fenced("bash", "echo a\n"), "bash");
    let mut opts = fast_options();
    opts.fail_fast = false;
    let verdict = v.verify_with(&candidate, &echo_task(), &config("bash"), &opts);
    let statuses: Vec<_> = verdict.report.outcomes.iter().map(|o| o.status).collect();
    assert_eq!(statuses, [TestStatus::Passed, TestStatus::WrongOutput]);
    assert_eq!(verdict.reward, 0);
}

#[test]
fn persistent_crash_is_retried_once_then_reported() {
    let v = verifier(&["bash"], 2);
    let verdict = v.verify_candidate(
        &Candidate::new(fenced("bash", KILL_AGENT), "bash"),
        &echo_task(),
        &config("bash"),
    );
    assert_eq!(verdict.reward, 0);
    assert_eq!(verdict.failure_kind, FailureKind::Crash);
    assert!(verdict.report.container_crashed);
    assert_eq!(v.pool().metrics().languages["bash"].crashes, 2);
}

#[test]
fn single_crash_recovers_on_retry() {
    let v = verifier(&["bash"], 2);
    let marker = tempfile::tempdir().unwrap();
    let flag = marker.path().join("crashed-once");
    let program = format!(
        "if [ -e {flag} ]; then cat; else touch {flag}\n{KILL_AGENT}fi\n",
        flag = flag.display()
    );
    let verdict = v.verify_candidate(
        &Candidate::new(fenced("bash", &program), "bash"),
        &task("once", &[("x\n", "x\n")]),
        &config("bash"),
    );
    assert!(flag.exists());
    assert_eq!((verdict.reward, verdict.failure_kind), (1, FailureKind::None));
    assert_eq!(v.pool().metrics().languages["bash"].crashes, 1);
}

#[test]
fn compiled_language_paths() {
    let v = verifier(&["c"], 1);
    let c = config("c");
    let task = task("add", &[("2 3\n", "5\n"), ("10 -4\n", "6\n")]);
    let good = "#include <stdio.h>\nint main(void){long a,b;scanf(\"%ld %ld\",&a,&b);printf(\"%ld\\n\",a+b);return 0;}\n";
    let verdict = v.verify_candidate(&Candidate::new(fenced("c", good), "c"), &task, &c);
    assert_eq!((verdict.reward, verdict.failure_kind), (1, FailureKind::None), "{verdict:?}");

    let broken = "int main(void) { return missing; }\n";
    let verdict = v.verify_candidate(&Candidate::new(fenced("c", broken), "c"), &task, &c);
    assert_eq!(verdict.failure_kind, FailureKind::Compile);
    assert!(verdict.report.outcomes.is_empty());
    assert!(verdict.report.compile_log_prefix.contains("missing"));

    let crashes = "int main(void) { int *p = 0; return *p; }\n";
    let verdict = v.verify_candidate(&Candidate::new(fenced("c", crashes), "c"), &task, &c);
    assert_eq!(verdict.failure_kind, FailureKind::Runtime);
}

#[test]
fn overflow_and_timeout_discard_the_container() {
    let v = verifier(&["bash"], 1);
    let bash = config("bash");
    let started = Instant::now();
    let verdict = v.verify_candidate(
        &Candidate::new(fenced("bash", "yes\n"), "bash"),
        &echo_task(),
        &bash,
    );
    assert_eq!(verdict.failure_kind, FailureKind::Overflow);
    let verdict = v.verify_candidate(
        &Candidate::new(fenced("bash", "while :; do :; done\n"), "bash"),
        &echo_task(),
        &bash,
    );
    assert_eq!(verdict.failure_kind, FailureKind::Timeout);
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(v.pool().metrics().languages["bash"].discarded, 2);
}

#[test]
fn fresh_mode_matches_pooled_mode() {
    let pooled = verifier(&["bash"], 2);
    let fresh = pooled.clone().with_mode(ExecutionMode::Fresh);
    let bash = config("bash");
    let candidates = vec![
        Candidate::new(fenced("bash", "cat\n"), "bash"),
        Candidate::new(fenced("bash", "echo nope\n"), "bash"),
        Candidate::new(fenced("bash", "exit 3\n"), "bash"),
    ];
    let a: Vec<_> = pooled.verify_group(&candidates, &echo_task(), &bash).iter().map(summary).collect();
    let b: Vec<_> = fresh.verify_group(&candidates, &echo_task(), &bash).iter().map(summary).collect();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|s| s.0).collect::<Vec<_>>(), [1, 0, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, .. ProptestConfig::default() })]

    #[test]
    fn group_order_is_preserved(kinds in proptest::collection::vec(0usize..4, 1..10)) {
        let v = verifier(&["bash"], 3);
        let bash = config("bash");
        let programs = ["cat\n", "echo wrong\n", "exit 1\n", ""];
        let candidates: Vec<_> = kinds
            .iter()
            .map(|&k| {
                if programs[k].is_empty() {
                    Candidate::new("no block", "bash")
                } else {
                    Candidate::new(fenced("bash", programs[k]), "bash")
                }
            })
            .collect();
        let verdicts = v.verify_group(&candidates, &echo_task(), &bash);
        let expected: Vec<_> = kinds
            .iter()
            .map(|&k| [FailureKind::None, FailureKind::WrongOutput, FailureKind::Runtime, FailureKind::NoCodeBlock][k])
            .collect();
        let got: Vec<_> = verdicts.iter().map(|v| v.failure_kind).collect();
        prop_assert_eq!(got, expected);
        for verdict in &verdicts {
            prop_assert!(verdict.reward <= 1);
            prop_assert_eq!(verdict.reward == 1, verdict.failure_kind == FailureKind::None);
        }
    }
}
