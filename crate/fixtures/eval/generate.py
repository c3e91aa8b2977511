#!/usr/bin/env python3
"""Regenerates the eval fixtures and the reports `polyjudge eval --json`
must reproduce byte-for-byte.

Expected outcomes follow from how each canned completion is built, and
pass@k comes from exact binomials (math.comb + Fraction), independently of
the Rust implementation.

    python3 fixtures/eval/generate.py
"""

import json
import math
import random
from fractions import Fraction
from pathlib import Path

HERE = Path(__file__).resolve().parent
SEED = 20240611
N_TASKS = 50
N_SAMPLES = 20


def task(index, mult, add):
    rng = random.Random(SEED * 1000 + index)
    inputs = [rng.randint(-50, 500) for _ in range(3)]
    return {
        "id": f"eval/{index:03d}",
        "description": f"Given an integer N, output N * {mult} + {add}.",
        "input_format": "a single integer N",
        "output_format": "a single integer",
        "tests": [{"input": f"{x}\n", "output": f"{x * mult + add}\n"} for x in inputs],
    }


def fence(code, prose="Here is a solution."):
    return f"{prose}\n```bash\n{code}```\n"


def correct_variants(mult, add):
    return [
        fence(f"read n\necho $((n * {mult} + {add}))\n"),
        fence(f"read n\nexpr $n \\* {mult} + {add}\n", "Using expr:"),
        fence(f"awk '{{ print $1 * {mult} + {add} }}'\n", "An awk one-liner works."),
        # A wrong draft followed by the final answer: the last block counts.
        fence("read n\necho $n\n", "Draft:")
        + fence(f"read n\nlet r=n*{mult}+{add}\necho $r\n", "Final version:"),
        fence(f"read n\nr=$(( {add} + {mult} * n ))\nprintf '%d\\n' \"$r\"\n"),
    ]


def wrong_variants(mult, add):
    """(completion, outcome(inputs)) pairs; outcome is the first failure kind."""

    def arithmetic(f):
        return lambda xs: "none" if all(f(x) == x * mult + add for x in xs) else "wrong_output"

    return [
        (fence(f"read n\necho $((n * {mult} + {add} + 1))\n"), arithmetic(lambda x: x * mult + add + 1)),
        (fence(f"read n\necho $((n * {mult + 1} + {add}))\n"), arithmetic(lambda x: x * (mult + 1) + add)),
        (fence("read n\nexit 1\n", "This should work:"), lambda xs: "runtime"),
        (
            "I think the answer is to multiply and add, but I cannot write the code.",
            lambda xs: "no_code_block",
        ),
        (fence(f"read n\necho $((n * {mult} + {add}))\necho done\n"), lambda xs: "wrong_output"),
        (fence("read n\necho $((n * \n", "Syntax slip:"), lambda xs: "runtime"),
        # A correct draft followed by a broken final block.
        (
            fence(f"read n\necho $((n * {mult} + {add}))\n", "Draft:")
            + fence("read n\necho $((n - 1))\n", "Final:"),
            arithmetic(lambda x: x - 1),
        ),
        (fence("yes 1\n", "Spam:"), lambda xs: "overflow"),
    ]


def pass_at_k(n, c, k):
    """Correctly rounded 1 - C(n-c, k) / C(n, k)."""
    if n - c < k:
        return 1.0
    total = math.comb(n, k)
    return float(Fraction(total - math.comb(n - c, k), total))


def report(dataset, language, n, ks, rows):
    """rows: (task_id, outcome kinds). Aggregates are f64 means summed in task order."""
    tasks, sums, totals = [], [0.0] * len(ks), {}
    for task_id, kinds in rows:
        c = kinds.count("none")
        values = [pass_at_k(n, c, k) for k in ks]
        for i, v in enumerate(values):
            sums[i] += v
        counts = {}
        for kind in sorted(set(kinds)):
            counts[kind] = kinds.count(kind)
            totals[kind] = totals.get(kind, 0) + counts[kind]
        tasks.append(
            {
                "task_id": task_id,
                "n": n,
                "c": c,
                "pass_at_k": [{"k": k, "value": v} for k, v in zip(ks, values)],
                "outcomes": counts,
            }
        )
    return {
        "dataset": dataset,
        "language": language,
        "samples": n,
        "pass_at_k": [{"k": k, "value": s / len(rows)} for k, s in zip(ks, sums)],
        "outcomes": dict(sorted(totals.items())),
        "tasks": tasks,
    }


def write_report(path, value):
    path.write_text(json.dumps(value, indent=2, ensure_ascii=False) + "\n")


def write_jsonl(path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def inputs(t):
    return [int(case["input"]) for case in t["tests"]]


def sample(rng, t, mult, add, correct):
    if correct:
        return rng.choice(correct_variants(mult, add)), "none"
    text, outcome = rng.choice(wrong_variants(mult, add))
    return text, outcome(inputs(t))


def main():
    rng = random.Random(SEED)
    tasks, completions, rows, params = [], [], [], []
    for i in range(N_TASKS):
        mult, add = rng.randint(2, 9), rng.randint(0, 99)
        params.append((mult, add))
        t = task(i, mult, add)
        tasks.append(t)
        c = rng.randint(0, N_SAMPLES)
        samples = [sample(rng, t, mult, add, j < c) for j in range(N_SAMPLES)]
        rng.shuffle(samples)
        for s, (text, _) in enumerate(samples):
            completions.append({"task_id": t["id"], "sample_index": s, "completion_text": text})
        rows.append((t["id"], [kind for _, kind in samples]))
    write_jsonl(HERE / "tasks.jsonl", tasks)
    write_jsonl(HERE / "completions.jsonl", completions)
    write_report(HERE / "expected_report.json", report("tasks", "bash", N_SAMPLES, [1], rows))

    # Exactly one correct sample out of two per task.
    rng = random.Random(SEED + 1)
    half_tasks, half_completions, rows = tasks[:10], [], []
    for t, (mult, add) in zip(half_tasks, params):
        samples = [sample(rng, t, mult, add, True), sample(rng, t, mult, add, False)]
        rng.shuffle(samples)
        for s, (text, _) in enumerate(samples):
            half_completions.append({"task_id": t["id"], "sample_index": s, "completion_text": text})
        rows.append((t["id"], [kind for _, kind in samples]))
    write_jsonl(HERE / "half" / "tasks.jsonl", half_tasks)
    write_jsonl(HERE / "half" / "completions.jsonl", half_completions)
    write_report(HERE / "half" / "expected_report.json", report("tasks", "bash", 2, [1], rows))


if __name__ == "__main__":
    main()
