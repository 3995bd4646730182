#!/usr/bin/env python3
"""Writes a synthetic judged transcript whose per-dataset totals are fixed.

Each dataset gets 100 examples. A few are fatal (raw scores ignored), some are
flagged fluff with raw clarity/semantic scores above the cap, and the rest are
plain. Post-penalty point totals per dataset equal TOTALS exactly.
"""
import json
import random
import sys

KEYS = ["logical_progression", "temporal_alignment", "spatial_grounding",
        "continuation", "clarity", "semantic_alignment"]
CAPPED = {"clarity", "semantic_alignment"}

# dataset -> (split, total points over 100 examples, out of 3000)
TOTALS = {
    "CC4D": ("in_domain", 1173), "COIN": ("in_domain", 1401),
    "CrTk": ("in_domain", 1440), "EgPL": ("in_domain", 1572),
    "EgPER": ("zero_shot", 1152), "EgEx": ("zero_shot", 1320),
    "NIV": ("zero_shot", 1677),
}


def examples_for(rng, dataset, total):
    kinds = ["fatal"] * 4 + ["fluff"] * 12 + ["plain"] * 84
    rng.shuffle(kinds)
    post = []
    for kind in kinds:
        if kind == "fatal":
            post.append([0] * 6)
        else:
            post.append([rng.randint(0, 5) for _ in KEYS])
    cap = [[0 if k == "fatal" else (2 if (k == "fluff" and key in CAPPED) else 5) for key in KEYS]
           for k in kinds]
    post = [[min(v, c) for v, c in zip(row, caps)] for row, caps in zip(post, cap)]
    cells = [(i, j) for i in range(100) for j in range(6)]
    current = sum(map(sum, post))
    while current != total:
        i, j = rng.choice(cells)
        if current < total and post[i][j] < cap[i][j]:
            post[i][j] += 1
            current += 1
        elif current > total and post[i][j] > 0:
            post[i][j] -= 1
            current -= 1
    for i, (kind, scores) in enumerate(zip(kinds, post)):
        raw = list(scores)
        if kind == "fatal":
            raw = [rng.randint(0, 5) for _ in KEYS]
        elif kind == "fluff":
            for j, key in enumerate(KEYS):
                if key in CAPPED and raw[j] == 2:
                    raw[j] = rng.randint(2, 5)
        yield {"dataset": dataset, "scores": dict(zip(KEYS, raw)),
               "fluff": kind == "fluff", "fatal": kind == "fatal"}


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "."
    rng = random.Random(46)
    with open(f"{out_dir}/judged_transcript.jsonl", "w") as f:
        for dataset, (_, total) in TOTALS.items():
            for ex in examples_for(rng, dataset, total):
                f.write(json.dumps(ex) + "\n")
    with open(f"{out_dir}/split_map.json", "w") as f:
        json.dump({d: s for d, (s, _) in TOTALS.items()}, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
