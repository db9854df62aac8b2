"""Emit the bundled fixture dataset plus side files for the CLI pipeline.

Writes dataset.jsonl, annotations.jsonl, gender_table.csv, names.json, and
workers.csv into the output directory.
"""

import argparse
import json
from pathlib import Path

from vwpstory.corpus import save_dataset
from vwpstory.synth import (
    FILLER_NAMES,
    FILLER_PLACES,
    fixture_annotations,
    fixture_dataset,
    write_annotations,
    write_gender_table,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixtures")
    parser.add_argument("--sequences", type=int, default=24)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = fixture_dataset(args.sequences, seed=args.seed)
    save_dataset(records, out / "dataset.jsonl")
    write_annotations(fixture_annotations(records, seed=args.seed), out / "annotations.jsonl")
    write_gender_table(out / "gender_table.csv")
    (out / "names.json").write_text(json.dumps(
        {"male": FILLER_NAMES["male"], "female": FILLER_NAMES["female"],
         "location": FILLER_PLACES}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "workers.csv").write_text(
        "worker_id,acceptance_rate,avg_quality,accepted,n_w\n"
        "w1,0.95,3.5,6,5\n"
        "w2,0.90,3.1,5,10\n"
        "w3,0.89,5.0,100,1000\n"
        "w4,0.97,4.2,40,120\n", encoding="utf-8")
    print(f"wrote fixture files under {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
