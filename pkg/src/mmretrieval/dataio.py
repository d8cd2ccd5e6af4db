"""Line-delimited JSON files for samples, clicks, ground truth and judgments.

Floats are written with their shortest round-tripping repr, so writing the
same data twice gives byte-identical files and reading them back is exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .data_org import Click, GroundTruth, Sample
from .retrieval_eval import Judgment

SAMPLES = "samples.jsonl"
TEST_QUERIES = "test_queries.jsonl"
CLICKS = "clicks.jsonl"
TRUTH = "truth.json"
JUDGMENTS = "judgments.jsonl"
ORG_REPORT = "organization.json"


class DataFormatError(ValueError):
    pass


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{n}: {exc.msg}") from None


def _need(row: dict, keys: tuple[str, ...], where: str) -> None:
    missing = [k for k in keys if k not in row]
    if missing:
        raise DataFormatError(f"{where}: missing fields {missing}")


def sample_row(s: Sample) -> dict:
    return {"id": s.id, "kind": s.kind, "raw": s.raw.tolist(), "tokens": list(s.tokens), "category": s.category}


def write_samples(path: str | Path, samples: Iterable[Sample]) -> None:
    write_jsonl(path, (sample_row(s) for s in samples))


def read_samples(path: str | Path) -> list[Sample]:
    out = []
    for row in read_jsonl(path):
        _need(row, ("id", "kind", "raw"), str(path))
        out.append(Sample(int(row["id"]), row["kind"], np.asarray(row["raw"], dtype=np.float64),
                          [int(t) for t in row.get("tokens", [])], int(row.get("category", -1))))
    return out


def write_clicks(path: str | Path, clicks: Iterable[Click]) -> None:
    write_jsonl(path, ({"q": c.q, "d": c.d, "clicked": c.clicked} for c in clicks))


def read_clicks(path: str | Path) -> list[Click]:
    out = []
    for row in read_jsonl(path):
        _need(row, ("q", "d"), str(path))
        out.append(Click(int(row["q"]), int(row["d"]), bool(row.get("clicked", True))))
    return out


def write_truth(path: str | Path, truth: GroundTruth) -> None:
    doc = {"product_of": {str(k): v for k, v in sorted(truth.product_of.items())},
           "family_of": {str(k): v for k, v in sorted(truth.family_of.items())}}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_truth(path: str | Path) -> GroundTruth:
    doc = json.loads(Path(path).read_text())
    _need(doc, ("product_of", "family_of"), str(path))
    return GroundTruth({int(k): int(v) for k, v in doc["product_of"].items()},
                       {int(k): int(v) for k, v in doc["family_of"].items()})


def write_judgments(path: str | Path, judgments: Mapping[int, Judgment]) -> None:
    write_jsonl(path, ({"query_id": q, "identical": sorted(j.identical), "relevant": sorted(j.relevant),
                        "candidates": j.candidates} for q, j in sorted(judgments.items())))


def read_judgments(path: str | Path) -> dict[int, Judgment]:
    out = {}
    for row in read_jsonl(path):
        _need(row, ("query_id", "identical", "relevant"), str(path))
        cand = row.get("candidates")
        out[int(row["query_id"])] = Judgment(set(row["identical"]), set(row["relevant"]),
                                             None if cand is None else [int(c) for c in cand])
    return out
