"""JSONL artifacts between pipeline stages.

Every record carries ``schema_version`` and ``config_hash``. Floats are written
with ``repr`` precision by ``json`` so a read/write cycle is lossless and
rewriting the same data yields the same bytes.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffmodel import SCHEMA_VERSION
from .errors import LineageMismatch, MissingArtifact, SchemaVersionMismatch
from .pairing import PairPool
from .reward import CalibratedScores, CandidateSet, RewardKind

# which subcommand produces each artifact, for error messages
PRODUCERS = {
    "ref.ckpt": "pretrain",
    "candidates.jsonl": "gen-candidates",
    "calibrated.jsonl": "calibrate",
    "pairs.jsonl": "select-pairs",
    "finetuned.ckpt": "finetune",
    "eval.json": "eval",
}


def require(path: Path) -> Path:
    if not path.exists():
        producer = PRODUCERS.get(path.name)
        hint = f"; run `calpref {producer}` first" if producer else ""
        raise MissingArtifact(f"missing {path}{hint}")
    return path


def atomic_write(path: Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records: Iterable[dict], config_hash: str) -> Path:
    lines = [_dumps({"schema_version": SCHEMA_VERSION, "config_hash": config_hash, **r}) for r in records]
    return atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_jsonl(path, config_hash: str | None = None) -> list[dict]:
    """Records of a JSONL artifact; checks schema and, when given, the config hash."""
    path = require(Path(path))
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise SchemaVersionMismatch(f"{path}:{n}: schema {rec.get('schema_version')} != {SCHEMA_VERSION}")
            if config_hash is not None and rec.get("config_hash") != config_hash:
                raise LineageMismatch(f"{path}:{n}: produced under config {rec.get('config_hash')}, "
                                      f"current config is {config_hash} (use --force to override)")
            out.append(rec)
    return out


# --- record conversions ---------------------------------------------------------

def candidate_record(c: CandidateSet) -> dict:
    return {
        "prompt_id": c.prompt_id,
        "samples": np.asarray(c.samples, dtype=np.float64).tolist(),
        "scores": c.scores.tolist(),
        "reward_names": list(c.reward_names),
        "reward_kinds": [k.to_dict() for k in c.reward_kinds],
    }


def candidate_from_record(r: dict) -> CandidateSet:
    return CandidateSet(r["prompt_id"], np.asarray(r["samples"], dtype=np.float64), np.asarray(r["scores"]),
                        r["reward_names"], [RewardKind.from_dict(k) for k in r["reward_kinds"]])


def calibrated_record(c: CalibratedScores) -> dict:
    return {
        "prompt_id": c.prompt_id,
        "calibrated": np.asarray(c.calibrated).tolist(),
        "ensemble": np.asarray(c.ensemble).tolist(),
        "weights": None if c.weights is None else np.asarray(c.weights).tolist(),
    }


def calibrated_from_record(r: dict) -> CalibratedScores:
    w = r.get("weights")
    return CalibratedScores(r["prompt_id"], np.asarray(r["calibrated"], dtype=np.float64),
                            np.asarray(r["ensemble"], dtype=np.float64),
                            None if w is None else np.asarray(w, dtype=np.float64))


def pool_record(p: PairPool, samples: Sequence | None = None) -> dict:
    rec = {
        "prompt_id": p.prompt_id,
        "strategy": p.strategy,
        "reward_index": p.reward_index,
        "positives": [int(i) for i in p.positives],
        "negatives": [int(i) for i in p.negatives],
        "gap_values": np.asarray(p.gap_values).tolist(),
        "pairs": [[i, j, d] for i, j, d in p.pair_records()],
    }
    if samples is not None:
        s = np.asarray(samples, dtype=np.float64)
        rec["x_plus"] = s[p.positives].tolist()
        rec["x_minus"] = s[p.negatives].tolist()
    return rec


def pool_from_record(r: dict) -> PairPool:
    return PairPool(r["prompt_id"], list(r["positives"]), list(r["negatives"]), r["strategy"],
                    np.asarray(r["gap_values"], dtype=np.float64), r.get("reward_index"))


def write_json(path, obj: dict, config_hash: str) -> Path:
    blob = _dumps({"schema_version": SCHEMA_VERSION, "config_hash": config_hash, **obj})
    return atomic_write(Path(path), (blob + "\n").encode())


def read_json(path, config_hash: str | None = None) -> dict:
    return read_jsonl(path, config_hash)[0]
