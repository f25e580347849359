"""Counterfactual utterance logs on disk.

A corpus directory holds ``manifest.json`` plus one JSON-lines file per
split (``train.jsonl``, ``dev.jsonl``, ``test.jsonl``). Each line is one
utterance::

    {"id": 17, "split": "train", "latent_slowness": -0.41,
     "features": {"audio": [...], "hypothesis": [...], "pause_duration": 412.7,
                  "wakeword_duration": 588.1, "pitch": [...], "intent_domain": 3},
     "outcome_standard": {"latency_ms": 344, "cutoff": false},
     "outcome_relaxed": {"latency_ms": 1021, "cutoff": false},
     "label": 0}

Feature groups, ``latent_slowness``, ``outcome_relaxed`` and ``label`` are
optional. Latencies are integer milliseconds. Floats are written with
``repr`` precision so a write/read round trip is exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .environment import (
    GROUPS, N_DOMAINS, Corpus, EndpointOutcome, Utterance, empty_corpus, GeneratorConfig,
)
from .errors import CorpusError, ValidationError

FORMAT = "adaptive_endpointing.corpus"
FORMAT_VERSION = 1
SPLITS = ("train", "dev", "test")
MANIFEST_NAME = "manifest.json"
VECTOR_GROUPS = ("audio", "hypothesis", "pitch")


@dataclass
class LogRecord:
    id: int
    split: str
    outcome_standard: EndpointOutcome
    features: dict = field(default_factory=dict)
    outcome_relaxed: Optional[EndpointOutcome] = None
    label: Optional[int] = None
    latent_slowness: Optional[float] = None

    def to_json(self) -> str:
        feats = {}
        for g in GROUPS:
            if g not in self.features or self.features[g] is None:
                continue
            v = self.features[g]
            if g in VECTOR_GROUPS:
                feats[g] = [float(a) for a in v]
            elif g == "intent_domain":
                feats[g] = int(v)
            else:
                feats[g] = float(v)
        d = {"id": int(self.id), "split": self.split}
        if self.latent_slowness is not None:
            d["latent_slowness"] = float(self.latent_slowness)
        d["features"] = feats
        d["outcome_standard"] = _outcome_json(self.outcome_standard)
        if self.outcome_relaxed is not None:
            d["outcome_relaxed"] = _outcome_json(self.outcome_relaxed)
        if self.label is not None:
            d["label"] = int(self.label)
        return json.dumps(d, separators=(",", ":"))


def _outcome_json(o: EndpointOutcome) -> dict:
    return {"latency_ms": int(o.latency), "cutoff": bool(o.cutoff)}


def derive_label(record) -> int:
    """Class 1 iff the standard configuration cut the utterance off early."""
    return int(bool(record.outcome_standard.cutoff))


def record_from_utterance(u: Utterance, split: str) -> LogRecord:
    f = u.features
    return LogRecord(
        id=u.id,
        split=split,
        latent_slowness=None if math.isnan(u.latent_slowness) else u.latent_slowness,
        features={
            "audio": f.audio.tolist(),
            "hypothesis": f.hypothesis.tolist(),
            "pause_duration": f.pause_duration,
            "wakeword_duration": f.wakeword_duration,
            "pitch": f.pitch.tolist(),
            "intent_domain": int(np.argmax(f.intent_domain)),
        },
        outcome_standard=u.outcome_standard,
        outcome_relaxed=u.outcome_relaxed,
        label=u.label,
    )


def assign_splits(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> np.ndarray:
    """Split index (0=train, 1=dev, 2=test) per row by a seeded shuffle.

    Split sizes follow the largest-remainder rule so they sum to ``n``.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    exact = ratios * n
    sizes = np.floor(exact).astype(np.int64)
    short = n - int(sizes.sum())
    for j in np.argsort(-(exact - sizes), kind="stable")[:short]:
        sizes[j] += 1
    order = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[order] = np.repeat(np.arange(3), sizes)
    return out


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_records(records: Iterable[LogRecord], path, *, feature_dims: dict,
                  split_ratios=None, seed=None) -> dict:
    """Write already-split records and their manifest; returns the manifest."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        handles = {s: open(root / f"{s}.jsonl", "w", encoding="utf-8") for s in SPLITS}
    except OSError as exc:
        raise CorpusError(f"cannot write corpus at {root}: {exc}") from exc
    counts = {s: 0 for s in SPLITS}
    positives = {s: 0 for s in SPLITS}
    has_relaxed = True
    try:
        for rec in records:
            if rec.split not in SPLITS:
                raise ValidationError(f"record {rec.id} has unknown split {rec.split!r}")
            handles[rec.split].write(rec.to_json() + "\n")
            counts[rec.split] += 1
            positives[rec.split] += derive_label(rec)
            has_relaxed = has_relaxed and rec.outcome_relaxed is not None
    finally:
        for fh in handles.values():
            fh.close()
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "feature_dims": {g: int(feature_dims[g]) for g in GROUPS},
        "has_relaxed": has_relaxed,
        "split_ratios": None if split_ratios is None else [float(r) for r in split_ratios],
        "seed": seed,
        "splits": {
            s: {
                "file": f"{s}.jsonl",
                "count": counts[s],
                "positives": positives[s],
                "positive_rate": round(positives[s] / counts[s], 4) if counts[s] else 0.0,
                "sha256": _file_sha256(root / f"{s}.jsonl"),
            }
            for s in SPLITS
        },
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_corpus(utterances, path, split_ratios=(0.8, 0.1, 0.1), seed: int = 0,
                 feature_dims: Optional[dict] = None) -> dict:
    """Assign utterances to splits by seeded shuffle and write them out."""
    if isinstance(utterances, Corpus):
        corpus = utterances
        feature_dims = feature_dims or corpus.feature_dims
        items = corpus
        n = len(corpus)
    else:
        items = list(utterances)
        n = len(items)
        if feature_dims is None:
            if not items:
                raise ValidationError("feature_dims are required for an empty utterance list")
            f = items[0].features
            feature_dims = {"audio": f.audio.size, "hypothesis": f.hypothesis.size,
                            "pause_duration": 1, "wakeword_duration": 1,
                            "pitch": f.pitch.size, "intent_domain": N_DOMAINS}
    splits = assign_splits(n, split_ratios, seed)
    records = (record_from_utterance(u, SPLITS[splits[i]]) for i, u in enumerate(items))
    return write_records(records, path, feature_dims=feature_dims,
                         split_ratios=split_ratios, seed=seed)


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST_NAME
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CorpusError(f"no manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CorpusError(f"{mpath} is not a corpus manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CorpusError(f"unsupported corpus version {manifest.get('version')!r} (expected {FORMAT_VERSION})")
    return manifest


def _parse_outcome(d, where: str) -> EndpointOutcome:
    latency, cutoff = d["latency_ms"], d["cutoff"]
    if not isinstance(latency, int) or isinstance(latency, bool):
        raise CorpusError(f"{where}: latency_ms must be an integer")
    if not isinstance(cutoff, bool):
        raise CorpusError(f"{where}: cutoff must be a boolean")
    return EndpointOutcome(latency, cutoff)


def _parse_record(line: str, where: str, dims: dict) -> LogRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{where}: malformed JSON ({exc.msg})") from exc
    try:
        rid = d["id"]
        feats = {}
        for g, v in d.get("features", {}).items():
            if g not in GROUPS:
                raise CorpusError(f"{where}: record {rid} has unknown feature group {g!r}")
            if g in VECTOR_GROUPS and len(v) != dims[g]:
                raise CorpusError(f"{where}: record {rid} group {g} has {len(v)} values, expected {dims[g]}")
            if g == "intent_domain" and not 0 <= int(v) < N_DOMAINS:
                raise CorpusError(f"{where}: record {rid} intent_domain {v} out of range")
            feats[g] = v
        rec = LogRecord(
            id=rid,
            split=d["split"],
            outcome_standard=_parse_outcome(d["outcome_standard"], where),
            features=feats,
            outcome_relaxed=(_parse_outcome(d["outcome_relaxed"], where)
                             if "outcome_relaxed" in d else None),
            label=d.get("label"),
            latent_slowness=d.get("latent_slowness"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorpusError):
            raise
        raise CorpusError(f"{where}: malformed record ({exc!r})") from exc
    if rec.label is not None and rec.label != derive_label(rec):
        raise CorpusError(
            f"{where}: record {rec.id} label {rec.label} disagrees with standard cutoff "
            f"{rec.outcome_standard.cutoff}"
        )
    if rec.outcome_relaxed is not None and rec.outcome_relaxed.cutoff and not rec.outcome_standard.cutoff:
        raise CorpusError(f"{where}: record {rec.id} is cut off by relaxed but not by standard")
    return rec


def iter_split(path, split: str, manifest: Optional[dict] = None, verify: bool = True
               ) -> Iterator[LogRecord]:
    root = Path(path)
    manifest = manifest or read_manifest(root)
    info = manifest["splits"][split]
    fpath = root / info["file"]
    if verify and _file_sha256(fpath) != info["sha256"]:
        raise CorpusError(f"checksum mismatch for {fpath}")
    dims = manifest["feature_dims"]
    with open(fpath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = _parse_record(line, f"{fpath.name}:{lineno}", dims)
            if rec.split != split:
                raise CorpusError(f"{fpath.name}:{lineno}: record {rec.id} claims split {rec.split!r}")
            yield rec


def read_corpus(path, splits=SPLITS, verify: bool = True):
    """``(manifest, records)`` where ``records`` streams every split in order."""
    manifest = read_manifest(path)

    def stream():
        for s in splits:
            yield from iter_split(path, s, manifest, verify)

    return manifest, stream()


def records_to_corpus(records: Iterable[LogRecord], feature_dims: dict) -> Corpus:
    """Materialize records as a :class:`Corpus`; missing groups become zeros."""
    records = list(records)
    n = len(records)
    if n == 0:
        cfg = GeneratorConfig(n_utterances=0, audio_dim=feature_dims["audio"],
                              hypothesis_dim=feature_dims["hypothesis"], pitch_dim=feature_dims["pitch"])
        return empty_corpus(cfg)
    has_relaxed = all(r.outcome_relaxed is not None for r in records)

    def vec(g):
        out = np.zeros((n, feature_dims[g]))
        for i, r in enumerate(records):
            if r.features.get(g) is not None:
                out[i] = r.features[g]
        return out

    def scalar(g, dtype=np.float64):
        return np.array([r.features.get(g) or 0 for r in records], dtype=dtype)

    return Corpus(
        ids=np.array([r.id for r in records], dtype=np.int64),
        latent_slowness=np.array(
            [np.nan if r.latent_slowness is None else r.latent_slowness for r in records]),
        audio=vec("audio"),
        hypothesis=vec("hypothesis"),
        pause_duration=scalar("pause_duration"),
        wakeword_duration=scalar("wakeword_duration"),
        pitch=vec("pitch"),
        intent_domain=scalar("intent_domain", np.int64),
        standard_latency=np.array([r.outcome_standard.latency for r in records], dtype=np.int64),
        standard_cutoff=np.array([r.outcome_standard.cutoff for r in records], dtype=bool),
        relaxed_latency=(np.array([r.outcome_relaxed.latency for r in records], dtype=np.int64)
                         if has_relaxed else None),
        relaxed_cutoff=(np.array([r.outcome_relaxed.cutoff for r in records], dtype=bool)
                        if has_relaxed else None),
    )


def load_split(path, split: str, verify: bool = True) -> Corpus:
    manifest = read_manifest(path)
    return records_to_corpus(iter_split(path, split, manifest, verify), manifest["feature_dims"])


def is_observational(manifest: dict) -> bool:
    """True when relaxed outcomes are missing and only the standard arm is logged."""
    return not manifest["has_relaxed"]
