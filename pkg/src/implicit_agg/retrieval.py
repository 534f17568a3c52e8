"""Place manifests, exact inner-product retrieval and Recall@N."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ParseError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = {"meters": 25.0, "frames": 10}
DEFAULT_NS = (1, 5, 10, 20)


@dataclass
class Record:
    id: str
    path: str
    role: str
    easting_m: Optional[float] = None
    northing_m: Optional[float] = None
    frame: Optional[int] = None

    @property
    def kind(self) -> str:
        return "frames" if self.frame is not None else "meters"

    @property
    def position(self):
        return (self.frame,) if self.frame is not None else (self.easting_m, self.northing_m)

    def to_json(self) -> dict:
        d = {"id": self.id, "path": self.path, "role": self.role}
        if self.frame is not None:
            d["frame"] = self.frame
        else:
            d["easting_m"] = self.easting_m
            d["northing_m"] = self.northing_m
        return d


@dataclass
class PlaceManifest:
    records: list
    kind: str = "meters"
    threshold: float = 25.0
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.records:
            raise SchemaError("manifest has no records")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise SchemaError("manifest ids are not unique")
        kinds = {r.kind for r in self.records}
        if len(kinds) > 1:
            raise SchemaError("manifest mixes frame and metric positions")
        self.kind = kinds.pop()
        for r in self.records:
            if r.role not in ("query", "database"):
                raise SchemaError(f"record {r.id!r}: role must be query or database")

    def __len__(self):
        return len(self.records)

    def by_role(self, role: str) -> list:
        return [r for r in self.records if r.role == role]

    def role_indices(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.role == role], dtype=int)

    @property
    def queries(self) -> list:
        return self.by_role("query")

    @property
    def database(self) -> list:
        return self.by_role("database")

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def positions(self, records: Sequence[Record]) -> np.ndarray:
        return np.array([r.position for r in records], dtype=np.float64)

    def places(self) -> list:
        """Record indices grouped by identical position, in first-seen order."""
        groups: dict = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.position, []).append(i)
        return list(groups.values())


def _parse_record(obj, lineno: int) -> Record:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", lineno)
    for key in ("id", "path", "role"):
        if key not in obj:
            raise ParseError(f"missing key {key!r}", lineno)
    has_frame = "frame" in obj
    has_metric = "easting_m" in obj or "northing_m" in obj
    if has_frame and has_metric:
        raise SchemaError(f"line {lineno}: record has both frame and metric position")
    extra = set(obj) - {"id", "path", "role", "frame", "easting_m", "northing_m"}
    if extra:
        raise ParseError(f"unknown keys {sorted(extra)}", lineno)
    try:
        if has_frame:
            return Record(str(obj["id"]), str(obj["path"]), obj["role"], frame=int(obj["frame"]))
        return Record(
            str(obj["id"]), str(obj["path"]), obj["role"],
            easting_m=float(obj["easting_m"]), northing_m=float(obj["northing_m"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad position field ({exc})", lineno) from None


def load_manifest(path) -> PlaceManifest:
    path = Path(path)
    records = []
    threshold = None
    header_kind = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                key = key.strip()
                try:
                    if key == "threshold_m":
                        header_kind, threshold = "meters", float(val)
                    elif key == "threshold_frames":
                        header_kind, threshold = "frames", int(val)
                    else:
                        raise ParseError(f"unknown header {key!r}", lineno)
                except ValueError:
                    raise ParseError(f"bad header value {val!r}", lineno) from None
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            records.append(_parse_record(obj, lineno))
    if not records:
        raise SchemaError(f"{path}: manifest has no records")
    man = PlaceManifest(records, root=path.parent)
    if header_kind is not None and header_kind != man.kind:
        raise SchemaError(f"{path}: header threshold is in {header_kind}, records in {man.kind}")
    man.threshold = threshold if threshold is not None else DEFAULT_THRESHOLD[man.kind]
    return man


def write_manifest(path, manifest: PlaceManifest) -> None:
    if manifest.kind == "meters":
        thr = float(manifest.threshold)
        head = f"#threshold_m={int(thr) if thr.is_integer() else repr(thr)}"
    else:
        head = f"#threshold_frames={int(manifest.threshold)}"
    lines = [head]
    lines += [json.dumps(r.to_json()) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- index


class Index:
    """Exact inner-product search over a fixed database, traversed in blocks.

    Ties in similarity are broken by ascending database row.
    """

    def __init__(self, db: np.ndarray, block_rows: int = 1024):
        db = np.asarray(db, dtype=np.float64)
        if db.ndim != 2:
            raise ContractError(f"database must be 2-D, got {db.shape}")
        norms = np.linalg.norm(db, axis=1)
        if db.shape[0] and not np.allclose(norms, 1.0, atol=1e-6):
            log.warning("index rows are not L2-normalized; ranking by raw inner product")
        self.db = db
        self.block_rows = max(1, int(block_rows))

    def __len__(self):
        return self.db.shape[0]

    def search(self, queries: np.ndarray, k: int) -> tuple:
        """``(indices, similarities)``, each ``(nq, min(k, n))``, best first."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self)
        k = min(k, n)
        nq = q.shape[0]
        best_i = np.zeros((nq, 0), dtype=np.int64)
        best_s = np.zeros((nq, 0))
        for start in range(0, n, self.block_rows):
            stop = min(start + self.block_rows, n)
            sims = q @ self.db[start:stop].T
            cand_s = np.concatenate([best_s, sims], axis=1)
            cand_i = np.concatenate(
                [best_i, np.broadcast_to(np.arange(start, stop), (nq, stop - start))], axis=1
            )
            # lexsort: last key primary -> descending similarity, then ascending row
            order = np.lexsort((cand_i, -cand_s), axis=-1)[:, :k]
            best_i = np.take_along_axis(cand_i, order, axis=1)
            best_s = np.take_along_axis(cand_s, order, axis=1)
        return best_i, best_s


def build_index(descriptors: np.ndarray, block_rows: int = 1024) -> Index:
    return Index(descriptors, block_rows)


# ---------------------------------------------------------------- recall


@dataclass
class EvalReport:
    recall_at: dict
    per_query: list
    num_queries: int
    num_db: int
    num_evaluated: int
    num_excluded: int
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "num_queries": self.num_queries,
            "num_db": self.num_db,
            "num_evaluated": self.num_evaluated,
            "num_excluded": self.num_excluded,
            "per_query": self.per_query,
        }

    def table(self) -> str:
        head = "  ".join(f"R@{n:<6}" for n in self.recall_at)
        vals = "  ".join(f"{v:<8.3f}" for v in self.recall_at.values())
        info = (
            f"queries={self.num_queries} evaluated={self.num_evaluated} "
            f"excluded={self.num_excluded} db={self.num_db}"
        )
        return f"{head}\n{vals}\n{info}"


def ground_truth(manifest: PlaceManifest, queries: Sequence[Record], db: Sequence[Record]) -> np.ndarray:
    """Boolean ``(nq, ndb)``: database item within threshold of the query."""
    qp = manifest.positions(queries)
    dp = manifest.positions(db)
    if manifest.kind == "frames":
        dist = np.abs(qp[:, None, 0] - dp[None, :, 0])
    else:
        diff = qp[:, None, :] - dp[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
    return dist <= manifest.threshold


def recall_at_n(queries: np.ndarray, db: np.ndarray, manifest: PlaceManifest, ns: Sequence[int] = DEFAULT_NS, exclude_no_positive: bool = True, keep_ranks: int = 20) -> EvalReport:
    """Fraction of queries with a true match among the top-N retrievals.

    Descriptor rows follow the manifest order of the query and database roles.
    Queries without any in-threshold database item are left out of the
    denominator when ``exclude_no_positive``, else they count as misses. With
    no evaluable query every recall is 0.
    """
    t0 = time.perf_counter()
    qrec, drec = manifest.queries, manifest.database
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    db = np.atleast_2d(np.asarray(db, dtype=np.float64))
    if queries.shape[0] != len(qrec) or db.shape[0] != len(drec):
        raise ContractError(
            f"descriptor rows ({queries.shape[0]} queries, {db.shape[0]} db) do not match "
            f"manifest ({len(qrec)} queries, {len(drec)} db)"
        )
    ns = sorted(set(int(n) for n in ns))
    if not ns or ns[0] < 1:
        raise ContractError("N values must be >= 1")
    gt = ground_truth(manifest, qrec, drec)
    depth = max(max(ns), keep_ranks)
    idx, sims = build_index(db).search(queries, depth)
    has_pos = gt.any(axis=1)
    evaluated = has_pos if exclude_no_positive else np.ones(len(qrec), dtype=bool)
    hits = np.take_along_axis(gt, idx, axis=1) if len(drec) else np.zeros((len(qrec), 0), bool)
    recall = {}
    denom = int(evaluated.sum())
    for n in ns:
        ok = hits[:, :n].any(axis=1) & evaluated
        recall[n] = float(ok.sum()) / denom if denom else 0.0
    per_query = []
    for qi, r in enumerate(qrec):
        per_query.append({
            "id": r.id,
            "evaluated": bool(evaluated[qi]),
            "ranked_ids": [drec[j].id for j in idx[qi, :keep_ranks]],
            "similarities": [float(s) for s in sims[qi, :keep_ranks]],
        })
    return EvalReport(
        recall_at=recall,
        per_query=per_query,
        num_queries=len(qrec),
        num_db=len(drec),
        num_evaluated=denom,
        num_excluded=int(len(qrec) - evaluated.sum()),
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------- images


def to_chw(img: np.ndarray) -> np.ndarray:
    """uint8 ``(H, W, 3)`` -> float ``(3, H, W)`` in ``[-1, 1]``."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0


class ImageStore:
    """Lazily loads and caches the images of a manifest as model-ready arrays."""

    def __init__(self, manifest: PlaceManifest, records: Optional[Sequence[Record]] = None):
        from .pnm import read_pnm

        self._read = read_pnm
        self.manifest = manifest
        self.records = list(records if records is not None else manifest.records)
        self._cache: dict = {}

    def __len__(self):
        return len(self.records)

    def get(self, i: int) -> np.ndarray:
        arr = self._cache.get(i)
        if arr is None:
            img = self._read(self.manifest.resolve(self.records[i]))
            if img.ndim != 3:
                raise ContractError(f"{self.records[i].path}: expected an RGB image")
            arr = self._cache[i] = to_chw(img)
        return arr

    def load(self, indices) -> np.ndarray:
        return np.stack([self.get(int(i)) for i in indices])

    def all(self) -> np.ndarray:
        return self.load(range(len(self)))
