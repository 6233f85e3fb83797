"""Orientation pose descriptors, the search index, and the vote store.

A pose becomes 26 unit direction vectors (52 floats), one per configured
joint pair, so the representation is exactly invariant to translation and
uniform scaling. Pairs with a missing endpoint are zero-filled and masked.
The pair table is versioned configuration: retrieval results are only
comparable between indexes built with the same table version.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import Keypoint, SKELETON_EDGES


class RetrievalError(Exception):
    pass


# 19 canonical skeleton edges plus 7 cross-body pairs. The skeleton already
# carries shoulder-shoulder and hip-hip, so the cross set adds elbow-elbow
# and knee-knee alongside the opposite-side and extremity pairs.
CROSS_PAIRS = [
    (3, 4),    # ear - ear
    (9, 10),   # wrist - wrist
    (15, 16),  # ankle - ankle
    (5, 12),   # left shoulder - right hip
    (6, 11),   # right shoulder - left hip
    (7, 8),    # elbow - elbow
    (13, 14),  # knee - knee
]
PAIR_TABLE: list[tuple[int, int]] = list(SKELETON_EDGES) + CROSS_PAIRS
PAIR_TABLE_VERSION = "pairs-v1"

DESCRIPTOR_DIM = 2 * len(PAIR_TABLE)  # 52


@dataclass
class PoseDescriptor:
    values: np.ndarray            # (52,) float64
    valid_mask: np.ndarray        # (26,) bool

    def __post_init__(self):
        if self.values.shape != (DESCRIPTOR_DIM,):
            raise RetrievalError(f"descriptor must have {DESCRIPTOR_DIM} dims, got {self.values.shape}")


def compute_descriptor(keypoints: list[Keypoint]) -> PoseDescriptor:
    """Unit direction per configured joint pair; invalid pairs zero-filled.

    Requires at least two visible keypoints. Direction runs from the first
    to the second endpoint of each pair.
    """
    by_class = {kp.class_id: kp for kp in keypoints if kp.visibility > 0}
    if len(by_class) < 2:
        raise RetrievalError("descriptor needs at least two visible keypoints")
    values = np.zeros(DESCRIPTOR_DIM)
    mask = np.zeros(len(PAIR_TABLE), dtype=bool)
    for i, (a, b) in enumerate(PAIR_TABLE):
        ka, kb = by_class.get(a), by_class.get(b)
        if ka is None or kb is None:
            continue
        dx, dy = kb.x - ka.x, kb.y - ka.y
        norm = math.hypot(dx, dy)
        if norm < 1e-12:
            continue
        values[2 * i] = dx / norm
        values[2 * i + 1] = dy / norm
        mask[i] = True
    return PoseDescriptor(values=values, valid_mask=mask)


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------


@dataclass
class IndexEntry:
    image_id: str
    person_index: int
    descriptor: PoseDescriptor
    thumbnail: str = ""

    @property
    def result_id(self) -> str:
        return f"{self.image_id}:{self.person_index}"


@dataclass
class RetrievalIndex:
    entries: list[IndexEntry] = field(default_factory=list)
    version: str = PAIR_TABLE_VERSION

    def add(self, entry: IndexEntry) -> None:
        if any(e.result_id == entry.result_id for e in self.entries):
            raise RetrievalError(f"duplicate index entry {entry.result_id}")
        self.entries.append(entry)

    def find(self, result_id: str) -> IndexEntry | None:
        for e in self.entries:
            if e.result_id == result_id:
                return e
        return None


def query_topk(index: RetrievalIndex, query: PoseDescriptor, k: int) -> list[tuple[IndexEntry, float]]:
    """Ascending Euclidean distance over the full 52-dim vectors.

    Ties break by entry id; k is capped at the index size.
    """
    if not index.entries:
        raise RetrievalError("query_topk on an empty index")
    if query.values.shape != (DESCRIPTOR_DIM,):
        raise RetrievalError(f"query descriptor has wrong dimension {query.values.shape}")
    scored = []
    for e in index.entries:
        d = float(np.linalg.norm(e.descriptor.values - query.values))
        scored.append((d, e.image_id, e.person_index, e))
    scored.sort(key=lambda t: (t[0], t[1], t[2]))
    return [(e, d) for d, _, _, e in scored[:max(0, min(k, len(scored)))]]


_INDEX_MAGIC = b"APIX"
_INDEX_FORMAT_VERSION = 1


def save_index(index: RetrievalIndex, path) -> None:
    """Binary layout: magic, format version, dims, count, table tag, entries."""
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        tag = index.version.encode("utf-8")
        fh.write(struct.pack("<III", _INDEX_FORMAT_VERSION, DESCRIPTOR_DIM, len(index.entries)))
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)
        for e in index.entries:
            for text in (e.image_id, e.thumbnail):
                raw = text.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(struct.pack("<H", e.person_index))
            fh.write(e.descriptor.values.astype("<f8").tobytes())
            fh.write(np.packbits(e.descriptor.valid_mask).tobytes())


def load_index(path) -> RetrievalIndex:
    n_mask_bytes = (len(PAIR_TABLE) + 7) // 8
    with open(path, "rb") as fh:
        if fh.read(4) != _INDEX_MAGIC:
            raise RetrievalError(f"{path}: not a retrieval index")
        fmt, dims, count = struct.unpack("<III", fh.read(12))
        if fmt != _INDEX_FORMAT_VERSION:
            raise RetrievalError(f"{path}: unsupported index format {fmt}")
        if dims != DESCRIPTOR_DIM:
            raise RetrievalError(f"{path}: dimension mismatch {dims} != {DESCRIPTOR_DIM}")
        (tag_len,) = struct.unpack("<H", fh.read(2))
        version = fh.read(tag_len).decode("utf-8")
        index = RetrievalIndex(version=version)
        for _ in range(count):
            texts = []
            for _ in range(2):
                (n,) = struct.unpack("<H", fh.read(2))
                texts.append(fh.read(n).decode("utf-8"))
            (person_index,) = struct.unpack("<H", fh.read(2))
            values = np.frombuffer(fh.read(8 * DESCRIPTOR_DIM), dtype="<f8").astype(np.float64)
            mask = np.unpackbits(np.frombuffer(fh.read(n_mask_bytes), dtype=np.uint8))
            mask = mask[:len(PAIR_TABLE)].astype(bool)
            index.entries.append(IndexEntry(
                image_id=texts[0], thumbnail=texts[1], person_index=person_index,
                descriptor=PoseDescriptor(values=values, valid_mask=mask)))
    return index


# ---------------------------------------------------------------------------
# Votes
# ---------------------------------------------------------------------------

VOTE_CHOICES = ("relevant", "indifferent", "irrelevant")
RELEVANCE_GAIN = {"relevant": 2, "indifferent": 1, "irrelevant": 0}


@dataclass
class VoteRecord:
    session_id: str
    query_id: str
    result_id: str
    vote: str
    timestamp: float

    def __post_init__(self):
        if self.vote not in VOTE_CHOICES:
            raise RetrievalError(f"vote must be one of {VOTE_CHOICES}, got {self.vote!r}")


class VotesStore:
    """Append-only line-delimited votes with upsert-on-read semantics.

    The newest record per (session, query, result) wins. Appends are
    serialized by a lock so concurrent requests never interleave lines;
    the file survives restarts.
    """

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._latest: dict[tuple[str, str, str], VoteRecord] = {}
        self._load()

    def _load(self) -> None:
        try:
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = VoteRecord(**json.loads(line))
                    self._latest[(rec.session_id, rec.query_id, rec.result_id)] = rec
        except FileNotFoundError:
            pass

    def upsert(self, record: VoteRecord) -> None:
        line = json.dumps({
            "session_id": record.session_id,
            "query_id": record.query_id,
            "result_id": record.result_id,
            "vote": record.vote,
            "timestamp": record.timestamp,
        })
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
            self._latest[(record.session_id, record.query_id, record.result_id)] = record

    def votes_for_query(self, query_id: str, session_id: str | None = None) -> dict[str, VoteRecord]:
        """Latest vote per result id, optionally restricted to one session.

        Across sessions the newest timestamp wins.
        """
        with self._lock:
            out: dict[str, VoteRecord] = {}
            for (sess, query, result), rec in self._latest.items():
                if query != query_id:
                    continue
                if session_id is not None and sess != session_id:
                    continue
                if result not in out or rec.timestamp > out[result].timestamp:
                    out[result] = rec
            return out

    def __len__(self) -> int:
        return len(self._latest)
