"""On-disk formats for snippets, dataset manifests and feature matrices.

Snippet file::

    b"SNIP"  u32 version  u8 channels  u16 side  float32 payload (C, S, S) row-major

Feature file::

    b"FEAT"  u32 version  u32 N  u32 D  float64 payload (N, D)
    N x { u16 id_len, utf-8 id }
    u8 has_labels  [N x i8 label]

Manifests are JSON lines with keys ``id``, ``path``, ``split``, ``label``
(integer or null) and ``channels``; ``path`` is relative to the manifest.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

SNIP_MAGIC = b"SNIP"
FEAT_MAGIC = b"FEAT"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"


class FormatError(ValueError):
    pass


def write_snippet(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[1] != data.shape[2]:
        raise FormatError(f"snippet must be (C, S, S), got {data.shape}")
    header = SNIP_MAGIC + struct.pack("<IBH", FORMAT_VERSION, data.shape[0], data.shape[1])
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_snippet(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != SNIP_MAGIC:
        raise FormatError(f"{path}: not a snippet file")
    version, channels, side = struct.unpack_from("<IBH", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported snippet version {version}")
    n = channels * side * side
    payload = buf[11:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(channels, side, side).astype(np.float32)


@dataclass
class ManifestEntry:
    id: str
    path: str
    split: str
    label: Optional[int]
    channels: int

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "path": self.path, "split": self.split, "label": self.label, "channels": self.channels}
        )


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    root: str = "."

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict:
        out = {"pretrain": 0, "train": 0, "test": 0}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def load(self, entries: Iterable[ManifestEntry], channels: Optional[int] = None) -> np.ndarray:
        """Stack snippets as float64 (N, C, S, S); ``channels=1`` keeps the HF band only."""
        arrays = []
        for e in entries:
            snip = read_snippet(self.resolve(e))
            if snip.shape[0] != e.channels:
                raise FormatError(f"{e.id}: manifest says {e.channels} channels, file has {snip.shape[0]}")
            if channels is not None:
                if channels > snip.shape[0]:
                    raise FormatError(f"{e.id}: requested {channels} channels, snippet has {snip.shape[0]}")
                snip = snip[:channels]
            arrays.append(snip.astype(np.float64))
        if not arrays:
            return np.zeros((0, channels or 1, 0, 0))
        return np.stack(arrays)

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")
        return path


def read_manifest(path) -> DatasetManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            entries.append(ManifestEntry(d["id"], d["path"], d["split"], d["label"], int(d["channels"])))
    return DatasetManifest(entries, root=os.path.dirname(os.path.abspath(path)))


def write_features(path, rows: np.ndarray, ids: List[str], labels: Optional[np.ndarray] = None) -> None:
    rows = np.asarray(rows, dtype="<f8")
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise FormatError(f"feature rows {rows.shape} do not match {len(ids)} ids")
    parts = [FEAT_MAGIC, struct.pack("<III", FORMAT_VERSION, rows.shape[0], rows.shape[1]), rows.tobytes()]
    for i in ids:
        raw = i.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    if labels is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + np.asarray(labels, dtype="<i1").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_features(path):
    """Return ``(rows, ids, labels)``; ``labels`` is None when the file has none."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FEAT_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    pos = 16
    rows = np.frombuffer(buf, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        ids.append(buf[pos : pos + ln].decode("utf-8"))
        pos += ln
    labels = None
    if buf[pos] == 1:
        labels = np.frombuffer(buf, dtype="<i1", count=n, offset=pos + 1).astype(np.int64)
    return rows, ids, labels
