"""File formats: graphs with a binary tensor sidecar, dataset manifests, artifacts."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .graph import Edge, Graph, Node
from .interpreter import Dataset

PathLike = Union[str, os.PathLike]
TENSOR_KEYS = {"file", "offset", "dtype", "shape"}
_DTYPES = ("float32", "float64", "int8", "uint8", "int16", "int32", "int64")


class FormatError(ValueError):
    pass


class _Sidecar:
    """Accumulates raw little-endian tensor payloads for one .bin file."""

    def __init__(self, name: str):
        self.name = name
        self.parts: list[bytes] = []
        self.size = 0

    def ref(self, arr: np.ndarray) -> dict:
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise FormatError(f"unsupported tensor dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        ref = {"file": self.name, "offset": self.size, "dtype": arr.dtype.name, "shape": list(arr.shape)}
        self.parts.append(data)
        self.size += len(data)
        return ref

    def payload(self) -> bytes:
        return b"".join(self.parts)


def _encode(v: Any, side: _Sidecar) -> Any:
    if isinstance(v, np.ndarray):
        return side.ref(v)
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, dict):
        return {k: _encode(x, side) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode(x, side) for x in v]
    return v


def _read_tensor(ref: dict, base: Path, cache: dict) -> np.ndarray:
    fname = ref["file"]
    if fname not in cache:
        p = base / fname
        if not p.exists():
            raise FormatError(f"tensor file not found: {p}")
        cache[fname] = p.read_bytes()
    buf = cache[fname]
    dt = np.dtype(ref["dtype"]).newbyteorder("<")
    shape = tuple(int(d) for d in ref["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    off = int(ref["offset"])
    if off + count * dt.itemsize > len(buf):
        raise FormatError(f"tensor reference past end of {fname}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def _decode(v: Any, base: Path, cache: dict) -> Any:
    if isinstance(v, dict):
        if set(v) == TENSOR_KEYS:
            return _read_tensor(v, base, cache)
        return {k: _decode(x, base, cache) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode(x, base, cache) for x in v]
    return v


# ---------------------------------------------------------------------------
# graphs


def graph_to_doc(g: Graph, bin_name: str) -> tuple[dict, bytes]:
    side = _Sidecar(bin_name)
    doc = {
        "nodes": [{"id": n.id, "op": n.op, "attrs": _encode(dict(n.attrs), side)} for n in g.nodes],
        "edges": [{"src": list(e.src), "dst": list(e.dst)} for e in g.edges],
        "inputs": list(g.inputs),
        "outputs": [list(o) for o in g.outputs],
    }
    return doc, side.payload()


def graph_from_doc(doc: dict, base: Path = Path(".")) -> Graph:
    try:
        cache: dict = {}
        nodes = [Node(int(n["id"]), n["op"], _decode(n.get("attrs", {}), base, cache)) for n in doc["nodes"]]
        edges = [Edge(tuple(e["src"]), tuple(e["dst"])) for e in doc["edges"]]
        outputs = [tuple(o) for o in doc["outputs"]]
        return Graph(nodes, edges, [int(i) for i in doc["inputs"]], outputs)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed graph document: {exc!r}") from None


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_graph(g: Graph, path: PathLike) -> Path:
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    doc, payload = graph_to_doc(g, bin_path.name)
    path.write_text(_dumps(doc))
    bin_path.write_bytes(payload)
    return path


def load_graph(path: PathLike) -> Graph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return graph_from_doc(doc, path.parent)


def graph_fingerprint(g: Graph) -> str:
    doc, payload = graph_to_doc(g, "tensors.bin")
    h = hashlib.sha256(json.dumps(doc, sort_keys=True).encode())
    h.update(payload)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# datasets


def save_dataset(ds: Dataset, path: PathLike) -> Path:
    path = Path(path)
    side = _Sidecar(path.with_suffix(".bin").name)
    entries = []
    for i, s in enumerate(ds.samples):
        entry: dict = {"inputs": {k: side.ref(np.asarray(v, np.float32)) for k, v in sorted(s.items())}}
        if ds.labels is not None:
            entry["label"] = int(ds.labels[i])
        entries.append(entry)
    path.write_text(_dumps(entries))
    path.with_suffix(".bin").write_bytes(side.payload())
    return path


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{path}: dataset manifest must be a nonempty array")
    cache: dict = {}
    samples = [{k: _read_tensor(r, path.parent, cache).astype(np.float32) for k, r in e["inputs"].items()}
               for e in entries]
    has = ["label" in e for e in entries]
    if any(has) and not all(has):
        raise FormatError(f"{path}: labels present on some samples only")
    labels = [int(e["label"]) for e in entries] if all(has) else None
    return Dataset(samples, labels)


# ---------------------------------------------------------------------------
# small JSON artifacts


def write_json(path: PathLike, doc: Any) -> None:
    Path(path).write_text(_dumps(doc))


def read_json(path: PathLike, what: Optional[str] = None) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what or 'file'} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
