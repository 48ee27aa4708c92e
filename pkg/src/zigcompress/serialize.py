"""Manifest JSON + ``OTOP`` parameter blob reader/writer.

Blob layout (all little-endian)::

    "OTOP"  u32 tensor_count  <pad to 16>
    repeated tensor records, each starting on a 16-byte boundary:
        u16 name_len, utf-8 name, u8 rank, u32 dims[rank], f32 data[prod(dims)]
        <zero pad to 16>
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .graph import BlobError, DuplicateIdError, Edge, Graph, GraphError, OpKind, Vertex, make_graph
from .params import ParamStore, check_params
from .shapes import infer_shapes

MAGIC = b"OTOP"
MANIFEST_VERSION = 1


def _align(n: int) -> int:
    return (n + 15) & ~15


def write_blob(params: ParamStore, order=None) -> bytes:
    names = list(params) if order is None else list(order)
    out = bytearray(MAGIC + struct.pack("<I", len(names)))
    out.extend(b"\0" * (_align(len(out)) - len(out)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        rec = bytearray(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        rec.extend(struct.pack(f"<{arr.ndim}I", *arr.shape))
        rec.extend(arr.tobytes())
        rec.extend(b"\0" * (_align(len(rec)) - len(rec)))
        out.extend(rec)
    return bytes(out)


def read_blob(blob: bytes) -> ParamStore:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BlobError("bad blob magic (expected 'OTOP')")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = _align(8)
    tensors: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if pos + n > len(blob):
            raise BlobError(f"blob truncated while reading {what}")

    for i in range(count):
        start = pos
        need(2, f"record {i} header")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(nlen + 1, f"record {i} name")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        need(4 * rank, f"dims of tensor {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        need(4 * size, f"data of tensor {name!r}")
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        if name in tensors:
            raise BlobError(f"duplicate tensor {name!r} in blob")
        tensors[name] = data.astype(np.float32)
        pos = start + _align(pos - start)
    return ParamStore(tensors)


def _vertex_to_json(v: Vertex) -> dict:
    attrs = {}
    for key, val in sorted(v.kind.attrs.items()):
        attrs[key] = list(val) if isinstance(val, tuple) else val
    return {"id": v.id, "op": v.tag, "attrs": attrs, "params": list(v.params)}


def serialize_graph(g: Graph) -> str:
    doc = {
        "version": MANIFEST_VERSION,
        "vertices": [_vertex_to_json(g.vertices[vid]) for vid in sorted(g.vertices)],
        "edges": [[e.src, e.dst, e.slot] for e in g.edges],
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def parse_manifest(text: str) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"manifest is not valid JSON: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise GraphError(f"unsupported manifest version {doc.get('version')!r}")
    vertices = []
    seen = set()
    for item in doc.get("vertices", []):
        vid = item["id"]
        if vid in seen:
            raise DuplicateIdError(f"duplicate vertex id {vid!r}")
        seen.add(vid)
        vertices.append(Vertex(vid, OpKind(item["op"], item.get("attrs", {})), tuple(item.get("params", []))))
    edges = []
    for e in doc.get("edges", []):
        src, dst = e[0], e[1]
        slot = e[2] if len(e) > 2 else 0
        for end in (src, dst):
            if end not in seen:
                raise GraphError(f"dangling edge {src}->{dst}: unknown vertex {end!r}")
        edges.append(Edge(src, dst, int(slot)))
    return make_graph(vertices, edges, doc.get("inputs"), doc.get("outputs"))


def parse_graph(manifest: str, blob: bytes) -> tuple[Graph, ParamStore]:
    g = parse_manifest(manifest)
    params = read_blob(blob)
    check_params(g, params)
    return g, params


def param_order(g: Graph) -> list[str]:
    return [name for vid in sorted(g.vertices) for name in g.vertices[vid].params]


def save_model(g: Graph, params: ParamStore, manifest_path) -> tuple[Path, Path]:
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(serialize_graph(g))
    blob_path.write_bytes(write_blob(params, param_order(g)))
    return manifest_path, blob_path


def load_model(manifest_path, blob_path=None) -> tuple[Graph, ParamStore]:
    manifest_path = Path(manifest_path)
    """Read a manifest and its blob; the returned graph carries inferred shapes."""
    blob_path = manifest_path.with_suffix(".bin") if blob_path is None else Path(blob_path)
    g = parse_manifest(manifest_path.read_text())  # manifest errors first, before touching the blob
    params = read_blob(blob_path.read_bytes())
    check_params(g, params)
    return infer_shapes(g), params
