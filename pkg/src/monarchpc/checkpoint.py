"""Model checkpoints: a text manifest followed by raw parameter bytes.

Layout: one header line ``MPCC1 <manifest_bytes>\\n``, then the JSON manifest
(format version, block list with kinds/sizes/scopes, parameter kinds with
their dimension schedules), then every parameter array concatenated in
manifest order as little-endian float64, row-major.  Round-trips are
bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .circuit import (CircuitGraph, LeafBlock, ProductBlock, SumBlock)
from .errors import DataError
from .monarch import DenseParam, IdentityParam, MonarchParam

MAGIC = "MPCC1"
FORMAT_VERSION = 1


def _param_entry(pid: int, p) -> dict:
    if isinstance(p, DenseParam):
        return {"id": pid, "kind": "dense",
                "shape": [int(v) for v in p.weight.shape]}
    if isinstance(p, IdentityParam):
        return {"id": pid, "kind": "identity", "size": p.size}
    return {"id": pid, "kind": "monarch_tied" if p.tied else "monarch",
            "in_dims": list(p.in_dims), "out_dims": list(p.out_dims),
            "factor_shapes": [list(f.shape) for f in p.factors]}


def save_checkpoint(graph: CircuitGraph, path) -> None:
    scopes = graph.scopes()
    blocks = []
    for idx, b in enumerate(graph.blocks):
        if isinstance(b, LeafBlock):
            blocks.append({"type": "leaf", "var": b.var, "size": b.size,
                           "table": b.table_id, "scope": [b.var]})
        elif isinstance(b, ProductBlock):
            blocks.append({"type": "product", "kind": b.kind,
                           "children": list(b.children), "size": b.size,
                           "scope": sorted(scopes[idx])})
        else:
            blocks.append({"type": "sum", "children": list(b.children),
                           "param": b.param_id, "size": b.size,
                           "scope": sorted(scopes[idx])})
    manifest = {
        "format_version": FORMAT_VERSION,
        "vocab": graph.vocab,
        "normalized": graph.normalized,
        "root": graph.root,
        "labels": graph.labels,
        "meta": graph.meta,
        "params": [_param_entry(pid, graph.params[pid])
                   for pid in sorted(graph.params)],
        "leaf_tables": [{"id": tid, "shape": list(graph.leaf_tables[tid].shape)}
                        for tid in sorted(graph.leaf_tables)],
        "blocks": blocks,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {len(blob)}\n".encode())
        fh.write(blob)
        for pid in sorted(graph.params):
            p = graph.params[pid]
            if isinstance(p, DenseParam):
                fh.write(np.ascontiguousarray(p.weight, dtype="<f8").tobytes())
            elif isinstance(p, MonarchParam):
                for f in p.factors:
                    fh.write(np.ascontiguousarray(f, dtype="<f8").tobytes())
        for tid in sorted(graph.leaf_tables):
            fh.write(np.ascontiguousarray(graph.leaf_tables[tid],
                                          dtype="<f8").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        end = self.off + count * 8
        if end > len(self.buf):
            raise DataError("checkpoint truncated")
        arr = np.frombuffer(self.buf, dtype="<f8", count=count,
                            offset=self.off).reshape(shape)
        self.off = end
        return arr.astype(np.float64)


def load_checkpoint(path) -> CircuitGraph:
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        parts = header.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise DataError(f"bad checkpoint header: {header!r}")
        manifest = json.loads(fh.read(int(parts[1])).decode())
        blob = fh.read()
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format version "
                        f"{manifest.get('format_version')}")
    reader = _Reader(blob)
    params = {}
    for entry in manifest["params"]:
        pid = entry["id"]
        if entry["kind"] == "dense":
            params[pid] = DenseParam(reader.take(entry["shape"]))
        elif entry["kind"] == "identity":
            params[pid] = IdentityParam(entry["size"])
        else:
            factors = [reader.take(s) for s in entry["factor_shapes"]]
            params[pid] = MonarchParam(tuple(entry["in_dims"]),
                                       tuple(entry["out_dims"]), factors,
                                       tied=entry["kind"] == "monarch_tied")
    tables = {e["id"]: reader.take(e["shape"])
              for e in manifest["leaf_tables"]}
    if reader.off != len(blob):
        raise DataError("checkpoint has trailing bytes")
    blocks = []
    for e in manifest["blocks"]:
        if e["type"] == "leaf":
            blocks.append(LeafBlock(var=e["var"], size=e["size"],
                                    table_id=e["table"]))
        elif e["type"] == "product":
            blocks.append(ProductBlock(kind=e["kind"],
                                       children=tuple(e["children"]),
                                       size=e["size"]))
        else:
            blocks.append(SumBlock(children=tuple(e["children"]),
                                   param_id=e["param"], size=e["size"]))
    meta = manifest.get("meta") or {}
    if "pruned_states" in meta:
        meta["pruned_states"] = {int(k): v
                                 for k, v in meta["pruned_states"].items()}
    return CircuitGraph(blocks=blocks, root=manifest["root"], params=params,
                        leaf_tables=tables, vocab=manifest["vocab"],
                        normalized=manifest["normalized"],
                        labels=manifest.get("labels"), meta=meta)
