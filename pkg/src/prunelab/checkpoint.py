"""Binary model checkpoints.

Layout: 4 magic bytes "NPKT", format version (unsigned 32-bit little-endian),
header length (unsigned 32-bit little-endian), a UTF-8 JSON header describing
the topology (node kinds, refs, hyperparameters, parameter shapes, prunable
sites, channel masks), then the raw little-endian float32 parameter blobs in
node order.  Within a node, blobs follow the node's param_order(): trainable
parameters first, then state such as batch-norm running statistics.

Checkpoints always hold float32; loading returns a float32 model.  Round
trips are bit-exact: save(load(p)) writes the identical byte sequence.
"""

import json
import struct

import numpy as np

from .errors import FormatError
from .nn import Model, Site, make_node

MAGIC = b"NPKT"
VERSION = 1


def _header_dict(model):
    nodes = []
    for node in model.nodes:
        entry = {
            "kind": node.kind,
            "name": node.name,
            "refs": node.refs,
            "hyper": node.hyper(),
            "params": [
                {"name": name, "shape": list(_blob(node, name).shape)} for name in node.param_order()
            ],
        }
        nodes.append(entry)
    return {
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "nodes": nodes,
        "sites": [
            {"site_id": s.site_id, "node_index": s.node_index, "channels": s.channels} for s in model.sites
        ],
        "non_prunable": {str(k): v for k, v in model.non_prunable.items()},
        "masks": {str(k): [int(v) for v in m] for k, m in model.masks.items()},
    }


def _blob(node, name):
    return node.params[name] if name in node.params else node.state[name]


def save_model(path, model):
    """Write the model to path as float32, returning the byte count."""
    header = json.dumps(_header_dict(model), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        total = 12 + len(header)
        for node in model.nodes:
            for name in node.param_order():
                raw = np.ascontiguousarray(_blob(node, name), dtype="<f4").tobytes()
                fh.write(raw)
                total += len(raw)
    return total


def _take(buf, offset, count, what):
    if offset + count > len(buf):
        raise FormatError(f"truncated checkpoint: {what} needs bytes [{offset}, {offset + count}), file has {len(buf)}")
    return buf[offset : offset + count], offset + count


def load_model(path):
    """Read a checkpoint written by save_model; returns a float32 Model."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, offset = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"not a checkpoint file: magic {raw!r} != {MAGIC!r}")
    raw, offset = _take(buf, offset, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    raw, offset = _take(buf, offset, 4, "header length")
    header_len = struct.unpack("<I", raw)[0]
    raw, offset = _take(buf, offset, header_len, "header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from e

    nodes = []
    for i, entry in enumerate(header["nodes"]):
        node = make_node(entry["kind"], entry["name"], entry["refs"], entry["hyper"])
        for spec in entry["params"]:
            name, shape = spec["name"], tuple(spec["shape"])
            if name not in node.params and name not in node.state:
                raise FormatError(f"node {i}: unknown parameter {name!r} for kind {entry['kind']!r}")
            expected = _blob(node, name).shape
            if shape != expected:
                raise FormatError(f"node {i}: parameter {name!r} shape {shape} != expected {expected}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw, offset = _take(buf, offset, 4 * count, f"node {i} parameter {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            if name in node.params:
                node.params[name] = arr
            else:
                node.state[name] = arr
        node.zero_grads()
        nodes.append(node)
    if offset != len(buf):
        raise FormatError(f"trailing bytes: file has {len(buf)}, checkpoint ends at {offset}")

    sites = [Site(s["site_id"], s["node_index"], s["channels"]) for s in header["sites"]]
    model = Model(
        nodes,
        tuple(header["input_shape"]),
        header["num_classes"],
        sites,
        non_prunable={int(k): v for k, v in header["non_prunable"].items()},
        dtype=np.float32,
    )
    model.masks = {int(k): np.asarray(m, dtype=np.float32) for k, m in header["masks"].items()}
    return model
