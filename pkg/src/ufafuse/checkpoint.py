"""Binary checkpoint format.

Layout (little-endian)::

    b"UFAF"                      magic
    u16                          format version
    u32 + bytes                  metadata, UTF-8 JSON
    u32                          tensor count
    per tensor:
        u16 + bytes              name, UTF-8
        u8                       rank
        u32 * rank               dims, row-major
        f32 * prod(dims)         values

Conv kernels are stored (O, I, kh, kw) and biases as rank-1 (O,).
"""

import json
import struct
from pathlib import Path

import numpy as np

from .network import FusionNetwork, layer_plan
from .tensor import Tensor

MAGIC = b"UFAF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors, metadata):
    """Write ``tensors`` (name -> ndarray) and a JSON-serialisable ``metadata`` dict."""
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path):
    """Return (tensors, metadata)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a UFAF checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    return tensors, metadata


def network_tensors(net):
    out = {}
    for name, t in net.params.items():
        arr = t.data.astype(np.float32)
        out[name] = arr.reshape(-1) if name.endswith(".bias") else arr
    return out


def network_metadata(net, **extra):
    meta = {
        "ablation": net.ablation,
        "leaky_slope": net.leaky_slope,
        "init": net.init_scheme,
        "init_seed": net.seed,
    }
    meta.update(extra)
    return meta


def save_network(path, net, extra_tensors=None, **metadata):
    tensors = network_tensors(net)
    if extra_tensors:
        tensors.update(extra_tensors)
    write_checkpoint(path, tensors, network_metadata(net, **metadata))


def load_network(path):
    """Return (net, metadata, extra_tensors) where extras are non-network entries."""
    tensors, meta = read_checkpoint(path)
    names = {f"{layer}.{kind}" for layer, *_ in layer_plan() for kind in ("weight", "bias")}
    params, extras = {}, {}
    for name, arr in tensors.items():
        if name in names:
            if name.endswith(".bias"):
                arr = arr.reshape(1, -1, 1, 1)
            params[name] = Tensor(arr, requires_grad=True, dtype=np.float32)
        else:
            extras[name] = arr
    net = FusionNetwork(params, ablation=meta.get("ablation", "UFA"),
                        leaky_slope=meta.get("leaky_slope", 0.01),
                        init_scheme=meta.get("init", "unknown"), seed=meta.get("init_seed"))
    return net, meta, extras
