"""Named-tensor checkpoint archive.

Layout: magic, u64 metadata length, UTF-8 JSON metadata, u64 entry count,
then per entry u64 name length, name, u64 blob length and a tensor blob
(see ``tensor.to_bytes``). Parameters are stored as ``param/<name>`` and
RMSProp accumulators as ``rms/<name>``.
"""

import json
import struct
from pathlib import Path

from .tensor import from_bytes, to_bytes

MAGIC = b"UNRLCKPT1"


class CheckpointError(Exception):
    pass


def save(path, tensors, metadata):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<Q", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        blob = to_bytes(value)
        chunks += [struct.pack("<Q", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", buf, off)
    off += 8
    metadata = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        name = buf[off:off + n].decode("utf-8")
        off += n
        (size,) = struct.unpack_from("<Q", buf, off)
        off += 8
        t, end = from_bytes(buf, off)
        if end != off + size:
            raise CheckpointError(f"{path}: corrupt entry {name}")
        tensors[name] = t.data
        off = end
    return tensors, metadata


def save_store(path, store, metadata):
    tensors = {f"param/{k}": v for k, v in store.params.items()}
    tensors.update({f"rms/{k}": v for k, v in store.accum.items()})
    meta = dict(metadata, updates=store.updates, skipped=store.skipped)
    return save(path, tensors, meta)


def split_store(tensors):
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    accum = {k[len("rms/"):]: v for k, v in tensors.items() if k.startswith("rms/")}
    return params, accum
