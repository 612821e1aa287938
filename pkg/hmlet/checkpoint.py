"""
Binary checkpoint format. All numbers are little-endian.

=======  ==========  ===================================================================
offset   type        content
=======  ==========  ===================================================================
0        4 bytes     magic ``HMLT``
4        u32         format version (1: affine gating MLPs, 2: gating MLPs with hidden layer)
8        u64         number of users |U|
16       u64         number of items |I|
24       u32         embedding dimension D
28       u32         number of layers K
32       u8          variant tag (position in :data:`hmlet.model.VARIANT_NAMES`)
33       f64[]       initial embeddings, (|U|+|I|) × D, row-major
...      f64[]       per learnt gate in layer order: version 2 only hidden w (2D × D) and
                     hidden b (D), then w (2D × 2, or D × 2 in version 2) and b (2)
=======  ==========  ===================================================================
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

from hmlet.exceptions import CheckpointError
from hmlet.model import VARIANT_NAMES, GatingMLP, ModelParams, layer_plan

MAGIC = b'HMLT'
FORMAT_AFFINE = 1
FORMAT_HIDDEN = 2
HEADER = struct.Struct('<4sIQQIIB')
FLOAT = np.dtype('<f8')


def _mlp_shapes(version, D):
    if version == FORMAT_HIDDEN:
        return [(2 * D, D), (D,), (D, 2), (2,)]
    return [(2 * D, 2), (2,)]


def dumps(params, num_users, num_items):
    if num_users + num_items != params.num_nodes:
        raise CheckpointError(f"{num_users} users and {num_items} items do not add up to {params.num_nodes} nodes.")
    hidden = any(mlp.has_hidden for mlp in params.gating_mlps)
    version = FORMAT_HIDDEN if hidden else FORMAT_AFFINE
    header = HEADER.pack(MAGIC, version, num_users, num_items, params.dim, len(params.variant.layers),
                         params.variant.tag)
    chunks = [header]
    chunks.extend(np.ascontiguousarray(array, dtype=FLOAT).tobytes() for array in params.arrays())
    return b''.join(chunks)


def loads(payload):
    if len(payload) < HEADER.size:
        raise CheckpointError("Checkpoint is truncated: incomplete header.")
    magic, version, num_users, num_items, D, K, tag = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"Not a checkpoint file, magic bytes are {magic!r}.")
    if version not in (FORMAT_AFFINE, FORMAT_HIDDEN):
        raise CheckpointError(f"Unsupported checkpoint format version {version}.")
    if tag >= len(VARIANT_NAMES):
        raise CheckpointError(f"Unknown variant tag {tag}.")
    variant = layer_plan(VARIANT_NAMES[tag])
    if K != len(variant.layers):
        raise CheckpointError(f"Checkpoint declares {K} layers, variant '{variant}' has {len(variant.layers)}.")

    shapes = [(num_users + num_items, D)]
    for _ in variant.gated_layers:
        shapes.extend(_mlp_shapes(version, D))
    expected = HEADER.size + FLOAT.itemsize * sum(int(np.prod(shape)) for shape in shapes)
    if len(payload) != expected:
        raise CheckpointError(f"Checkpoint holds {len(payload)} bytes, expected {expected}.")

    arrays, offset = [], HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(payload, dtype=FLOAT, count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += count * FLOAT.itemsize

    mlps, per_mlp = [], len(_mlp_shapes(version, D))
    for start in range(1, len(arrays), per_mlp):
        parts = arrays[start:start + per_mlp]
        if version == FORMAT_HIDDEN:
            mlps.append(GatingMLP(hidden_w=parts[0], hidden_b=parts[1], w=parts[2], b=parts[3]))
        else:
            mlps.append(GatingMLP(w=parts[0], b=parts[1]))
    params = ModelParams(embeddings=arrays[0], gating_mlps=mlps, variant=variant)
    return params, num_users, num_items


def save_checkpoint(path, params, num_users, num_items):
    payload = dumps(params, num_users, num_items)
    Path(path).write_bytes(payload)
    return checkpoint_id(payload)


def load_checkpoint(path, graph=None):
    """
    Read a checkpoint; with ``graph`` given, also verify that it was trained on a dataset of
    the same size.
    """
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint '{path}': {exc}") from exc
    params, num_users, num_items = loads(payload)
    if graph is not None and (graph.num_users, graph.num_items) != (num_users, num_items):
        raise CheckpointError(f"Checkpoint was trained on {num_users} users and {num_items} items, "
                              f"the dataset has {graph.num_users} users and {graph.num_items} items.")
    return params, checkpoint_id(payload)


def checkpoint_id(payload):
    return hashlib.sha256(payload).hexdigest()[:16]
