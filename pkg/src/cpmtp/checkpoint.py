"""Binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"CPMTPCKP"
    version    u32      currently 1
    mode       u32      0 = scratch, 1 = finetune
    n, r, V, E u32 x 4
    count      u32      number of arrays
    arrays     repeated: name length u16, UTF-8 name, ndim u8,
               dims u32 x ndim, float64 data in C order
    config     u32 byte length + UTF-8 JSON (may be empty)

Arrays are written in a fixed order: ``encoder.token_table``,
``encoder.decay``, then ``head.factor_weights`` (scratch) or
``head.shared_head`` and ``head.adapters`` (finetune), then
``head.gate_weights``.
"""

import io
import json
import struct

import numpy as np

from . import encoder as enc
from . import heads

MAGIC = b"CPMTPCKP"
VERSION = 1
_MODES = {heads.SCRATCH: 0, heads.FINETUNE: 1}


def _arrays(model):
    out = [("encoder.token_table", model.encoder.token_table),
           ("encoder.decay", np.array([model.encoder.decay]))]
    if isinstance(model.head, heads.ReducedHeadParams):
        out += [("head.shared_head", model.head.shared_head),
                ("head.adapters", model.head.adapters)]
    else:
        out.append(("head.factor_weights", model.head.factor_weights))
    out.append(("head.gate_weights", model.head.gate_weights))
    return out


def dumps(model, config=None):
    buf = io.BytesIO()
    n, r, V, E = model.dims
    arrays = _arrays(model)
    buf.write(MAGIC)
    buf.write(struct.pack("<7I", VERSION, _MODES[model.mode], n, r, V, E, len(arrays)))
    for name, a in arrays:
        raw = name.encode()
        a = np.ascontiguousarray(a, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    cfg = json.dumps(config).encode() if config is not None else b""
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    return buf.getvalue()


def loads(data):
    """Parse checkpoint bytes; returns ``(model, config_or_None)``."""
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, mode, n, r, V, E, count = struct.unpack_from("<7I", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8 + 28
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(shape).copy()
        pos += size
    (ln,) = struct.unpack_from("<I", data, pos)
    config = json.loads(data[pos + 4:pos + 4 + ln]) if ln else None
    mode_name = heads.FINETUNE if mode == 1 else heads.SCRATCH
    encoder = enc.EncoderParams(arrays["encoder.token_table"], float(arrays["encoder.decay"][0]),
                                trainable=mode_name == heads.SCRATCH)
    if mode_name == heads.FINETUNE:
        head = heads.ReducedHeadParams(arrays["head.shared_head"], arrays["head.adapters"],
                                       arrays["head.gate_weights"])
    else:
        head = heads.FullHeadParams(arrays["head.factor_weights"], arrays["head.gate_weights"])
    model = heads.CPModel(encoder, head, mode_name)
    if model.dims != (n, r, V, E):
        raise ValueError(f"header dims {(n, r, V, E)} disagree with arrays {model.dims}")
    return model, config


def save(path, model, config=None):
    with open(path, "wb") as fh:
        fh.write(dumps(model, config))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
