"""Model file serialization.

Layout (all integers little-endian):

    magic  b"SVRN"
    u32    format version (1)
    u32    header length, then that many bytes of UTF-8 text:
             the network spec's text form, optionally followed by a
             "[config]" section holding the run configuration
    u32    parameter count, then per parameter:
             u16 name length, name bytes, u8 ndim, u32 x ndim extents,
             float32 payload
    u32    CRC32 over every parameter record byte

The loader verifies magic, version, and checksum, and that the stored
parameters match the spec's parameter table exactly (each present once).
"""

import struct
import zlib

import numpy as np

from .network import NetworkSpec

MAGIC = b"SVRN"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def save_model(path, spec, params, config_text=None):
    """Write spec + parameters; parameters are stored as float32."""
    want = spec.param_shapes()
    if set(want) != set(params):
        raise ValueError(f"save_model: parameter names do not match spec: "
                         f"{sorted(set(want) ^ set(params))}")
    header = spec.to_text()
    if config_text:
        header += "[config]\n" + config_text
    hbytes = header.encode("utf-8")

    payload = bytearray()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        payload += struct.pack("<H", len(nb)) + nb
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(params)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload))))


def load_model(path, expect_stage=None):
    """Read a model file; returns (spec, params dict, config text or None).

    `expect_stage` ("1" or "2") turns a stage mismatch into an error, e.g.
    a component model handed to a whole-image slot.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if len(blob) < 16 or view[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic (not a model file)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    if pos + hlen + 4 > len(blob):
        raise ModelFormatError(f"{path}: truncated header")
    header = bytes(view[pos:pos + hlen]).decode("utf-8")
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    payload_start = pos

    params = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
        except (struct.error, ValueError) as e:
            raise ModelFormatError(f"{path}: truncated parameter records") from e
        if name in params:
            raise ModelFormatError(f"{path}: duplicate parameter {name!r}")
        params[name] = arr.reshape(shape).copy()
    if pos + 4 > len(blob):
        raise ModelFormatError(f"{path}: missing checksum")
    (crc_stored,) = struct.unpack_from("<I", blob, pos)
    if zlib.crc32(bytes(view[payload_start:pos])) != crc_stored:
        raise ModelFormatError(f"{path}: checksum mismatch (corrupt payload)")

    spec_text, _, config_text = header.partition("[config]\n")
    spec = NetworkSpec.from_text(spec_text)
    if expect_stage is not None and spec.stage != expect_stage:
        raise ModelFormatError(f"{path}: stage-{spec.stage} model where a "
                               f"stage-{expect_stage} model is required")
    want = spec.param_shapes()
    for name, shape in want.items():
        if name not in params:
            raise ModelFormatError(f"{path}: spec parameter {name!r} missing")
        if params[name].shape != shape:
            raise ModelFormatError(f"{path}: parameter {name!r} has shape "
                                   f"{params[name].shape}, spec wants {shape}")
    extra = set(params) - set(want)
    if extra:
        raise ModelFormatError(f"{path}: unexpected parameters {sorted(extra)}")
    return spec, params, config_text or None
