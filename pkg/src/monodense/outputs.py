"""Binary filter-output files.

Layout (little-endian)::

    8 bytes   magic b"MDFILT\\0\\0"
    uint32    version (1)
    uint32    width
    uint32    height
    uint32    frame_id
    float32   mu[height*width]        row-major, NaN where absent
    float32   sigma2[height*width]
    float32   inlier_prob[height*width]
"""

from __future__ import annotations

import struct

import numpy as np

from .filter import FilterOutput

MAGIC = b"MDFILT\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<4I")


def write_filter_output(output, path):
    H, W = output.shape
    present = output.present
    planes = [np.where(present, p, np.nan).astype("<f4") for p in (output.mu, output.sigma2, output.inlier_prob)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, W, H, int(output.frame_id)))
        for p in planes:
            fh.write(np.ascontiguousarray(p).tobytes())


def read_filter_output(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a filter output file")
        version, W, H, frame_id = _HEADER.unpack(fh.read(_HEADER.size))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        n = W * H
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 3 * n:
        raise ValueError(f"{path}: truncated payload ({data.size} of {3 * n} values)")
    mu, s2, e = (data[i * n:(i + 1) * n].reshape(H, W).astype(np.float64) for i in range(3))
    return FilterOutput(mu=mu, sigma2=s2, inlier_prob=e, frame_id=frame_id)
