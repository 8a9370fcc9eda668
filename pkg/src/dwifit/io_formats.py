"""Bit-exact persistence: volume containers, gradient tables, checkpoints,
and PGM/PPM map rendering.

All binary layouts are fixed little-endian with raw 32-bit float payloads;
identical inputs always produce byte-identical files.
"""

import json
import struct

import numpy as np

from .errors import (BadMagic, BadWindow, ColumnCountMismatch,
                     HeaderJsonInvalid, ManifestShapeMismatch,
                     NonUnitDirection, PayloadTruncated)
from .phantom import DwiVolume, TensorField
from .scheme import GradientScheme

VOLUME_MAGIC = b"DWIV0001"
CHECKPOINT_MAGIC = b"FDTI0001"


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path, dims, groups):
    """groups: ordered list of (role, planes) with planes shaped (count, h, w)."""
    h, w, slices = dims
    header = {"dims": [h, w, slices],
              "dtype": "f32le",
              "order": "row-major, plane-major",
              "planes": [{"count": int(p.shape[0]), "role": role}
                         for role, p in groups]}
    hdr = _json_bytes(header)
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        for _, planes in groups:
            f.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())


def _read_container(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != VOLUME_MAGIC:
            raise BadMagic(f"expected {VOLUME_MAGIC!r}, got {magic!r}")
        (hdr_len,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hdr_len).decode("utf-8"))
            dims = header["dims"]
            plane_specs = [(p["role"], int(p["count"])) for p in header["planes"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise HeaderJsonInvalid(str(exc)) from exc
        payload = f.read()
    h, w, slices = dims
    expected = sum(c for _, c in plane_specs) * h * w * 4
    if len(payload) != expected:
        raise PayloadTruncated(f"payload {len(payload)} bytes, expected {expected}")
    groups = {}
    offset = 0
    for role, count in plane_specs:
        n = count * h * w
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset * 4)
        groups[role] = arr.reshape(count, h, w).copy()
        offset += n
    return (h, w, slices), groups


def write_volume(path, vol):
    """Serialize a DwiVolume (scheme travels in bvals/bvecs sidecars)."""
    s, h, w = vol.s0.shape
    n = vol.dwi.shape[1]
    groups = [("b0", vol.s0),
              ("dwi", vol.dwi.reshape(s * n, h, w)),
              ("mask", vol.mask.astype(np.float32))]
    _write_container(path, (h, w, s), groups)


def read_volume(path, scheme=None):
    (h, w, slices), groups = _read_container(path)
    n = groups["dwi"].shape[0] // slices
    return DwiVolume(s0=groups["b0"].astype(np.float64),
                     dwi=groups["dwi"].reshape(slices, n, h, w).astype(np.float64),
                     mask=groups["mask"] > 0.5,
                     scheme=scheme)


def write_tensor_field(path, tf):
    s, h, w = tf.mask.shape
    planes = np.ascontiguousarray(tf.tensors.transpose(0, 3, 1, 2)).reshape(6 * s, h, w)
    _write_container(path, (h, w, s), [("tensor", planes),
                                       ("mask", tf.mask.astype(np.float32))])


def read_tensor_field(path):
    (h, w, slices), groups = _read_container(path)
    tensors = groups["tensor"].reshape(slices, 6, h, w).transpose(0, 2, 3, 1)
    return TensorField(tensors=tensors.astype(np.float64),
                       mask=groups["mask"] > 0.5)


def write_bvecs_bvals(bvals_path, bvecs_path, scheme):
    """FSL-style text pair; b=0 columns first, then one column per direction."""
    nb0 = scheme.n_b0
    bvals = [0.0] * nb0 + [scheme.b] * scheme.n_directions
    cols = np.concatenate([np.zeros((nb0, 3)), scheme.directions], axis=0)
    with open(bvals_path, "w") as f:
        f.write(" ".join(f"{v:.17g}" for v in bvals) + "\n")
    with open(bvecs_path, "w") as f:
        for axis in range(3):
            f.write(" ".join(f"{v:.17g}" for v in cols[:, axis]) + "\n")


def read_bvecs_bvals(bvals_path, bvecs_path):
    """Parse an FSL-style pair back into a GradientScheme.

    Vectors with |norm - 1| <= 1e-3 are renormalized; anything further off
    is rejected.  Zero-b columns are counted as b=0 acquisitions whatever
    their vector says.
    """
    bvals = np.loadtxt(bvals_path, ndmin=1)
    with open(bvecs_path) as f:
        rows = [np.fromstring(line, sep=" ") for line in f if line.strip()]
    if len(rows) != 3:
        raise ColumnCountMismatch(f"bvecs needs 3 rows, got {len(rows)}")
    if len({len(r) for r in rows}) != 1:
        raise ColumnCountMismatch("bvecs rows have unequal lengths")
    vecs = np.stack(rows, axis=1)          # (n_cols, 3)
    if len(vecs) != len(bvals):
        raise ColumnCountMismatch(
            f"{len(bvals)} bvals vs {len(vecs)} bvec columns")

    is_b0 = bvals == 0
    n_b0 = int(is_b0.sum())
    if n_b0 == 0:
        raise ValueError("no b=0 column in bvals")
    shells = np.unique(bvals[~is_b0])
    if len(shells) != 1:
        raise ValueError(f"expected a single shell, got b values {shells}")

    dirs = vecs[~is_b0]
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        worst = norms[np.argmax(np.abs(norms - 1.0))]
        raise NonUnitDirection(f"direction norm {worst:.6f} too far from 1")
    dirs = dirs / norms[:, None]
    return GradientScheme(b=float(shells[0]), directions=dirs, n_b0=n_b0)


def save_checkpoint(path, config, params, meta):
    """Write config/meta JSON plus named f32 parameter blobs.

    `params` maps name -> ndarray; arrays are stored float32 little-endian
    at ascending offsets, so a round trip is bit-identical for f32 inputs.
    """
    entries = []
    blobs = []
    offset = 0
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "offset": offset,
                        "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = _json_bytes({"config": config, "meta": meta, "params": entries})
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        (mlen,) = struct.unpack("<I", f.read(4))
        try:
            manifest = json.loads(f.read(mlen).decode("utf-8"))
        except ValueError as exc:
            raise HeaderJsonInvalid(str(exc)) from exc
        blob = f.read()

    params = {}
    cursor = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        offset = entry["offset"]
        if offset != cursor or offset + nbytes > len(blob):
            raise ManifestShapeMismatch(
                f"param {entry['name']!r}: offset {offset} / {nbytes} bytes "
                f"inconsistent with payload of {len(blob)}")
        params[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        cursor = offset + nbytes
    if cursor != len(blob):
        raise ManifestShapeMismatch(f"{len(blob) - cursor} trailing payload bytes")
    return manifest["config"], params, manifest["meta"]


def _bytes_half_up(values01):
    return np.floor(np.clip(values01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_map(path, image, mask, kind="gray", window=(0.0, 1.0)):
    """Render a scalar map to binary PGM, or an RGB map to binary PPM.

    Grayscale values are windowed linearly to [lo, hi]; DEC input is already
    an (h, w, 3) RGB field in [0, 1].  Masked-out pixels are black.
    """
    lo, hi = window
    if hi <= lo:
        raise BadWindow(f"window {window} has hi <= lo")
    mask = np.asarray(mask, dtype=bool)
    image = np.asarray(image, dtype=float)
    if kind == "gray":
        scaled = (image - lo) / (hi - lo)
        data = _bytes_half_up(scaled) * mask
        h, w = data.shape
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
    elif kind == "dec":
        data = _bytes_half_up(image) * mask[..., None]
        h, w = data.shape[:2]
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
    else:
        raise ValueError(f"unknown render kind {kind!r}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())
