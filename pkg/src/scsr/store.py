"""File formats.

Binary containers share one layout::

    magic (8 bytes) | header length (uint32 LE) | header JSON (UTF-8) | payload

Cohort payload: float32 LE thickness matrix (n x p, row-major), then
uint32 LE length + JSON array of per-subject metadata. The header repeats
that length as ``meta_bytes`` so size edits are caught before parsing.
Model payload: float32 LE tensors in the order listed by the header.
Mask payload: ``np.packbits`` of the (n x p) boolean matrix, row-major.

Text exports (maps, sigma, parcellations) are CSV with a JSON sidecar.
Floats in CSV are written with 6 decimals.
"""

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .cohort import Cohort
from .engine import DeviationMap
from .errors import (
    FormatError, LengthMismatchError, MagicError, TruncatedError, ValidationError, VersionError,
)
from .geometry import IcosphereMesh, Parcellation, n_vertices
from .neural import FeatureScaler, MlpModel, TrainConfig

COHORT_MAGIC = b"SCSRCOH1"
MODEL_MAGIC = b"SCSRMDL1"
MASK_MAGIC = b"SCSRMSK1"
FORMAT_VERSION = 1
FLOAT_FMT = "{:.6f}"


def _write_container(path, magic, header, payload):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for part in payload:
            fh.write(part)


def _read_container(path, magic):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedError(f"{path}: file shorter than the magic string")
    if data[:8] != magic:
        raise MagicError(f"{path}: expected magic {magic!r}, found {data[:8]!r}")
    if len(data) < 12:
        raise TruncatedError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {header.get('format_version')!r}")
    return header, memoryview(data)[12 + hlen:]


# ---------------------------------------------------------------- cohorts


def write_cohort(path, cohort):
    n, p = cohort.thickness.shape
    meta = [
        {"id": cohort.ids[i], "age": float(cohort.age[i]), "sex": int(cohort.sex[i]),
         "site": int(cohort.site[i]), "diagnosis": cohort.diagnosis[i]}
        for i in range(len(cohort))
    ]
    meta_blob = json.dumps(meta).encode("utf-8")
    header = {
        "format_version": FORMAT_VERSION, "n": n, "p": p, "mesh_order": cohort.mesh_order,
        "n_parcels": cohort.n_parcels, "config_hash": cohort.config_hash, "meta_bytes": len(meta_blob),
    }
    matrix = np.ascontiguousarray(cohort.thickness, dtype="<f4").tobytes()
    _write_container(path, COHORT_MAGIC, header, [matrix, struct.pack("<I", len(meta_blob)), meta_blob])


def read_cohort(path):
    header, body = _read_container(path, COHORT_MAGIC)
    try:
        n, p, order = int(header["n"]), int(header["p"]), int(header["mesh_order"])
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: header lacks n/p/mesh_order") from None
    if order >= 0 and p != n_vertices(order):
        raise ValidationError(f"{path}: p={p} does not match mesh order {order}")
    nbytes = 4 * n * p
    declared = header.get("meta_bytes")
    if declared is not None:
        want = nbytes + 4 + int(declared)
        if len(body) < want:
            raise TruncatedError(f"{path}: payload has {len(body)} bytes, header declares {want}")
        if len(body) > want:
            raise LengthMismatchError(f"{path}: payload has {len(body) - want} bytes beyond the declared sizes")
    if len(body) < nbytes + 4:
        raise TruncatedError(f"{path}: thickness payload truncated")
    thickness = np.frombuffer(body[:nbytes], dtype="<f4").reshape(n, p).astype(np.float32)
    (mlen,) = struct.unpack("<I", body[nbytes:nbytes + 4])
    rest = body[nbytes + 4:]
    if declared is not None and mlen != declared:
        raise LengthMismatchError(f"{path}: metadata length {mlen} disagrees with header ({declared})")
    if len(rest) < mlen:
        raise TruncatedError(f"{path}: metadata truncated")
    if len(rest) > mlen:
        raise LengthMismatchError(f"{path}: {len(rest) - mlen} trailing bytes after metadata")
    try:
        meta = json.loads(bytes(rest).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable metadata ({exc})") from None
    if len(meta) != n:
        raise LengthMismatchError(f"{path}: {len(meta)} metadata records for {n} thickness rows")
    return Cohort(
        ids=[m["id"] for m in meta],
        age=[m["age"] for m in meta],
        sex=[m["sex"] for m in meta],
        site=[m["site"] for m in meta],
        diagnosis=[m["diagnosis"] for m in meta],
        thickness=thickness if n else np.zeros((0, p), dtype=np.float32),
        mesh_order=order,
        n_parcels=int(header.get("n_parcels", 0)),
        config_hash=header.get("config_hash", ""),
    )


# ---------------------------------------------------------------- models


def write_model(path, model, extra=None):
    names = model.param_names() + model.buffer_names()
    tensors = {**model.params, **model.buffers}
    header = {
        "format_version": FORMAT_VERSION,
        "dims": model.dims,
        "activation": model.activation,
        "config": model.config.to_dict(),
        "scaler": {
            "mean": model.scaler.mean.tolist(),
            "std": model.scaler.std.tolist(),
            "subtract_only": model.scaler.subtract_only,
        },
        "tensors": [{"name": k, "shape": list(tensors[k].shape)} for k in names],
        "extra": extra or {},
    }
    payload = [np.ascontiguousarray(tensors[k], dtype="<f4").tobytes() for k in names]
    _write_container(path, MODEL_MAGIC, header, payload)


def read_model(path, with_extra=False):
    header, body = _read_container(path, MODEL_MAGIC)
    try:
        dims = [int(d) for d in header["dims"]]
        specs = header["tensors"]
        cfg = dict(header["config"])
        sc = header["scaler"]
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: malformed model header") from None
    if header.get("activation") != "swish":
        raise ValidationError(f"{path}: unsupported activation {header.get('activation')!r}")
    cfg["dtype"] = "float32"
    try:
        config = TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad training config in header ({exc})") from None
    if [dims[0], *config.hidden, dims[-1]] != dims:
        raise ValidationError(f"{path}: dims {dims} disagree with hidden sizes {config.hidden}")
    expected = MlpModel.init(dims[0], config)
    exp_shapes = {**{k: v.shape for k, v in expected.params.items()},
                  **{k: v.shape for k, v in expected.buffers.items()}}
    order = expected.param_names() + expected.buffer_names()
    if [s["name"] for s in specs] != order:
        raise ValidationError(f"{path}: tensor list does not match the architecture")
    offset = 0
    arrays = {}
    for spec in specs:
        shape = tuple(spec["shape"])
        if shape != exp_shapes[spec["name"]]:
            raise ValidationError(f"{path}: tensor {spec['name']} has shape {shape}, dims imply {exp_shapes[spec['name']]}")
        size = 4 * int(np.prod(shape))
        if offset + size > len(body):
            raise TruncatedError(f"{path}: tensor {spec['name']} truncated")
        arrays[spec["name"]] = np.frombuffer(body[offset:offset + size], dtype="<f4").reshape(shape).astype(np.float32)
        offset += size
    if offset != len(body):
        raise LengthMismatchError(f"{path}: {len(body) - offset} trailing bytes after tensors")
    mean, std = np.asarray(sc["mean"], dtype=np.float64), np.asarray(sc["std"], dtype=np.float64)
    if mean.size != dims[0] or std.size != dims[0]:
        raise ValidationError(f"{path}: scaler length does not match p={dims[0]}")
    scaler = FeatureScaler(mean, std, bool(sc.get("subtract_only", False)))
    params = {k: arrays[k] for k in expected.param_names()}
    buffers = {k: arrays[k] for k in expected.buffer_names()}
    model = MlpModel(dims, params, buffers, scaler, config)
    return (model, header.get("extra", {})) if with_extra else model


# ---------------------------------------------------------------- masks


def write_masks(path, sampled):
    sampled = np.asarray(sampled, dtype=bool)
    n, p = sampled.shape
    _write_container(path, MASK_MAGIC, {"format_version": FORMAT_VERSION, "n": n, "p": p},
                     [np.packbits(sampled.ravel()).tobytes()])


def read_masks(path):
    header, body = _read_container(path, MASK_MAGIC)
    n, p = int(header["n"]), int(header["p"])
    need = (n * p + 7) // 8
    if len(body) < need:
        raise TruncatedError(f"{path}: mask payload truncated")
    if len(body) > need:
        raise LengthMismatchError(f"{path}: trailing bytes after masks")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=n * p)
    return bits.reshape(n, p).astype(bool)


# ---------------------------------------------------------------- maps / sigma


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def write_map(path, dmap, extra=None):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("vertex_id,thickness_mm,reference_mm,sigma_mm,z\n")
        for v in range(dmap.z.size):
            fh.write(
                f"{v},{FLOAT_FMT.format(dmap.thickness[v])},{FLOAT_FMT.format(dmap.reference[v])},"
                f"{FLOAT_FMT.format(dmap.sigma[v])},{FLOAT_FMT.format(dmap.z[v])}\n"
            )
    meta = {
        "format_version": FORMAT_VERSION, "subject_id": dmap.subject_id, "q": dmap.q, "s": dmap.s,
        "m": dmap.m, "base_seed": dmap.base_seed, "roi_means": dmap.roi_means,
        "uncovered": [] if dmap.uncovered is None else np.flatnonzero(dmap.uncovered).tolist(),
    }
    meta.update(extra or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _read_csv_columns(path, columns):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != columns:
            raise ValidationError(f"{path}: expected columns {columns}, found {head}")
        rows = list(reader)
    if any(len(r) != len(columns) for r in rows):
        raise TruncatedError(f"{path}: ragged CSV rows")
    try:
        arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric values ({exc})") from None
    if not np.array_equal(arr[:, 0], np.arange(len(rows))):
        raise ValidationError(f"{path}: vertex ids are not 0..n-1")
    return arr


def read_map(path):
    arr = _read_csv_columns(path, ["vertex_id", "thickness_mm", "reference_mm", "sigma_mm", "z"])
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    unc = np.zeros(arr.shape[0], dtype=bool)
    unc[meta.get("uncovered", [])] = True
    return DeviationMap(
        arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], meta.get("q", float("nan")), meta.get("s", float("nan")),
        meta.get("m", 0), meta.get("base_seed", 0), meta.get("roi_means", {}), unc, meta.get("subject_id", ""),
    )


def read_map_meta(path):
    return json.loads(sidecar_path(path).read_text())


def write_sigma(path, sigma, meta):
    with open(path, "w", newline="") as fh:
        fh.write("vertex_id,sigma_mm\n")
        for v, s in enumerate(sigma):
            fh.write(f"{v},{float(s)!r}\n")
    sidecar_path(path).write_text(json.dumps({"format_version": FORMAT_VERSION, **meta}, indent=1, sort_keys=True) + "\n")


def read_sigma(path):
    arr = _read_csv_columns(path, ["vertex_id", "sigma_mm"])
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arr[:, 1], meta


# ---------------------------------------------------------------- meshes / parcellations


def write_mesh_ply(path, mesh, scalar=None, scalar_name="value"):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"comment icosphere order {mesh.order}\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if scalar is not None:
            fh.write(f"property double {scalar_name}\n")
        fh.write(f"element face {mesh.faces.shape[0]}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in range(mesh.n_vertices):
            x, y, z = (float(c) for c in mesh.vertices[v])
            line = f"{x!r} {y!r} {z!r}"
            if scalar is not None:
                line += f" {float(scalar[v])!r}"
            fh.write(line + "\n")
        for a, b, c in mesh.faces:
            fh.write(f"3 {a} {b} {c}\n")


def read_mesh_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise MagicError(f"{path}: not a PLY file")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise TruncatedError(f"{path}: PLY header has no end_header") from None
    nv = nf = None
    n_props = 0
    order = None
    for line in lines[:end]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[:1] == ["property"] and nf is None and nv is not None:
            n_props += 1
        elif parts[:3] == ["comment", "icosphere", "order"]:
            order = int(parts[3])
    body = lines[end + 1:]
    if nv is None or nf is None or len(body) < nv + nf:
        raise TruncatedError(f"{path}: PLY body truncated")
    verts = np.array([[float(t) for t in body[i].split()[:3]] for i in range(nv)])
    faces = np.array([[int(t) for t in body[nv + i].split()[1:4]] for i in range(nf)], dtype=np.int64)
    if order is None:
        order = int(round(np.log((nv - 2) / 10) / np.log(4))) if nv > 2 else -1
    if nv != n_vertices(order) or nf != 20 * 4 ** order:
        raise ValidationError(f"{path}: {nv} vertices / {nf} faces is not an icosphere of order {order}")
    verts.setflags(write=False)
    faces.setflags(write=False)
    return IcosphereMesh(order=order, vertices=verts, faces=faces)


def write_parcellation(path, parcellation):
    with open(path, "w", newline="") as fh:
        fh.write("vertex_id,parcel_id\n")
        for v, lab in enumerate(parcellation.labels):
            fh.write(f"{v},{int(lab)}\n")
    rois = {name: sorted(ids) for name, ids in sorted(parcellation.roi_sets.items())}
    Path(path).with_suffix(".rois.json").write_text(
        json.dumps({"format_version": FORMAT_VERSION, "k": parcellation.k, "roi_sets": rois}, indent=1) + "\n"
    )


def read_parcellation(path):
    arr = _read_csv_columns(path, ["vertex_id", "parcel_id"])
    labels = arr[:, 1].astype(np.int64)
    side = Path(path).with_suffix(".rois.json")
    k = int(labels.max()) + 1 if labels.size else 0
    rois = {}
    if side.exists():
        meta = json.loads(side.read_text())
        k = int(meta.get("k", k))
        rois = {name: frozenset(ids) for name, ids in meta.get("roi_sets", {}).items()}
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"{path}: parcel ids outside [0, {k})")
    labels.setflags(write=False)
    return Parcellation(labels=labels, k=k, roi_sets=rois)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
