"""File formats: JSONL descriptor exchange, binary model container, CSVs.

The descriptor exchange format is JSONL, one record per line:

    {"subject_id": ..., "scan_id": ..., "expression": ...,
     "keypoint": [x, y, z], "vector": [...]}

The model container is binary: a magic string and format version, a
canonical JSON header describing the structure, a raw float64
little-endian array blob, and a SHA-256 checksum over everything before
it.  All emissions are byte-deterministic for identical inputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .correspondence import CorrespondenceParams
from .errors import DataFormatError, ModelFormatError
from .graphbuild import BuildParams, Model, StarGraph
from .pca import PcaBasis
from .synth import SyntheticTruth
from .types import Collection, Descriptor, Ensemble, EquivalenceSet

log = logging.getLogger(__name__)

__all__ = [
    "load_ensembles",
    "write_descriptor_records",
    "save_model",
    "load_model",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_labels_csv",
    "read_labels_csv",
    "write_cmc_csv",
    "write_roc_csv",
    "write_summary_json",
    "write_truth_json",
    "worker_count",
]

_MAGIC = b"EQGMODEL"
_FORMAT_VERSION = 1

_RECORD_FIELDS = ("subject_id", "scan_id", "expression", "keypoint", "vector")


def _fmt(value: float) -> str:
    """Format a number with 9 significant digits, locale-independent."""
    return f"{value:.9g}"


def load_ensembles(path) -> list[Collection]:
    """Read a descriptor JSONL file into collections grouped by subject.

    Records are grouped into ensembles by scan and collections by subject,
    in file order.  Malformed lines and inconsistent dimensions raise
    :class:`DataFormatError` with the offending line number; subjects
    without a neutral scan load fine but are rejected later by the build.
    """
    path = Path(path)
    records = []
    dim = None
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {line_no}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}: line {line_no}: record must be an object")
            missing = [f for f in _RECORD_FIELDS if f not in obj]
            if missing:
                raise DataFormatError(
                    f"{path}: line {line_no}: missing fields {', '.join(missing)}"
                )
            try:
                keypoint = np.asarray(obj["keypoint"], dtype=np.float64)
                vector = np.asarray(obj["vector"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {line_no}: bad numerics ({exc})") from exc
            if keypoint.shape != (3,):
                raise DataFormatError(f"{path}: line {line_no}: keypoint must have 3 entries")
            if vector.ndim != 1 or vector.size == 0:
                raise DataFormatError(f"{path}: line {line_no}: vector must be non-empty 1-D")
            if not (np.all(np.isfinite(keypoint)) and np.all(np.isfinite(vector))):
                raise DataFormatError(f"{path}: line {line_no}: non-finite numerics")
            if dim is None:
                dim = vector.size
            elif vector.size != dim:
                raise DataFormatError(
                    f"{path}: line {line_no}: vector dimension {vector.size} != {dim}"
                )
            records.append(
                (str(obj["subject_id"]), str(obj["scan_id"]), str(obj["expression"]), keypoint, vector)
            )
    if not records:
        raise DataFormatError(f"{path}: no descriptor records")

    # group by (subject, scan) preserving file order
    scans: dict[tuple[str, str], dict] = {}
    scan_owner: dict[str, str] = {}
    subject_order: list[str] = []
    for subject, scan, expression, keypoint, vector in records:
        key = (subject, scan)
        if key not in scans:
            if scan in scan_owner:
                raise DataFormatError(
                    f"{path}: scan {scan!r} appears under subjects "
                    f"{scan_owner[scan]!r} and {subject!r}"
                )
            scan_owner[scan] = subject
            scans[key] = {"expression": expression, "rows": []}
            if subject not in subject_order:
                subject_order.append(subject)
        elif scans[key]["expression"] != expression:
            raise DataFormatError(
                f"{path}: scan {scan!r} of subject {subject!r} has conflicting expressions"
            )
        scans[key]["rows"].append((keypoint, vector))

    collections = []
    for subject in subject_order:
        if not any(
            info["expression"] == "neutral" for (subj, _), info in scans.items() if subj == subject
        ):
            log.warning(
                "%s: subject %r has no neutral scan; the build will reject this collection",
                path,
                subject,
            )
        ensembles = []
        for (subj, scan), info in scans.items():
            if subj != subject:
                continue
            descriptors = tuple(
                Descriptor(
                    vector=vector,
                    keypoint=keypoint,
                    descriptor_id=f"{scan}/k{i:04d}",
                    ensemble_id=scan,
                    collection_id=subject,
                )
                for i, (keypoint, vector) in enumerate(info["rows"])
            )
            ensembles.append(
                Ensemble(
                    ensemble_id=scan,
                    subject_id=subject,
                    expression=info["expression"],
                    descriptors=descriptors,
                )
            )
        collections.append(
            Collection(collection_id=subject, subject_id=subject, ensembles=tuple(ensembles))
        )
    return collections


def write_descriptor_records(path, ensembles) -> None:
    """Write ensembles to descriptor JSONL (one record per descriptor)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ensemble in ensembles:
            for d in ensemble.descriptors:
                record = {
                    "subject_id": ensemble.subject_id,
                    "scan_id": ensemble.ensemble_id,
                    "expression": ensemble.expression,
                    "keypoint": [float(v) for v in d.keypoint],
                    "vector": [float(v) for v in d.vector],
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# model container


def _model_header_and_blob(model: Model) -> tuple[dict, bytes]:
    blob = bytearray()
    collections = []
    for c in model.collections:
        ensembles = []
        for e in c.ensembles:
            descriptors = []
            for d in e.descriptors:
                blob.extend(np.ascontiguousarray(d.vector, dtype="<f8").tobytes())
                blob.extend(np.ascontiguousarray(d.keypoint, dtype="<f8").tobytes())
                descriptors.append(d.descriptor_id)
            ensembles.append(
                {
                    "ensemble_id": e.ensemble_id,
                    "expression": e.expression,
                    "descriptors": descriptors,
                }
            )
        collections.append(
            {
                "collection_id": c.collection_id,
                "subject_id": c.subject_id,
                "ensembles": ensembles,
            }
        )
    sets = [
        {
            "set_id": s.set_id,
            "collection_id": s.collection_id,
            "members": [m.descriptor_id for m in s.members],
            "bridging": s.bridging.descriptor_id,
        }
        for s in model.equivalence_sets
    ]
    pca = None
    if model.pca is not None:
        basis: PcaBasis = model.pca
        blob.extend(np.ascontiguousarray(basis.mean, dtype="<f8").tobytes())
        blob.extend(np.ascontiguousarray(basis.components, dtype="<f8").tobytes())
        pca = {"d_raw": basis.d_raw, "k": basis.k}
    p = model.params
    header = {
        "dim": model.dim,
        "collections": collections,
        "sets": sets,
        "ir_links": [list(l) for l in model.ir_links],
        "pca": pca,
        "params": {
            "diameter_threshold": p.diameter_threshold,
            "lambda_min": p.lambda_min,
            "oversize_factor": p.oversize_factor,
            "min_size_fraction": p.min_size_fraction,
            "hub": p.hub,
            "correspondence": {
                "e_th": p.correspondence.e_th,
                "max_iters": p.correspondence.max_iters,
                "convergence_eps": p.correspondence.convergence_eps,
                "vicinity_radius": p.correspondence.vicinity_radius,
            },
        },
    }
    return header, bytes(blob)


def save_model(model: Model, path) -> None:
    """Serialise a model to the versioned binary container."""
    header, blob = _model_header_and_blob(model)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (
        _MAGIC
        + struct.pack("<I", _FORMAT_VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + struct.pack("<Q", len(blob))
        + blob
    )
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def load_model(path) -> Model:
    """Read a model container, verifying version and checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 4 + 8 + 8 + 32:
        raise ModelFormatError(f"{path}: file truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch")
    if body[: len(_MAGIC)] != _MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    offset = len(_MAGIC)
    (version,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if version != _FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    header_bytes = body[offset : offset + header_len]
    offset += header_len
    (blob_len,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    blob = body[offset : offset + blob_len]
    if len(header_bytes) != header_len or len(blob) != blob_len:
        raise ModelFormatError(f"{path}: file truncated")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: bad header ({exc})") from exc

    dim = int(header["dim"])
    values = np.frombuffer(blob, dtype="<f8")
    cursor = 0

    def take(count: int) -> np.ndarray:
        nonlocal cursor
        out = values[cursor : cursor + count]
        if out.size != count:
            raise ModelFormatError(f"{path}: array blob truncated")
        cursor += count
        return np.array(out)

    registry: dict[str, Descriptor] = {}
    collections = []
    for c in header["collections"]:
        ensembles = []
        for e in c["ensembles"]:
            descriptors = []
            for d_id in e["descriptors"]:
                vector = take(dim)
                keypoint = take(3)
                d = Descriptor(
                    vector=vector,
                    keypoint=keypoint,
                    descriptor_id=d_id,
                    ensemble_id=e["ensemble_id"],
                    collection_id=c["collection_id"],
                )
                registry[d_id] = d
                descriptors.append(d)
            ensembles.append(
                Ensemble(
                    ensemble_id=e["ensemble_id"],
                    subject_id=c["subject_id"],
                    expression=e["expression"],
                    descriptors=tuple(descriptors),
                )
            )
        collections.append(
            Collection(
                collection_id=c["collection_id"],
                subject_id=c["subject_id"],
                ensembles=tuple(ensembles),
            )
        )

    pca = None
    if header["pca"] is not None:
        d_raw = int(header["pca"]["d_raw"])
        k = int(header["pca"]["k"])
        mean = take(d_raw)
        components = take(k * d_raw).reshape(k, d_raw)
        pca = PcaBasis(mean=mean, components=components)
    if cursor != values.size:
        raise ModelFormatError(f"{path}: trailing data in array blob")

    try:
        sets = tuple(
            EquivalenceSet(
                set_id=s["set_id"],
                collection_id=s["collection_id"],
                members=tuple(registry[m] for m in s["members"]),
                bridging=registry[s["bridging"]],
            )
            for s in header["sets"]
        )
    except KeyError as exc:
        raise ModelFormatError(f"{path}: set references unknown descriptor {exc}") from exc

    stars = tuple(
        StarGraph(
            s.set_id,
            s.bridging,
            tuple(m for m in s.members if m.descriptor_id != s.bridging.descriptor_id),
        )
        for s in sets
    )
    pr = header["params"]
    params = BuildParams(
        diameter_threshold=int(pr["diameter_threshold"]),
        lambda_min=float(pr["lambda_min"]),
        oversize_factor=float(pr["oversize_factor"]),
        min_size_fraction=float(pr["min_size_fraction"]),
        hub=pr["hub"],
        correspondence=CorrespondenceParams(
            e_th=float(pr["correspondence"]["e_th"]),
            max_iters=int(pr["correspondence"]["max_iters"]),
            convergence_eps=float(pr["correspondence"]["convergence_eps"]),
            vicinity_radius=float(pr["correspondence"]["vicinity_radius"]),
        ),
    )
    return Model(
        collections=tuple(collections),
        equivalence_sets=sets,
        stars=stars,
        ir_links=tuple((a, b) for a, b in header["ir_links"]),
        dim=dim,
        params=params,
        pca=pca,
    )


# ---------------------------------------------------------------------------
# CSV / JSON emissions


def write_matrix_csv(path, matrix: np.ndarray, probe_ids, gallery_ids) -> None:
    """Dissimilarity matrix: header row of gallery ids, one row per probe."""
    matrix = np.asarray(matrix)
    probe_ids = list(probe_ids)
    gallery_ids = list(gallery_ids)
    if matrix.shape != (len(probe_ids), len(gallery_ids)):
        raise ValueError("matrix shape does not match id counts")
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe_id"] + gallery_ids)
        for pid, row in zip(probe_ids, matrix):
            writer.writerow([pid] + [_fmt(v) for v in row])


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read a matrix CSV back: (matrix, probe_ids, gallery_ids)."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty matrix file") from None
        if len(header) < 2 or header[0] != "probe_id":
            raise DataFormatError(f"{path}: bad matrix header")
        gallery_ids = header[1:]
        probe_ids = []
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: line {line_no}: wrong column count")
            probe_ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {line_no}: bad number ({exc})") from exc
    if not rows:
        raise DataFormatError(f"{path}: matrix has no probe rows")
    return np.asarray(rows), probe_ids, gallery_ids


def write_labels_csv(path, pairs) -> None:
    """Write (scan_id, subject_id) label pairs."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "subject_id"])
        for scan_id, subject_id in pairs:
            writer.writerow([scan_id, subject_id])


def read_labels_csv(path) -> dict[str, str]:
    """Read scan -> subject labels."""
    path = Path(path)
    labels: dict[str, str] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty labels file") from None
        if header[:2] != ["scan_id", "subject_id"]:
            raise DataFormatError(f"{path}: labels header must be scan_id,subject_id")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}: line {line_no}: need scan_id,subject_id")
            labels[row[0]] = row[1]
    if not labels:
        raise DataFormatError(f"{path}: no label rows")
    return labels


def write_cmc_csv(path, rates) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "rate"])
        for rank, rate in enumerate(rates, start=1):
            writer.writerow([rank, _fmt(rate)])


def write_roc_csv(path, curve) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["far", "vr"])
        for far, vr in curve:
            writer.writerow([_fmt(far), _fmt(vr)])


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_truth_json(path, truth: SyntheticTruth) -> None:
    """Export ground truth as a JSON document."""
    doc = {
        "seed": truth.seed,
        "config": {
            "n_identities": truth.config.n_identities,
            "n_expressions": truth.config.n_expressions,
            "n_keypoints": truth.config.n_keypoints,
            "dim": truth.config.dim,
            "identity_separation": truth.config.identity_separation,
            "identity_scale": truth.config.identity_scale,
            "keypoint_base_scale": truth.config.keypoint_base_scale,
            "expression_scale": truth.config.expression_scale,
            "expression_jitter": truth.config.expression_jitter,
            "noise_sigma": truth.config.noise_sigma,
            "dropout": truth.config.dropout,
            "keypoint_spacing_mm": truth.config.keypoint_spacing_mm,
            "rotation_deg": truth.config.rotation_deg,
            "translation_mm": truth.config.translation_mm,
            "split_subspaces": truth.config.split_subspaces,
        },
        "subjects": list(truth.subjects),
        "expressions": list(truth.expressions),
        "keypoints": list(truth.keypoints),
        "keypoint_layout": {k: [float(v) for v in p] for k, p in truth.keypoint_layout.items()},
        "identity_vectors": {
            s: {k: [float(x) for x in v] for k, v in per.items()}
            for s, per in truth.identity_vectors.items()
        },
        "offsets": {
            f"{s}|{e}": {k: [float(x) for x in v] for k, v in per.items()}
            for (s, e), per in truth.offsets.items()
        },
        "descriptor_truth": {
            d: list(meta) for d, meta in sorted(truth.descriptor_truth.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def worker_count() -> int:
    """Worker cap from EQGRAPH_THREADS (0 = auto, unset = serial)."""
    raw = os.environ.get("EQGRAPH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise DataFormatError(f"EQGRAPH_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise DataFormatError("EQGRAPH_THREADS must be >= 0")
    if n == 0:
        return os.cpu_count() or 1
    return n
