"""Quantized-model artifact: one self-describing binary file.

Layout: 8-byte magic, little-endian u64 header length, canonical-JSON
header, then the payload sections back to back. The header carries the
config and assignment (with their digests), a layer table, metrics, and
a section table with per-section sha256, so the verifier needs nothing
beyond the file itself.

Writes are atomic: a temp file in the target directory is fsynced and
renamed over the destination, so a crashed run never leaves a partial
artifact behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .codecs import PackedWeights
from .config import canonical_json, digest_of
from .errors import PackError

MAGIC = b"LBART001"
FORMAT = "lowbit/artifact-v1"

V_BOUND = 0.5
AB_LO, AB_HI = 0.5, 1.5


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


@dataclass
class Artifact:
    header: dict
    packed: dict    # layer name -> PackedWeights
    tuned: dict     # layer name -> {"v": arr, "alpha": arr, "beta": arr}

    @property
    def config(self) -> dict:
        return self.header["config"]

    @property
    def assignment(self) -> dict:
        return self.header["assignment"]

    @property
    def metrics(self) -> dict:
        return self.header["metrics"]


def _sections(packed: dict, tuned: dict):
    """Deterministic (name, kind, bytes, meta) list."""
    out = []
    for name in sorted(packed):
        out.append((f"packed:{name}", "packed", packed[name].to_bytes(), {}))
    for name in sorted(tuned):
        for field in ("v", "alpha", "beta"):
            arr = np.ascontiguousarray(tuned[name][field], dtype=np.float64)
            meta = {"dtype": "f8", "shape": list(arr.shape)}
            out.append((f"tune:{name}:{field}", "array", arr.tobytes(), meta))
    return out


def save_artifact(path, config_dict: dict, assignment_dict: dict,
                  layers: list, metrics: dict, tuning: list,
                  packed: dict, tuned: dict) -> None:
    """Atomically write an artifact file.

    ``layers`` rows need name/params/bits/label/shape; ``tuning`` is the
    per-block loss summary; ``tuned`` maps layer name to its v, alpha
    and beta arrays.
    """
    path = Path(path)
    sections = _sections(packed, tuned)
    table = []
    offset = 0
    for name, kind, blob, meta in sections:
        row = {"name": name, "kind": kind, "offset": offset,
               "length": len(blob), "sha256": _sha(blob)}
        row.update(meta)
        table.append(row)
        offset += len(blob)
    header = {
        "format": FORMAT,
        "config": config_dict,
        "config_digest": digest_of(config_dict),
        "assignment": assignment_dict,
        "assignment_digest": digest_of(assignment_dict),
        "layers": layers,
        "metrics": metrics,
        "tuning": tuning,
        "sections": table,
    }
    head = canonical_json(header).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for _, _, blob, _ in sections:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read_header(buf: bytes) -> tuple:
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise PackError("not an artifact file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", buf, len(MAGIC))
    start = len(MAGIC) + 8
    if len(buf) < start + hlen:
        raise PackError("truncated artifact header")
    try:
        header = json.loads(buf[start:start + hlen])
    except json.JSONDecodeError as e:
        raise PackError(f"artifact header is not valid JSON: {e}") from None
    if header.get("format") != FORMAT:
        raise PackError(f"unknown artifact format {header.get('format')!r}")
    return header, buf[start + hlen:]


def load_artifact(path) -> Artifact:
    buf = Path(path).read_bytes()
    header, payload = _read_header(buf)
    packed = {}
    tuned = {}
    for row in header["sections"]:
        blob = payload[row["offset"]:row["offset"] + row["length"]]
        if len(blob) != row["length"]:
            raise PackError(f"section {row['name']} is truncated")
        if row["kind"] == "packed":
            packed[row["name"].split(":", 1)[1]] = PackedWeights.from_bytes(blob)
        else:
            _, name, field = row["name"].split(":")
            arr = np.frombuffer(blob, dtype=np.float64).reshape(row["shape"])
            tuned.setdefault(name, {})[field] = arr.copy()
    return Artifact(header, packed, tuned)


def verify_artifact(path) -> list:
    """Self-contained integrity check; returns a list of problems.

    Re-derives both digests, checks every section hash and byte-level
    round trip, decodes each packed layer against the layer table,
    bounds the tuned parameters, and re-checks the bit budget exactly.
    """
    problems = []
    try:
        buf = Path(path).read_bytes()
        header, payload = _read_header(buf)
    except (OSError, PackError) as e:
        return [str(e)]

    if digest_of(header.get("config", {})) != header.get("config_digest"):
        problems.append("config digest mismatch")
    if digest_of(header.get("assignment", {})) != header.get("assignment_digest"):
        problems.append("assignment digest mismatch")

    layers = {row["name"]: row for row in header.get("layers", [])}
    seen_payload = 0
    packed = {}
    tuned = {}
    for row in header.get("sections", []):
        name = row["name"]
        blob = payload[row["offset"]:row["offset"] + row["length"]]
        if len(blob) != row["length"]:
            problems.append(f"section {name}: truncated payload")
            continue
        seen_payload = max(seen_payload, row["offset"] + row["length"])
        if _sha(blob) != row["sha256"]:
            problems.append(f"section {name}: sha256 mismatch")
            continue
        if row["kind"] == "packed":
            lname = name.split(":", 1)[1]
            try:
                pw = PackedWeights.from_bytes(blob)
            except PackError as e:
                problems.append(f"section {name}: {e}")
                continue
            if pw.to_bytes() != blob:
                problems.append(f"section {name}: non-canonical payload")
            packed[lname] = pw
        else:
            _, lname, field = name.split(":")
            arr = np.frombuffer(blob, dtype=np.float64)
            if int(np.prod(row["shape"], dtype=np.int64)) != arr.size:
                problems.append(f"section {name}: shape/length mismatch")
                continue
            tuned.setdefault(lname, {})[field] = arr.reshape(row["shape"])
    if len(payload) != seen_payload:
        problems.append(
            f"payload has {len(payload) - seen_payload} unaccounted bytes")

    for lname, pw in packed.items():
        row = layers.get(lname)
        if row is None:
            problems.append(f"packed layer {lname} missing from layer table")
            continue
        want = tuple(row["shape"])
        got = tuple(pw.shape)
        if got not in (want, want[::-1]):
            problems.append(f"layer {lname}: packed shape {got} vs {want}")
            continue
        deq = pw.dequantize()
        if not np.all(np.isfinite(deq)):
            problems.append(f"layer {lname}: non-finite dequantized values")
    for lname in layers:
        if lname not in packed:
            problems.append(f"layer {lname} has no packed section")

    for lname, fields in tuned.items():
        if lname not in layers:
            problems.append(f"tuned params for unknown layer {lname}")
            continue
        missing = {"v", "alpha", "beta"} - set(fields)
        if missing:
            problems.append(f"layer {lname}: missing tuned fields {sorted(missing)}")
        v = fields.get("v")
        if v is not None and (np.abs(v) > V_BOUND).any():
            problems.append(f"layer {lname}: rounding offsets outside "
                            f"[-{V_BOUND}, {V_BOUND}]")
        for fname in ("alpha", "beta"):
            ab = fields.get(fname)
            if ab is not None and ((ab < AB_LO) | (ab > AB_HI)).any():
                problems.append(
                    f"layer {lname}: {fname} outside [{AB_LO}, {AB_HI}]")

    asn = header.get("assignment", {})
    target = asn.get("target_bits") or header.get("config", {}).get(
        "scheme", {}).get("target_bits")
    if target and layers:
        t = Fraction(target)
        total = sum(int(row["params"]) for row in layers.values())
        used = sum(int(row["bits"]) * int(row["params"])
                   for row in layers.values())
        # used/total <= t, cross-multiplied to integers
        if used * t.denominator > t.numerator * total:
            problems.append(
                f"budget violated: {used} bit-params over {total} params "
                f"exceeds target {target}")
    return problems
