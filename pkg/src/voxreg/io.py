"""File interchange: MetaImage volumes and masks, landmark lists, affine
and lattice serialization, config files, and registration results.

MetaImage is the only volume format: a text header of ``Key = Value``
lines followed by (or pointing at) a raw little-endian payload in
x-fastest order. Supported element types are MET_UCHAR, MET_SHORT, and
MET_FLOAT; an 8-bit file whose values are only {0, 1} reads back as a
:class:`BinaryMask`. All rejection messages name the offending key and
line so malformed files fail loudly instead of crashing.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import (
    DimensionalityError,
    MetaImageError,
    PayloadSizeError,
    UnsupportedElementTypeError,
    ValidationError,
)
from .mask import BinaryMask
from .transform import AffineTransform, ControlLattice, LandmarkSet
from .volume import GridSpec, Volume

_ELEMENT_TYPES = {
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_FLOAT": np.float32,
}


def _parse_header(raw: bytes, path: str):
    """Split the header lines off a MetaImage byte stream.

    Returns (fields, payload_offset, data_file, n_header_lines); fields
    map key -> (value, line_number).
    """
    fields = {}
    pos = 0
    line_no = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise MetaImageError(f"{path}: header ended without ElementDataFile")
        line = raw[pos:nl]
        line_no += 1
        try:
            text = line.decode("ascii").strip()
        except UnicodeDecodeError as e:
            raise MetaImageError(f"{path}: line {line_no} is not ASCII header text") from e
        pos = nl + 1
        if not text:
            continue
        if "=" not in text:
            raise MetaImageError(f"{path}: line {line_no} is not 'Key = Value': {text!r}")
        key, _, value = text.partition("=")
        fields[key.strip()] = (value.strip(), line_no)
        if key.strip() == "ElementDataFile":
            return fields, pos, value.strip(), line_no


def _get(fields, key, path, default=None):
    if key in fields:
        return fields[key][0]
    if default is not None:
        return default
    raise MetaImageError(f"{path}: missing required header key {key}")


def _parse_triple(value: str, key: str, line: int, path: str, cast):
    parts = value.split()
    if len(parts) != 3:
        raise MetaImageError(
            f"{path}: line {line}: {key} needs 3 values, got {value!r}"
        )
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as e:
        raise MetaImageError(f"{path}: line {line}: bad {key} value {value!r}") from e


def read_metaimage(path):
    """Read a volume or mask from a .mha/.mhd file.

    Returns a :class:`Volume`, or a :class:`BinaryMask` for 8-bit files
    whose values are all 0/1. Multi-channel (3-vector) files are rejected
    here; use :func:`read_lattice` for lattices.
    """
    with open(path, "rb") as f:
        raw = f.read()
    fields, offset, data_file, _ = _parse_header(raw, str(path))

    nd_val, nd_line = fields.get("NDims", ("3", 0))
    if int(nd_val) != 3:
        raise DimensionalityError(
            f"{path}: line {nd_line}: NDims must be 3, got {nd_val}"
        )
    if fields.get("CompressedData", ("False", 0))[0] == "True":
        raise MetaImageError(f"{path}: compressed payloads are not supported")
    et_val, et_line = fields.get("ElementType", ("", 0))
    if et_val not in _ELEMENT_TYPES:
        raise UnsupportedElementTypeError(
            f"{path}: line {et_line}: unknown ElementType {et_val!r}; "
            f"supported: {sorted(_ELEMENT_TYPES)}"
        )
    dtype = np.dtype(_ELEMENT_TYPES[et_val])
    channels = int(fields.get("ElementNumberOfChannels", ("1", 0))[0])
    if channels != 1:
        raise MetaImageError(
            f"{path}: ElementNumberOfChannels = {channels}; scalar volume expected"
        )
    dims = _parse_triple(*fields["DimSize"], "DimSize", str(path), int) \
        if "DimSize" in fields else None
    if dims is None:
        raise MetaImageError(f"{path}: missing required header key DimSize")
    spacing = _parse_triple(
        *fields.get("ElementSpacing", ("1 1 1", 0)), "ElementSpacing", str(path), float
    )
    origin = _parse_triple(*fields.get("Offset", ("0 0 0", 0)), "Offset", str(path), float)
    msb = fields.get(
        "BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", ("False", 0))
    )[0] == "True"

    if data_file == "LOCAL":
        payload = raw[offset:]
    else:
        ext = os.path.join(os.path.dirname(os.fspath(path)), data_file)
        with open(ext, "rb") as f:
            payload = f.read()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} "
            f"({dims[0]}x{dims[1]}x{dims[2]} x {dtype.itemsize}-byte {et_val})"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder(">" if msb else "<"))
    arr = arr.reshape(dims[2], dims[1], dims[0]).astype(
        dtype.newbyteorder("="), copy=False
    )
    if et_val == "MET_UCHAR" and np.isin(arr, (0, 1)).all():
        return BinaryMask(arr.astype(bool), spacing, origin)
    return Volume(arr, spacing, origin, element_type=et_val)


def _header_lines(dims, spacing, origin, element_type, channels=1):
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}",
        f"ElementSpacing = {spacing[0]:.17g} {spacing[1]:.17g} {spacing[2]:.17g}",
        f"Offset = {origin[0]:.17g} {origin[1]:.17g} {origin[2]:.17g}",
    ]
    if channels != 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [f"ElementType = {element_type}", "ElementDataFile = LOCAL", ""]
    return "\n".join(lines).encode("ascii")


def write_metaimage(obj, path, element_type: str | None = None) -> None:
    """Write a Volume or BinaryMask as a single-file .mha (LOCAL payload).

    Volumes default to their preferred element type; masks always write as
    8-bit 0/1.
    """
    if isinstance(obj, BinaryMask):
        data = obj.data.astype(np.uint8)
        et = "MET_UCHAR"
        spacing, origin = obj.spacing, obj.origin
        dims = obj.dims
    else:
        et = element_type or obj.element_type
        if et not in _ELEMENT_TYPES:
            raise UnsupportedElementTypeError(
                f"cannot write ElementType {et!r}; supported: {sorted(_ELEMENT_TYPES)}"
            )
        data = obj.data.astype(_ELEMENT_TYPES[et])
        spacing, origin = obj.spacing, obj.origin
        dims = obj.dims
    with open(path, "wb") as f:
        f.write(_header_lines(dims, spacing, origin, et))
        f.write(np.ascontiguousarray(data).tobytes())


def read_landmarks(path) -> LandmarkSet:
    """Parse a landmark file: one 'sx sy sz dx dy dz' line per pair (mm),
    with '#' comments and blank lines allowed."""
    sources, targets = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 6:
                raise ValidationError(
                    f"{path}: line {line_no}: expected 6 numbers, got {len(parts)}"
                )
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise ValidationError(
                    f"{path}: line {line_no}: non-numeric token in {text!r}"
                ) from e
            if not all(np.isfinite(vals)):
                raise ValidationError(f"{path}: line {line_no}: non-finite coordinate")
            sources.append(vals[:3])
            targets.append(vals[3:])
    if len(sources) < 3:
        raise ValidationError(
            f"{path}: need at least 3 landmark pairs, found {len(sources)}"
        )
    return LandmarkSet(np.array(sources), np.array(targets))


def write_landmarks(lm: LandmarkSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# sx sy sz dx dy dz (mm)\n")
        for s, d in zip(lm.sources, lm.targets):
            f.write(" ".join(f"{v:.17g}" for v in (*s, *d)) + "\n")


def read_affine(path) -> AffineTransform:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        a = AffineTransform.from_list(doc["affine"])
    except KeyError as e:
        raise ValidationError(f"{path}: missing 'affine' key") from e
    if "mode" in doc:
        a = AffineTransform(a.matrix, a.translation, mode=doc["mode"])
    return a


def write_affine(a: AffineTransform, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"affine": a.to_list(), "mode": a.mode}, f, indent=2)
        f.write("\n")


def read_config(path):
    """Load an :class:`ObjectiveConfig` from a JSON or TOML file."""
    from .optimizer import ObjectiveConfig

    text = open(path, "rb").read()
    name = os.fspath(path)
    if name.endswith(".toml"):
        import tomli

        try:
            doc = tomli.loads(text.decode("utf-8"))
        except tomli.TOMLDecodeError as e:
            raise ValidationError(f"{path}: TOML parse error: {e}") from e
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: JSON parse error: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a table/object")
    return ObjectiveConfig.from_dict(doc)


def write_config(cfg, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


def write_lattice(l: ControlLattice, stem) -> None:
    """Persist a lattice as <stem>.mha (3-channel float) + <stem>.json sidecar."""
    stem = os.fspath(stem)
    gz, gy, gx, _ = l.coefficients.shape
    with open(stem + ".mha", "wb") as f:
        f.write(_header_lines((gx, gy, gz), l.spacing, l.origin, "MET_FLOAT", channels=3))
        f.write(np.ascontiguousarray(l.coefficients.astype(np.float32)).tobytes())
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "grid_dims": list(l.grid_dims),
                "spacing": list(l.spacing),
                "origin": list(l.origin),
            },
            f,
            indent=2,
        )
        f.write("\n")


def read_lattice(stem) -> ControlLattice:
    stem = os.fspath(stem)
    with open(stem + ".json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    try:
        dims = tuple(int(d) for d in meta["grid_dims"])
        spacing = tuple(float(s) for s in meta["spacing"])
        origin = tuple(float(o) for o in meta["origin"])
    except KeyError as e:
        raise ValidationError(f"{stem}.json: missing key {e}") from e
    path = stem + ".mha"
    with open(path, "rb") as f:
        raw = f.read()
    fields, offset, data_file, _ = _parse_header(raw, path)
    channels = int(fields.get("ElementNumberOfChannels", ("1", 0))[0])
    if channels != 3:
        raise MetaImageError(f"{path}: lattice file must have 3 channels, got {channels}")
    payload = raw[offset:] if data_file == "LOCAL" else open(
        os.path.join(os.path.dirname(path), data_file), "rb"
    ).read()
    expected = dims[0] * dims[1] * dims[2] * 3 * 4
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    coeffs = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    coeffs = coeffs.reshape(dims[2], dims[1], dims[0], 3)
    return ControlLattice(coeffs, spacing, origin)


def read_grid(path) -> GridSpec:
    with open(path, "r", encoding="utf-8") as f:
        return GridSpec.from_dict(json.load(f))


def write_grid(grid: GridSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(grid.to_dict(), f, indent=2)
        f.write("\n")


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "similarity", "bending", "volpres",
                    "inconsistency", "total"])
        for row in trace:
            w.writerow(row.as_tuple())


def write_result(result, out_dir) -> None:
    """Persist a RegistrationResult: affine, per-level lattices (MetaImage +
    JSON sidecar), per-level trace CSVs, and the config echo."""
    os.makedirs(out_dir, exist_ok=True)
    write_affine(result.affine, os.path.join(out_dir, "affine.json"))
    write_config(result.config, os.path.join(out_dir, "config.json"))
    for i, (fwd, bwd, trace) in enumerate(
        zip(result.forward_lattices, result.backward_lattices, result.objective_trace)
    ):
        write_lattice(fwd, os.path.join(out_dir, f"forward_level{i}"))
        write_lattice(bwd, os.path.join(out_dir, f"backward_level{i}"))
        write_trace_csv(trace, os.path.join(out_dir, f"trace_level{i}.csv"))
    summary = {
        "levels": len(result.forward_lattices),
        "converged_levels": list(result.converged_levels),
        "level_spacings": [list(s) for s in result.level_spacings],
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
