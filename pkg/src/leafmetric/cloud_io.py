"""Point-cloud and leaf-mask I/O.

Reads and writes PLY (ascii 1.0 / binary_little_endian 1.0) vertex clouds and
PGM (P2/P5) leaf masks, and maps a 2D mask onto an organized cloud through the
row-major pixel grid.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]


class PlyError(ValueError):
    """Malformed, unsupported or truncated PLY input."""


class MaskError(ValueError):
    """Malformed PGM input."""


class EmptyMaskError(MaskError):
    """Mask has no leaf pixels."""


class GridError(ValueError):
    """Cloud is not organized, or its grid does not match the mask."""


class TooFewPointsError(ValueError):
    """Fewer valid points than a downstream fit needs."""


class ManifestError(ValueError):
    """Scan manifest is malformed."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in millimetres, optionally colored and organized on a pixel grid.

    ``grid`` is ``(width, height)``; point ``row * width + col`` belongs to
    pixel ``(row, col)``. ``precision`` records the on-disk float width
    (``"float"`` or ``"double"``) so a rewrite preserves it.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    grid: Optional[Tuple[int, int]] = None
    precision: str = "double"
    validity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        object.__setattr__(self, "points", _frozen(pts))
        if self.colors is not None:
            cols = np.array(self.colors, copy=True)
            if cols.shape != (len(pts), 3):
                raise ValueError(f"colors must have shape ({len(pts)}, 3), got {cols.shape}")
            if np.any((cols < 0) | (cols > 255)):
                raise ValueError("color components must be in 0..255")
            object.__setattr__(self, "colors", _frozen(cols.astype(np.uint8)))
        if self.grid is not None:
            w, h = (int(v) for v in self.grid)
            if w <= 0 or h <= 0 or w * h != len(pts):
                raise ValueError(f"grid {w}x{h} does not match {len(pts)} points")
            object.__setattr__(self, "grid", (w, h))
        if self.precision not in ("float", "double"):
            raise ValueError(f"precision must be 'float' or 'double', not {self.precision!r}")
        object.__setattr__(self, "validity", _frozen(np.all(np.isfinite(pts), axis=1)))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.validity]

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.validity))

    def pixel_index(self, row: int, col: int) -> int:
        if self.grid is None:
            raise GridError("cloud has no pixel grid")
        width, height = self.grid
        if not (0 <= row < height and 0 <= col < width):
            raise IndexError(f"pixel ({row}, {col}) outside {width}x{height} grid")
        return row * width + col

    def same_values(self, other: "PointCloud") -> bool:
        """Bitwise equality of points (NaN-aware), colors and grid."""
        if self.grid != other.grid or self.points.shape != other.points.shape:
            return False
        if (self.colors is None) != (other.colors is None):
            return False
        if self.colors is not None and not np.array_equal(self.colors, other.colors):
            return False
        return self.points.tobytes() == other.points.tobytes() or bool(
            np.array_equal(self.points, other.points, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class LeafMask:
    """Binary leaf mask; ``array[row, col]`` is True for leaf pixels."""

    array: np.ndarray
    leaf_id: str = ""

    def __post_init__(self):
        arr = np.array(self.array, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise MaskError(f"mask must be 2D, got shape {arr.shape}")
        if not arr.any():
            raise EmptyMaskError(f"mask {self.leaf_id!r} has no leaf pixels")
        object.__setattr__(self, "array", _frozen(arr))

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def pixels(self) -> set:
        return {(int(r), int(c)) for r, c in np.argwhere(self.array)}

    def __len__(self) -> int:
        return int(np.count_nonzero(self.array))


# --------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_FORMATS = ("ascii", "binary_little_endian")
_GRID_RE = re.compile(r"^(?:obj_info|comment)\s+(width|height)\s*[=:]?\s*(\S+)\s*$")


@dataclass
class _Property:
    name: str
    dtype: str
    count_dtype: Optional[str] = None  # set for list properties
    line: int = 0


@dataclass
class _Element:
    name: str
    count: int
    line: int
    properties: list = field(default_factory=list)


@dataclass
class _Header:
    fmt: str
    elements: list
    grid: dict
    body_offset: int


def _split_header(data: bytes) -> Tuple[list, int]:
    if not (data.startswith(b"ply\n") or data.startswith(b"ply\r\n")):
        raise PlyError("line 1: missing 'ply' magic")
    m = re.search(rb"(?m)^end_header[ \t]*(\r?\n|$)", data)
    if m is None:
        raise PlyError("header is not terminated by 'end_header'")
    try:
        text = data[: m.start()].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyError(f"byte offset {exc.start}: non-ASCII byte in header") from None
    return text.splitlines(), m.end()


def _parse_header(data: bytes) -> _Header:
    lines, body_offset = _split_header(data)
    fmt = None
    elements: list = []
    grid: dict = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        words = line.split()
        key = words[0]
        if key == "format":
            if len(words) != 3:
                raise PlyError(f"line {lineno}: malformed format line {line!r}")
            if words[1] == "binary_big_endian":
                raise PlyError(f"line {lineno}: unsupported format binary_big_endian")
            if words[1] not in _FORMATS:
                raise PlyError(f"line {lineno}: unknown format {words[1]!r}")
            if words[2] != "1.0":
                raise PlyError(f"line {lineno}: unsupported version {words[2]!r}")
            if fmt is not None:
                raise PlyError(f"line {lineno}: duplicate format line")
            fmt = words[1]
        elif key in ("comment", "obj_info"):
            m = _GRID_RE.match(line)
            if m:
                try:
                    grid[m.group(1)] = int(m.group(2))
                except ValueError:
                    raise PlyError(f"line {lineno}: non-integer grid {m.group(1)} {m.group(2)!r}") from None
        elif key == "element":
            if len(words) != 3:
                raise PlyError(f"line {lineno}: malformed element line {line!r}")
            try:
                count = int(words[2])
            except ValueError:
                raise PlyError(f"line {lineno}: element count {words[2]!r} is not an integer") from None
            if count < 0:
                raise PlyError(f"line {lineno}: negative element count {count}")
            elements.append(_Element(words[1], count, lineno))
        elif key == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if len(words) == 3:
                if words[1] not in _PLY_TYPES:
                    raise PlyError(f"line {lineno}: unknown property type {words[1]!r}")
                prop = _Property(words[2], _PLY_TYPES[words[1]], line=lineno)
            elif len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyError(f"line {lineno}: unknown list types in {line!r}")
                prop = _Property(words[4], _PLY_TYPES[words[3]], _PLY_TYPES[words[2]], lineno)
            else:
                raise PlyError(f"line {lineno}: malformed property line {line!r}")
            if any(p.name == prop.name for p in elements[-1].properties):
                raise PlyError(f"line {lineno}: duplicate property {prop.name!r}")
            elements[-1].properties.append(prop)
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {key!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return _Header(fmt, elements, grid, body_offset)


def _vertex_layout(header: _Header) -> _Element:
    vertex = next((e for e in header.elements if e.name == "vertex"), None)
    if vertex is None:
        raise PlyError("header has no vertex element")
    props = {p.name: p for p in vertex.properties}
    for axis in "xyz":
        p = props.get(axis)
        if p is None:
            raise PlyError(f"vertex element lacks property {axis!r}")
        if p.count_dtype is not None or p.dtype not in ("f4", "f8"):
            raise PlyError(f"line {p.line}: property type mismatch, {axis!r} must be float or double")
    if props["x"].dtype != props["y"].dtype or props["x"].dtype != props["z"].dtype:
        raise PlyError(f"line {props['y'].line}: property type mismatch, x/y/z must share a type")
    present = [c for c in ("red", "green", "blue") if c in props]
    if present and len(present) != 3:
        raise PlyError(f"vertex element has partial color {present}")
    for c in present:
        p = props[c]
        if p.count_dtype is not None or p.dtype != "u1":
            raise PlyError(f"line {p.line}: property type mismatch, {c!r} must be uchar")
    return vertex


def _element_dtype(element: _Element) -> np.dtype:
    return np.dtype([(p.name, "<" + p.dtype) for p in element.properties])


def _skip_binary_element(data: bytes, offset: int, element: _Element) -> int:
    if all(p.count_dtype is None for p in element.properties):
        size = _element_dtype(element).itemsize * element.count
        if offset + size > len(data):
            raise PlyError(
                f"truncated body in element {element.name!r}: expected {size} bytes "
                f"at offset {offset}, got {len(data) - offset}"
            )
        return offset + size
    for _ in range(element.count):
        for p in element.properties:
            if p.count_dtype is None:
                offset += np.dtype(p.dtype).itemsize
                continue
            csize = np.dtype(p.count_dtype).itemsize
            if offset + csize > len(data):
                raise PlyError(f"truncated body at byte offset {offset} in element {element.name!r}")
            n = int(np.frombuffer(data, "<" + p.count_dtype, 1, offset)[0])
            if n < 0:
                raise PlyError(f"byte offset {offset}: negative list length {n}")
            offset += csize + n * np.dtype(p.dtype).itemsize
    if offset > len(data):
        raise PlyError(f"truncated body in element {element.name!r}: ends at byte {len(data)}, needed {offset}")
    return offset


def _read_binary(data: bytes, header: _Header, vertex: _Element) -> np.ndarray:
    offset = header.body_offset
    for element in header.elements:
        if element is vertex:
            break
        offset = _skip_binary_element(data, offset, element)
    if any(p.count_dtype is not None for p in vertex.properties):
        raise PlyError(f"line {vertex.line}: list properties on vertex are not supported")
    dtype = _element_dtype(vertex)
    expected = dtype.itemsize * vertex.count
    available = len(data) - offset
    if available < expected:
        raise PlyError(
            f"truncated body: vertex data needs {expected} bytes from byte offset {offset}, "
            f"only {max(available, 0)} present"
        )
    return np.frombuffer(data, dtype=dtype, count=vertex.count, offset=offset)


def _read_ascii(data: bytes, header: _Header, vertex: _Element) -> np.ndarray:
    body = data[header.body_offset:]
    try:
        text = body.decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyError(f"byte offset {header.body_offset + exc.start}: non-ASCII byte in body") from None
    lines = text.splitlines()
    header_lines = data[: header.body_offset].count(b"\n")
    cursor = 0

    def next_line() -> Tuple[int, list]:
        nonlocal cursor
        while cursor < len(lines) and not lines[cursor].strip():
            cursor += 1
        if cursor >= len(lines):
            raise PlyError(f"truncated body: ran out of lines after line {header_lines + cursor}")
        cursor += 1
        return header_lines + cursor, lines[cursor - 1].split()

    for element in header.elements:
        if element is vertex:
            break
        for _ in range(element.count):
            next_line()

    if any(p.count_dtype is not None for p in vertex.properties):
        raise PlyError(f"line {vertex.line}: list properties on vertex are not supported")
    dtype = _element_dtype(vertex)
    out = np.zeros(vertex.count, dtype=dtype)
    nprops = len(vertex.properties)
    for i in range(vertex.count):
        lineno, tokens = next_line()
        if len(tokens) != nprops:
            raise PlyError(f"line {lineno}: expected {nprops} values, found {len(tokens)}")
        for p, tok in zip(vertex.properties, tokens):
            try:
                if p.dtype[0] == "f":
                    out[p.name][i] = float(tok)
                else:
                    value = int(tok)
                    info = np.iinfo(p.dtype)
                    if not info.min <= value <= info.max:
                        raise ValueError
                    out[p.name][i] = value
            except ValueError:
                raise PlyError(f"line {lineno}: bad value {tok!r} for property {p.name!r}") from None
    return out


def parse_ply(data: bytes) -> PointCloud:
    """Parse a PLY byte string into a :class:`PointCloud`.

    Errors are raised as :class:`PlyError` naming the offending header line or
    byte offset; no partial cloud is ever returned.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise TypeError("parse_ply expects bytes")
    data = bytes(data)
    header = _parse_header(data)
    vertex = _vertex_layout(header)
    if header.fmt == "ascii":
        rec = _read_ascii(data, header, vertex)
    else:
        rec = _read_binary(data, header, vertex)

    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    names = rec.dtype.names
    colors = None
    if "red" in names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    grid = None
    if header.grid:
        if set(header.grid) != {"width", "height"}:
            raise PlyError(f"header gives only {sorted(header.grid)} of the grid dimensions")
        grid = (header.grid["width"], header.grid["height"])
        if grid[0] <= 0 or grid[1] <= 0 or grid[0] * grid[1] != vertex.count:
            raise PlyError(f"grid {grid[0]}x{grid[1]} does not match vertex count {vertex.count}")
    precision = "float" if rec.dtype["x"].itemsize == 4 else "double"
    return PointCloud(points, colors, grid, precision)


def _format_float(value: float, precision: str) -> str:
    if precision == "float":
        return repr(float(np.float32(value))) if np.isfinite(value) else str(np.float32(value))
    return repr(float(value))


def write_ply(cloud: PointCloud, fmt: str = "binary_little_endian") -> bytes:
    """Serialize a cloud; float32 clouds round-trip bit-exactly through :func:`parse_ply`."""
    if fmt not in _FORMATS:
        raise ValueError(f"format must be one of {_FORMATS}, not {fmt!r}")
    if len(cloud) == 0:
        raise ValueError("cannot write an empty cloud")
    ftype = cloud.precision
    lines = ["ply", f"format {fmt} 1.0"]
    if cloud.grid is not None:
        lines += [f"obj_info width {cloud.grid[0]}", f"obj_info height {cloud.grid[1]}"]
    lines.append(f"element vertex {len(cloud)}")
    lines += [f"property {ftype} {axis}" for axis in "xyz"]
    if cloud.colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    lines.append("end_header")
    head = ("\n".join(lines) + "\n").encode("ascii")

    if fmt == "binary_little_endian":
        ft = "<f4" if ftype == "float" else "<f8"
        fields = [("x", ft), ("y", ft), ("z", ft)]
        if cloud.colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.empty(len(cloud), dtype=fields)
        for k, axis in enumerate("xyz"):
            rec[axis] = cloud.points[:, k]
        if cloud.colors is not None:
            for k, c in enumerate(("red", "green", "blue")):
                rec[c] = cloud.colors[:, k]
        return head + rec.tobytes()

    rows = []
    for i, p in enumerate(cloud.points):
        row = " ".join(_format_float(v, ftype) for v in p)
        if cloud.colors is not None:
            row += " " + " ".join(str(int(c)) for c in cloud.colors[i])
        rows.append(row)
    return head + ("\n".join(rows) + "\n").encode("ascii")


def read_ply(path: PathLike) -> PointCloud:
    return parse_ply(Path(path).read_bytes())


# --------------------------------------------------------------------------
# PGM masks


def _pgm_tokens(data: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise MaskError(f"PGM header ends early at byte offset {pos}")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    return tokens, pos


def parse_mask(data: bytes, leaf_id: str = "") -> LeafMask:
    """Parse a P2 or P5 PGM; pixels with value > 0 belong to the leaf."""
    data = bytes(data)
    if len(data) < 2 or data[:2] not in (b"P2", b"P5"):
        raise MaskError("byte offset 0: not a P2/P5 PGM image")
    binary = data[:2] == b"P5"
    tokens, pos = _pgm_tokens(data[2:], 3)
    values = []
    for tok, off in tokens:
        try:
            values.append(int(tok))
        except ValueError:
            raise MaskError(f"byte offset {off + 2}: bad header value {tok!r}") from None
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise MaskError(f"invalid PGM dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise MaskError(f"PGM maxval {maxval} outside 1..255")
    pos += 2
    npix = width * height
    if binary:
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise MaskError(f"byte offset {pos}: missing whitespace after maxval")
        pos += 1
        if len(data) - pos < npix:
            raise MaskError(f"truncated P5 raster: expected {npix} bytes at offset {pos}, got {len(data) - pos}")
        pix = np.frombuffer(data, np.uint8, npix, pos)
    else:
        fields = re.sub(rb"#[^\r\n]*", b"", data[pos:]).split()
        if len(fields) < npix:
            raise MaskError(f"truncated P2 raster: expected {npix} values, got {len(fields)}")
        try:
            pix = np.array([int(f) for f in fields[:npix]], dtype=np.int64)
        except ValueError:
            raise MaskError("non-integer value in P2 raster") from None
    if np.any(pix > maxval) or np.any(pix < 0):
        raise MaskError(f"raster value exceeds maxval {maxval}")
    return LeafMask(pix.reshape(height, width) > 0, leaf_id)


def write_mask(mask: LeafMask, binary: bool = True) -> bytes:
    """Encode a mask as PGM with maxval 255 (leaf = 255)."""
    raster = mask.array.astype(np.uint8) * 255
    if binary:
        return f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii") + raster.tobytes()
    rows = "\n".join(" ".join(str(v) for v in row) for row in raster)
    return f"P2\n{mask.width} {mask.height}\n255\n{rows}\n".encode("ascii")


def read_mask(path: PathLike, leaf_id: str = "") -> LeafMask:
    return parse_mask(Path(path).read_bytes(), leaf_id)


# --------------------------------------------------------------------------
# mask -> cloud


def extract_leaf_points(cloud: PointCloud, mask: LeafMask) -> PointCloud:
    """Valid cloud points under the mask, in row-major pixel order."""
    if cloud.grid is None:
        raise GridError("cloud is not organized (no width/height grid metadata)")
    if cloud.grid != (mask.width, mask.height):
        raise GridError(
            f"cloud grid {cloud.grid[0]}x{cloud.grid[1]} does not match "
            f"mask {mask.width}x{mask.height}"
        )
    idx = np.flatnonzero(mask.array)
    idx = idx[cloud.validity[idx]]
    if len(idx) < 3:
        raise TooFewPointsError(
            f"leaf {mask.leaf_id!r}: only {len(idx)} valid points under {len(mask)} mask pixels"
        )
    colors = cloud.colors[idx] if cloud.colors is not None else None
    return PointCloud(cloud.points[idx], colors, None, cloud.precision)


# --------------------------------------------------------------------------
# scan manifest


@dataclass(frozen=True)
class MaskEntry:
    leaf_id: str
    path: Path


@dataclass(frozen=True)
class ScanManifest:
    cloud: Path
    masks: Tuple[MaskEntry, ...]
    scan_id: str
    date: str

    def to_json(self, base: Optional[PathLike] = None) -> str:
        def rel(p: Path) -> str:
            if base is not None:
                try:
                    return Path(p).relative_to(base).as_posix()
                except ValueError:
                    pass
            return Path(p).as_posix()

        doc = {
            "cloud": rel(self.cloud),
            "masks": [{"leaf_id": m.leaf_id, "path": rel(m.path)} for m in self.masks],
            "scan_id": self.scan_id,
            "date": self.date,
        }
        return json.dumps(doc, indent=2) + "\n"


def parse_manifest(doc: dict, base: Optional[PathLike] = None) -> ScanManifest:
    """Validate a manifest dict; relative paths resolve against ``base``."""
    from datetime import date, datetime

    base = Path(base) if base is not None else Path(".")
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    for key, kind in (("cloud", str), ("masks", list), ("scan_id", str), ("date", str)):
        if key not in doc:
            raise ManifestError(f"manifest lacks {key!r}")
        if not isinstance(doc[key], kind):
            raise ManifestError(f"manifest field {key!r} must be {kind.__name__}")
    try:
        datetime.fromisoformat(doc["date"])
    except ValueError:
        try:
            date.fromisoformat(doc["date"])
        except ValueError:
            raise ManifestError(f"date {doc['date']!r} is not ISO-8601") from None
    entries = []
    seen = set()
    for i, m in enumerate(doc["masks"]):
        if not isinstance(m, dict) or not isinstance(m.get("leaf_id"), str) or not isinstance(m.get("path"), str):
            raise ManifestError(f"masks[{i}] must have string 'leaf_id' and 'path'")
        if m["leaf_id"] in seen:
            raise ManifestError(f"duplicate leaf_id {m['leaf_id']!r}")
        seen.add(m["leaf_id"])
        entries.append(MaskEntry(m["leaf_id"], base / m["path"]))
    return ScanManifest(base / doc["cloud"], tuple(entries), doc["scan_id"], doc["date"])


def load_manifest(path: PathLike) -> ScanManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    return parse_manifest(doc, path.parent)


def as_points(points: Union[PointCloud, np.ndarray, Sequence]) -> np.ndarray:
    """(N, 3) float64 view of a cloud or array-like."""
    if isinstance(points, PointCloud):
        return points.points
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr
