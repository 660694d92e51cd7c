"""On-disk formats: TNSR tensors, CANW weights, PPM/PGM images,
homography text files and annotation JSON.

All binary payloads are little-endian 32-bit IEEE-754, row-major, so files
round-trip bit-exactly.
"""

import json

import numpy as np

from .errors import DataError, FormatError


# ---------------------------------------------------------------------------
# TNSR: "TNSR 1 <n> <c> <h> <w>\n" + float32 LE payload

def write_tnsr(path, array):
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[None, None]
    if array.ndim != 4:
        raise FormatError(f"TNSR stores rank-4 tensors, got shape {array.shape}")
    n, c, h, w = array.shape
    with open(path, "wb") as f:
        f.write(f"TNSR 1 {n} {c} {h} {w}\n".encode("ascii"))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tnsr(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 6 or parts[0] != "TNSR" or parts[1] != "1":
            raise FormatError(f"{path}: bad TNSR header {header!r}")
        try:
            n, c, h, w = (int(p) for p in parts[2:])
        except ValueError:
            raise FormatError(f"{path}: non-integer dims in header {header!r}")
        payload = f.read()
    expected = n * c * h * w * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# CANW: "CANW 1 <record_count>\n" then per record
#   "<name> <d0> <d1> <d2> <d3>\n" + float32 LE payload

def write_canw(path, records):
    """records: ordered mapping name -> rank-4 ndarray."""
    with open(path, "wb") as f:
        f.write(f"CANW 1 {len(records)}\n".encode("ascii"))
        for name, array in records.items():
            array = np.asarray(array)
            if array.ndim != 4:
                raise FormatError(f"record {name!r} is not rank-4: shape {array.shape}")
            if any(ch.isspace() for ch in name):
                raise FormatError(f"record name {name!r} contains whitespace")
            dims = " ".join(str(d) for d in array.shape)
            f.write(f"{name} {dims}\n".encode("ascii"))
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_canw(path):
    records = {}
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 3 or parts[0] != "CANW" or parts[1] != "1":
            raise FormatError(f"{path}: bad CANW header {header!r}")
        count = int(parts[2])
        for _ in range(count):
            line = f.readline().decode("ascii", errors="replace").strip()
            fields = line.split()
            if len(fields) != 5:
                raise FormatError(f"{path}: bad record header {line!r}")
            name = fields[0]
            try:
                dims = tuple(int(d) for d in fields[1:])
            except ValueError:
                raise FormatError(f"{path}: non-integer dims in record {line!r}")
            nbytes = int(np.prod(dims)) * 4
            payload = f.read(nbytes)
            if len(payload) != nbytes:
                raise FormatError(f"{path}: truncated payload for record {name!r}")
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return records


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5), maxval 255

def write_ppm(path, image):
    """image: (h, w, 3) float in [0,1] or uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs (h, w, 3), got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM needs (h, w), got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _read_pnm_tokens(f, count):
    """Read whitespace/comment-separated header tokens from a binary PNM."""
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise FormatError("unexpected end of PNM header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens


def read_pnm(path):
    """Read a binary PPM (P6) or PGM (P5). Returns float array in [0,1],
    shape (h, w, 3) for P6 and (h, w) for P5."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise FormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(f, 3))
        if maxval != 255:
            raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
        channels = 3 if magic == b"P6" else 1
        payload = f.read(h * w * channels)
        if len(payload) != h * w * channels:
            raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 3:
        return data.reshape(h, w, 3)
    return data.reshape(h, w)


# ---------------------------------------------------------------------------
# homography: 9 whitespace-separated decimals, row-major, ground(m)->image(px)

def write_homography(path, matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise FormatError(f"homography must be 3x3, got {matrix.shape}")
    with open(path, "w") as f:
        for row in matrix:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_homography(path):
    with open(path) as f:
        values = f.read().split()
    if len(values) != 9:
        raise FormatError(f"{path}: expected 9 values, got {len(values)}")
    try:
        matrix = np.array([float(v) for v in values], dtype=np.float64).reshape(3, 3)
    except ValueError:
        raise FormatError(f"{path}: non-numeric homography entry")
    return matrix


# ---------------------------------------------------------------------------
# annotations: {"w": int, "h": int, "points": [[x, y], ...]}

def write_annotations(path, points, image_dims):
    h, w = image_dims
    doc = {"w": int(w), "h": int(h),
           "points": [[float(x), float(y)] for x, y in points]}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def read_annotations(path):
    """Returns (points ndarray (k,2), (h, w))."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed annotation JSON: {e}")
    try:
        h, w = int(doc["h"]), int(doc["w"])
        points = np.array([[float(p[0]), float(p[1])] for p in doc["points"]],
                          dtype=np.float64).reshape(-1, 2)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise DataError(f"{path}: bad annotation structure: {e}")
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"{path}: point ({x}, {y}) outside image {w}x{h}")
    return points, (h, w)
