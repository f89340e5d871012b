"""Small on-disk formats: key-value config text, PGM images, binary field dumps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFormatError


def write_kv(path, entries):
    """Write a flat key-value text file (`key = value`, '#' comments allowed)."""
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = f"{value:.17g}"
        elif isinstance(value, (list, tuple, np.ndarray)):
            value = ",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path):
    """Parse a flat key-value text file into a dict of strings."""
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: line {lineno} is not 'key = value': {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def parse_float_list(text):
    return [float(tok) for tok in text.split(",") if tok.strip()]


def write_pgm(path, image):
    """Write a grayscale uint8 image as binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"expected 2-D uint8 image, got {image.dtype} {image.shape}")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.tobytes())


def read_pgm(path):
    """Read a binary PGM (P5) image into a uint8 array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataFormatError(f"{path}: not a binary PGM file", offset=0)
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}", offset=pos)
    data = np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise DataFormatError(f"{path}: truncated pixel data", offset=len(raw))
    return data.reshape(height, width).copy()


def write_image_grid(path, images, columns=8, pad=1):
    """Tile a stack of equal-size uint8 images into one PGM grid."""
    images = np.asarray(images)
    n, h, w = images.shape
    columns = min(columns, n)
    rows = (n + columns - 1) // columns
    grid = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = images[k]
    write_pgm(path, grid)


# Displacement-field dump: big-endian uint32 header (ny, nx, components, step)
# followed by row-major big-endian float64 values.
def write_field_dump(path, field, step):
    field = np.ascontiguousarray(field, dtype=">f8")
    ny, nx, comp = field.shape
    header = np.array([ny, nx, comp, step], dtype=">u4")
    Path(path).write_bytes(header.tobytes() + field.tobytes())


def read_field_dump(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header", offset=len(raw))
    ny, nx, comp, step = (int(v) for v in np.frombuffer(raw[:16], dtype=">u4"))
    expected = 16 + ny * nx * comp * 8
    if len(raw) < expected:
        raise DataFormatError(f"{path}: truncated payload", offset=len(raw))
    field = np.frombuffer(raw[16:expected], dtype=">f8").reshape(ny, nx, comp)
    return field.astype(np.float64), step
