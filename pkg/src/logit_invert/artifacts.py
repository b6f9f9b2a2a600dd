"""On-disk outputs: PNG grids, CSV tables and plain-text run manifests."""

import csv
import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image

GUTTER = 2


def to_bytes(tile):
    """Map [-1, 1] pixels to bytes with ``round((p + 1) * 127.5)``."""
    return np.clip(np.rint((np.asarray(tile, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def grid_pixels(tiles, rows, cols, gutter=GUTTER):
    """Compose tiles (H, W, C) row-major into one RGB byte array."""
    tiles = [np.asarray(t) for t in tiles]
    if len(tiles) != rows * cols or not tiles:
        raise ValueError(f"{rows}x{cols} grid needs {rows * cols} tiles, got {len(tiles)}")
    shapes = {t.shape for t in tiles}
    if len(shapes) != 1:
        raise ValueError(f"tiles have mixed geometry: {sorted(shapes)}")
    shape = tiles[0].shape
    if len(shape) == 2:
        shape = shape + (1,)
    h, w, c = shape
    if c not in (1, 3):
        raise ValueError(f"tiles must have 1 or 3 channels, got {c}")
    canvas = np.full((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter, 3), 255, np.uint8)
    for i, t in enumerate(tiles):
        r, col = divmod(i, cols)
        b = to_bytes(t.reshape(h, w, c))
        y, x = r * (h + gutter), col * (w + gutter)
        canvas[y : y + h, x : x + w] = b if c == 3 else np.repeat(b, 3, axis=-1)
    return canvas


def png_bytes(pixels):
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_grid(grid, path):
    """Write a :class:`GridArtifact` as an 8-bit RGB PNG with 2-pixel white gutters."""
    path = Path(path)
    path.write_bytes(png_bytes(grid_pixels(grid.tiles, grid.rows, grid.cols)))
    return path


def write_csv(path, header, rows):
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_captions(path, grid):
    keys = []
    for c in grid.captions:
        keys += [k for k in c if k not in keys]
    rows = [[i // grid.cols, i % grid.cols] + [c.get(k, "") for k in keys]
            for i, c in enumerate(grid.captions)]
    return write_csv(path, ["row", "col"] + keys, rows)


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_array(arr):
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256(str(arr.dtype).encode() + str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def write_manifest(path, blocks):
    """Write ``[block]`` sections of ``key = value`` lines.

    The ``config`` block uses the configuration file syntax, so it
    re-parses to the configuration that produced the run.
    """
    lines = ["# logit-invert run manifest"]
    for name, entries in blocks.items():
        lines.append(f"[{name}]")
        for key, value in entries.items():
            lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    blocks, current = {}, None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = blocks.setdefault(line[1:-1], {})
            continue
        if current is None:
            raise ValueError(f"{path}: entry outside a [block]: {line!r}")
        key, _, value = line.partition("=")
        current[key.strip()] = value.strip()
    return blocks
