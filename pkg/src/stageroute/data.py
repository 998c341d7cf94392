"""Dataset generation and file formats.

Synthetic segmentation data: grayscale images of randomly placed disks,
rectangles, and rings on a noisy background, one class per shape kind.
Later shapes occlude earlier ones. The three kinds have deliberately
different boundary statistics (compact, straight-edged, thin) so that
spatial detail matters for segmenting them.

File formats owned here: binary PGM (P5) for images and label masks, a
little-endian binary checkpoint, and the fixed-schema metrics CSV.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, DataError, PGMParseError

# base intensities: background, then one shared value for every shape class.
# Classes are told apart by shape alone, so labeling needs spatial context
# while boundary placement needs full resolution.
CLASS_INTENSITIES = (0.25, 0.85, 0.85, 0.85)


@dataclass
class SyntheticSpec:
    count: int = 200
    size: int = 64
    num_classes: int = 4
    shapes_min: int = 1
    shapes_max: int = 3
    noise_std: float = 0.08
    seed: int = 1234

    def validate(self):
        if self.count < 1 or self.size < 8:
            raise ConfigError("synthetic spec needs count >= 1 and size >= 8")
        if not 2 <= self.num_classes <= 4:
            raise ConfigError("synthetic data supports 2 to 4 classes")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigError("need 1 <= shapes_min <= shapes_max")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


@dataclass
class Dataset:
    images: list            # each [1, H, W] float64 in [0, 1]
    masks: list             # each [H, W] int64 class labels
    splits: dict            # name -> list of indices, 8:1:1
    num_classes: int
    provenance: str = "synthetic"

    def __len__(self):
        return len(self.images)


def _split_indices(n, seed):
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


def _paint_shape(mask, cls, rng, size):
    """Draw one shape of the class kind onto the mask; occludes prior labels."""
    yy, xx = np.mgrid[0:size, 0:size]
    kind = (cls - 1) % 3
    # ranges are calibrated for 64x64 and shrink proportionally for smaller
    # canvases; every upper bound stays below the placement limit
    limit = (size - 1) / 2 - 0.1

    def span(lo64, hi64, floor):
        lo = min(max(floor, lo64 * size / 64.0), limit - 0.1)
        hi = min(max(lo + 0.2, hi64 * size / 64.0), limit)
        return lo, hi

    for _ in range(20):
        if kind == 0:  # disk
            r = rng.uniform(*span(3.0, 6.5, 1.2))
            cy = rng.uniform(r, size - 1 - r)
            cx = rng.uniform(r, size - 1 - r)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:  # rectangle
            lo, hi = span(2.0, 6.5, 1.0)
            hh = rng.uniform(lo, hi)
            hw = rng.uniform(lo, hi)
            cy = rng.uniform(hh, size - 1 - hh)
            cx = rng.uniform(hw, size - 1 - hw)
            region = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:  # ring
            r_out = rng.uniform(*span(5.5, 10.0, 2.2))
            thickness = rng.uniform(min(1.8, r_out / 2), min(2.8, r_out - 0.2))
            cy = rng.uniform(r_out, size - 1 - r_out)
            cx = rng.uniform(r_out, size - 1 - r_out)
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            region = (d2 <= r_out * r_out) & (d2 >= (r_out - thickness) ** 2)
        if region.sum() >= 4:
            mask[region] = cls
            return
    raise DataError(f"could not place a non-degenerate shape of class {cls}")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Seeded synthetic dataset; identical spec gives a bit-identical result.

    Every foreground class must appear in at least 5% of samples; the
    generator retries with derived sub-seeds a bounded number of times and
    raises DataError if coverage cannot be met.
    """
    spec.validate()
    for attempt in range(5):
        rng = np.random.default_rng([spec.seed, 11, attempt])
        images, masks = [], []
        for _ in range(spec.count):
            mask = np.zeros((spec.size, spec.size), dtype=np.int64)
            n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
            for _ in range(n_shapes):
                cls = int(rng.integers(1, spec.num_classes))
                _paint_shape(mask, cls, rng, spec.size)
            image = np.take(np.asarray(CLASS_INTENSITIES[:spec.num_classes]), mask)
            if spec.noise_std > 0:
                image = image + spec.noise_std * rng.standard_normal(mask.shape)
                image = np.clip(image, 0.0, 1.0)
            images.append(image[None, :, :].astype(np.float64))
            masks.append(mask)
        present = np.zeros(spec.num_classes, dtype=np.int64)
        for mask in masks:
            for c in range(1, spec.num_classes):
                present[c] += bool((mask == c).any())
        if all(present[c] >= 0.05 * spec.count for c in range(1, spec.num_classes)):
            return Dataset(images=images, masks=masks,
                           splits=_split_indices(spec.count, spec.seed),
                           num_classes=spec.num_classes, provenance="synthetic")
    raise DataError("class coverage below 5% of samples after bounded retries")


def load_directory(path, num_classes, seed):
    """Load paired images/<name>.pgm and masks/<name>.pgm into a Dataset.

    Image bytes are scaled to [0, 1]; mask pixel values are class ids.
    """
    img_dir = os.path.join(path, "images")
    mask_dir = os.path.join(path, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise DataError(f"data directory {path} needs images/ and masks/ subdirectories")
    names = sorted(n for n in os.listdir(img_dir) if n.endswith(".pgm"))
    if not names:
        raise DataError(f"no .pgm files under {img_dir}")
    images, masks = [], []
    for name in names:
        mask_path = os.path.join(mask_dir, name)
        if not os.path.isfile(mask_path):
            raise DataError(f"missing mask for {name}")
        img = load_pgm(os.path.join(img_dir, name)).astype(np.float64) / 255.0
        mask = load_pgm(mask_path).astype(np.int64)
        if mask.max(initial=0) >= num_classes:
            raise DataError(f"mask {name} has label {mask.max()} >= {num_classes}")
        images.append(img[None, :, :])
        masks.append(mask)
    return Dataset(images=images, masks=masks,
                   splits=_split_indices(len(images), seed),
                   num_classes=num_classes, provenance=path)


# ------------------------------------------------------------------ PGM I/O

def load_pgm(path):
    """Parse a binary (P5) PGM file with maxval <= 255 into a uint8 array.

    Tolerates '#' comment lines and arbitrary whitespace between header
    tokens; parse errors carry the byte offset of the problem.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def skip_separators(p):
        while p < len(blob):
            ch = blob[p:p + 1]
            if ch in b" \t\r\n":
                p += 1
            elif ch == b"#":
                while p < len(blob) and blob[p:p + 1] not in b"\r\n":
                    p += 1
            else:
                break
        return p

    def read_token(p):
        p = skip_separators(p)
        start = p
        while p < len(blob) and blob[p:p + 1] not in b" \t\r\n#":
            p += 1
        if start == p:
            raise PGMParseError("unexpected end of header", offset=start)
        return blob[start:p], p

    magic, pos = read_token(pos)
    if magic != b"P5":
        raise PGMParseError(f"bad magic {magic!r}, expected b'P5'", offset=0)
    fields = []
    for name in ("width", "height", "maxval"):
        token, new_pos = read_token(pos)
        try:
            value = int(token)
        except ValueError:
            raise PGMParseError(f"non-numeric {name} token {token!r}", offset=pos) from None
        if value <= 0:
            raise PGMParseError(f"{name} must be positive, got {value}", offset=pos)
        fields.append(value)
        pos = new_pos
    width, height, maxval = fields
    if maxval > 255:
        raise PGMParseError(f"maxval {maxval} > 255 unsupported", offset=pos)
    if pos >= len(blob) or blob[pos:pos + 1] not in b" \t\r\n":
        raise PGMParseError("expected single whitespace after maxval", offset=pos)
    pos += 1
    expected = width * height
    payload = blob[pos:pos + expected]
    if len(payload) != expected:
        raise PGMParseError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}",
            offset=pos)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def save_pgm(array, path):
    """Write a 2-d array of integers in [0, 255] as binary PGM (maxval 255)."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DataError(f"save_pgm needs a 2-d array, got shape {arr.shape}")
    rounded = np.rint(arr)
    if not np.array_equal(rounded, arr) and not np.issubdtype(arr.dtype, np.integer):
        if np.abs(rounded - arr).max() > 1e-9:
            raise DataError("save_pgm values must be integers")
    if rounded.min() < 0 or rounded.max() > 255:
        raise DataError(
            f"save_pgm values must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
    data = rounded.astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + data.tobytes())
    os.replace(tmp, path)


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SEGCKPT\x00"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_CODE_DTYPES = {0: "<f8", 1: "<f4"}


def _pack_u32(v):
    return int(v).to_bytes(4, "little")


def _pack_u64(v):
    return int(v).to_bytes(8, "little")


def save_checkpoint(path, config_text, params, optimizer=None):
    """Atomically write named parameter blobs plus the config echo.

    ``params`` is an ordered name -> ndarray map; ``optimizer`` optionally
    carries {"step": int, "m": {...}, "v": {...}} with buffers shaped like
    their parameters.
    """
    chunks = [CKPT_MAGIC, _pack_u32(CKPT_VERSION)]
    cfg_bytes = config_text.encode("utf-8")
    chunks.append(_pack_u32(len(cfg_bytes)))
    chunks.append(cfg_bytes)
    chunks.append(_pack_u32(len(params)))
    order = list(params)
    for name in order:
        arr = np.asarray(params[name])
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        name_bytes = name.encode("utf-8")
        chunks.append(_pack_u32(len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(bytes([code, arr.ndim]))
        for dim in arr.shape:
            chunks.append(_pack_u32(dim))
        chunks.append(arr.astype(_CODE_DTYPES[code], copy=False).tobytes())
    if optimizer is None:
        chunks.append(b"\x00")
    else:
        chunks.append(b"\x01")
        chunks.append(_pack_u64(optimizer["step"]))
        for name in order:
            arr = np.asarray(params[name])
            code = _DTYPE_CODES[np.dtype(arr.dtype)]
            for buf_name in ("m", "v"):
                buf = np.asarray(optimizer[buf_name][name])
                if buf.shape != arr.shape:
                    raise CheckpointError(
                        f"optimizer buffer {buf_name}[{name}] shape {buf.shape} "
                        f"!= parameter shape {arr.shape}")
                chunks.append(buf.astype(_CODE_DTYPES[code], copy=False).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return int.from_bytes(self.take(4, what), "little")

    def u64(self, what):
        return int.from_bytes(self.take(8, what), "little")


def load_checkpoint(path):
    """Read back (config_text, params, optimizer-or-None); validates fully
    before returning, so a corrupt file never yields a partial load."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    version = reader.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = reader.take(reader.u32("config length"), "config").decode("utf-8")
    n_params = reader.u32("parameter count")
    params = {}
    codes = {}
    for _ in range(n_params):
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        code, ndim = reader.take(2, "dtype/ndim")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = tuple(reader.u32("dim") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        itemsize = 8 if code == 0 else 4
        raw = reader.take(count * itemsize, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype=_CODE_DTYPES[code]).reshape(shape).copy()
        codes[name] = code
    flag = reader.take(1, "optimizer flag")[0]
    optimizer = None
    if flag == 1:
        optimizer = {"step": reader.u64("optimizer step"), "m": {}, "v": {}}
        for name in params:
            itemsize = 8 if codes[name] == 0 else 4
            count = params[name].size
            for buf_name in ("m", "v"):
                raw = reader.take(count * itemsize, f"{buf_name}[{name}]")
                optimizer[buf_name][name] = np.frombuffer(
                    raw, dtype=_CODE_DTYPES[codes[name]]).reshape(params[name].shape).copy()
    elif flag != 0:
        raise CheckpointError(f"bad optimizer flag {flag}")
    if reader.pos != len(reader.blob):
        raise CheckpointError(
            f"{len(reader.blob) - reader.pos} trailing bytes after checkpoint payload")
    return config_text, params, optimizer


# --------------------------------------------------------------- metric CSV

CSV_COLUMNS = ("run_id", "seed", "routing", "position", "init",
               "epoch", "split", "metric", "class", "value")


def format_metric_row(run_id, seed, routing, position, init, epoch, split,
                      metric, cls, value):
    return (str(run_id), str(seed), str(routing), str(position), str(init),
            str(epoch), str(split), str(metric), str(cls), f"{float(value):.6f}")


def write_metrics_csv(rows, path):
    """Write rows in insertion order with a fixed header; values already
    carry 6 decimal places via format_metric_row."""
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"metric row has {len(row)} fields, expected {len(CSV_COLUMNS)}")
        lines.append(",".join(str(v) for v in row))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
