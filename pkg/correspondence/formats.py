"""
On-disk formats: Middlebury .flo flows, PFM float maps, PPM/PNG images,
match lists, metric reports, sparsification curves and key=value configs.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .exceptions import FormatError
from .geometry import FlowField

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
FLO_INVALID = 1e10
FLO_INVALID_THRESHOLD = 1e9

MATCH_HEADER = ['xr', 'yr', 'xq', 'yq', 'confidence']
CURVE_HEADER = ['fraction', 'value']
KEYPOINT_HEADER = ['x', 'y']


def write_flo(path, flow: FlowField):
    """Write a Middlebury .flo file; invalid pixels are stored as 1e10"""
    vectors = np.where(flow.valid[..., None], flow.vectors, FLO_INVALID).astype('<f4')
    with open(path, 'wb') as f:
        f.write(np.array([FLO_MAGIC], dtype='<f4').tobytes())
        f.write(np.array([flow.width, flow.height], dtype='<i4').tobytes())
        f.write(vectors.tobytes())


def read_flo(path) -> FlowField:
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic = np.frombuffer(data[:4], dtype='<f4')[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic}")
    width, height = (int(v) for v in np.frombuffer(data[4:12], dtype='<i4'))
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid .flo size {width}x{height}")
    expected = 12 + width * height * 2 * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    vectors = np.frombuffer(data[12:], dtype='<f4').reshape(height, width, 2).astype(np.float64)
    valid = np.isfinite(vectors).all(axis=-1) & (np.abs(vectors) <= FLO_INVALID_THRESHOLD).all(axis=-1)
    return FlowField(vectors, valid)


def write_pfm(path, grid: np.ndarray):
    """Single-channel little-endian PFM; rows are stored bottom to top"""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise FormatError(f"PFM maps must be 2-D, got shape {grid.shape}")
    height, width = grid.shape
    with open(path, 'wb') as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode('ascii'))
        f.write(np.flipud(grid).astype('<f4').tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, 'rb') as f:
        tag = f.readline().decode('ascii', errors='replace').strip()
        if tag == 'Pf':
            channels = 1
        elif tag == 'PF':
            channels = 3
        else:
            raise FormatError(f"{path}: not a PFM file (tag {tag!r})")
        try:
            width, height = (int(v) for v in f.readline().decode('ascii').split())
            scale = float(f.readline().decode('ascii').strip())
        except ValueError as e:
            raise FormatError(f"{path}: malformed PFM header ({e})")
        dtype = '<f4' if scale < 0 else '>f4'
        buf = f.read()
    count = width * height * channels
    if len(buf) != count * 4:
        raise FormatError(f"{path}: expected {count * 4} data bytes, found {len(buf)}")
    grid = np.frombuffer(buf, dtype=dtype).reshape(height, width, channels)
    grid = np.flipud(grid).astype(np.float64)
    return grid[..., 0] if channels == 1 else grid


def write_image(path, image: np.ndarray):
    """Save an [0,1] RGB image as 8-bit binary PPM (or PNG by suffix)"""
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    fmt = 'PNG' if Path(path).suffix.lower() == '.png' else 'PPM'
    Image.fromarray(pixels).save(path, format=fmt)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.float64)
    except (OSError, SyntaxError) as e:
        raise FormatError(f"{path}: unreadable image ({e})")
    return pixels / 255.0


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round-trip through the 8-bit representation used on disk"""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255) / 255.0


def write_matches(path, ref_points: np.ndarray, query_points: np.ndarray, confidence: np.ndarray):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(MATCH_HEADER)
        for (xr, yr), (xq, yq), c in zip(ref_points, query_points, confidence):
            writer.writerow([_fmt(xr), _fmt(yr), _fmt(xq), _fmt(yq), _fmt(c)])


def read_matches(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MATCH_HEADER:
            raise FormatError(f"{path}: expected header {','.join(MATCH_HEADER)}")
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as e:
            raise FormatError(f"{path}: non-numeric match entry ({e})")
    data = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return data[:, 0:2], data[:, 2:4], data[:, 4]


def read_keypoints(path) -> np.ndarray:
    """Keypoints as an (N, 2) array from a CSV with an ``x,y`` header"""
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != KEYPOINT_HEADER:
            raise FormatError(f"{path}: expected header {','.join(KEYPOINT_HEADER)}")
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as e:
            raise FormatError(f"{path}: non-numeric keypoint entry ({e})")
    if any(len(row) != 2 for row in rows):
        raise FormatError(f"{path}: keypoint rows need exactly two values")
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def write_metrics_csv(path, rows: Sequence[Dict], fieldnames: List[str]):
    """One row per pair plus whatever aggregate rows the caller appends"""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})


def write_curve_csv(path, fractions: Iterable[float], values: Iterable[float]):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_HEADER)
        for fraction, value in zip(fractions, values):
            writer.writerow([_fmt(fraction), _fmt(value)])


def read_key_value_config(path) -> Dict[str, str]:
    """Parse UTF-8 ``key=value`` lines; ``#`` starts a comment"""
    values = {}
    with open(path, encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split('=', 1)
            key = key.strip()
            if not key:
                raise FormatError(f"{path}:{lineno}: empty key")
            values[key] = value.strip()
    return values


def write_manifest(path, manifest: Dict):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')


def read_manifest(path) -> Dict:
    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid manifest ({e})")


def _fmt(value) -> str:
    return format(float(value), '.10g')
