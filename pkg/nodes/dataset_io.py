"""Raster and JSON persistence: PFM float maps, 16/8-bit PGM label rasters, JSON sidecars.

Every writer goes through a temporary file in the target directory followed by os.replace,
so readers never observe a half-written file.
"""
import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import SCENE_RECORD_FILES, SIDECAR_SUFFIX, VERSION
from errors import DataError

_PFM_HEADER = re.compile(rb'^(Pf|PF)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s')
_PGM_HEADER = re.compile(rb'^P5\s+(\d+)\s+(\d+)\s+(\d+)\s')


# =============================================================================
# Atomic writes and hashing
# =============================================================================

def atomic_write_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_json(path, document):
    atomic_write_bytes(path, (json.dumps(document, indent=2, sort_keys=True) + "\n").encode('utf-8'))


def read_json(path):
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


# =============================================================================
# PFM (little endian, bottom row first)
# =============================================================================

def encode_pfm(values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"PFM writer expects a 2D raster, got shape {values.shape}")
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode('ascii')
    return header + np.flipud(values).astype('<f4').tobytes()


def decode_pfm(payload, source='<bytes>'):
    match = _PFM_HEADER.match(payload)
    if not match:
        raise DataError(f"{source}: not a PFM file")
    if match.group(1) != b'Pf':
        raise DataError(f"{source}: colour PFM is not supported")
    width, height, scale = int(match.group(2)), int(match.group(3)), float(match.group(4))
    dtype = '<f4' if scale < 0 else '>f4'
    body = payload[match.end():]
    if len(body) != width * height * 4:
        raise DataError(f"{source}: expected {width * height * 4} data bytes, found {len(body)}")
    return np.flipud(np.frombuffer(body, dtype=dtype).reshape(height, width)).astype(np.float32)


def write_pfm(path, values, sidecar=None):
    atomic_write_bytes(path, encode_pfm(values))
    if sidecar is not None:
        write_sidecar(path, sidecar)


def read_pfm(path):
    with open(path, 'rb') as f:
        return decode_pfm(f.read(), source=path)


# =============================================================================
# PGM (binary, big endian when 16-bit)
# =============================================================================

def encode_pgm(values, maxval=65535):
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"PGM writer expects a 2D raster, got shape {values.shape}")
    if values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise DataError(f"PGM values must lie in [0, {maxval}]")
    height, width = values.shape
    dtype = '>u2' if maxval > 255 else 'u1'
    return f"P5\n{width} {height}\n{maxval}\n".encode('ascii') + values.astype(dtype).tobytes()


def decode_pgm(payload, source='<bytes>'):
    match = _PGM_HEADER.match(payload)
    if not match:
        raise DataError(f"{source}: not a binary PGM file")
    width, height, maxval = (int(v) for v in match.groups())
    dtype = '>u2' if maxval > 255 else 'u1'
    body = payload[match.end():]
    expected = width * height * np.dtype(dtype).itemsize
    if len(body) != expected:
        raise DataError(f"{source}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, values, maxval=65535, sidecar=None):
    atomic_write_bytes(path, encode_pgm(values, maxval))
    if sidecar is not None:
        write_sidecar(path, sidecar)


def read_pgm(path):
    with open(path, 'rb') as f:
        return decode_pgm(f.read(), source=path)


# =============================================================================
# Sidecars
# =============================================================================

def sidecar_path(path):
    return path + SIDECAR_SUFFIX


def write_sidecar(path, metadata):
    atomic_write_json(sidecar_path(path), {'version': VERSION, **metadata})


def read_sidecar(path):
    location = sidecar_path(path)
    return read_json(location) if os.path.exists(location) else None


# =============================================================================
# Scene records
# =============================================================================

@dataclass
class SceneRecord:
    depth: np.ndarray
    segmentation: np.ndarray
    quality: np.ndarray
    reachability: np.ndarray
    scene: dict
    intrinsics: Optional[dict] = None

    def __post_init__(self):
        shapes = {self.depth.shape, self.segmentation.shape, self.quality.shape, self.reachability.shape}
        if len(shapes) != 1:
            raise DataError(f"scene record rasters differ in shape: {sorted(shapes)}")
        for name in ('quality', 'reachability'):
            values = getattr(self, name)
            if values.size and (values.min() < 0 or values.max() > 1):
                raise DataError(f"{name} heatmap outside [0, 1]")


def write_scene_record(directory, record):
    """Write every raster of a record plus sidecars; returns {file name: sha256}."""
    os.makedirs(directory, exist_ok=True)
    files = SCENE_RECORD_FILES
    raster_meta = {'intrinsics': record.intrinsics}

    write_pfm(os.path.join(directory, files['depth']), record.depth,
              sidecar={**raster_meta, 'units': 'metres', 'invalid': 0.0})
    write_pgm(os.path.join(directory, files['segmentation']), record.segmentation,
              sidecar={**raster_meta, 'units': 'object id', 'background': 0})
    write_pfm(os.path.join(directory, files['quality']), record.quality,
              sidecar={**raster_meta, 'units': 'grasp quality', 'range': [0.0, 1.0]})
    write_pfm(os.path.join(directory, files['reachability']), record.reachability,
              sidecar={**raster_meta, 'units': 'reachability', 'range': [0.0, 1.0]})
    atomic_write_json(os.path.join(directory, files['scene']), record.scene)

    # Only what this call wrote; stale files in a reused directory stay out of the manifest
    written = [files[key] for key in ('depth', 'segmentation', 'quality', 'reachability')]
    written = written + [sidecar_path(name) for name in written] + [files['scene']]
    return {name: sha256_file(os.path.join(directory, name)) for name in sorted(written)}


def read_scene_record(directory):
    files = SCENE_RECORD_FILES
    depth_path = os.path.join(directory, files['depth'])
    sidecar = read_sidecar(depth_path) or {}
    return SceneRecord(depth=read_pfm(depth_path),
                       segmentation=read_pgm(os.path.join(directory, files['segmentation'])),
                       quality=read_pfm(os.path.join(directory, files['quality'])),
                       reachability=read_pfm(os.path.join(directory, files['reachability'])),
                       scene=read_json(os.path.join(directory, files['scene'])),
                       intrinsics=sidecar.get('intrinsics'))
