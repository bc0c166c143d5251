# /modules/tcd_forecast/sequence_io.py
# PSEQ1 container:
#   b"PSEQ1\n" | uint32 LE header length | UTF-8 JSON header
#   | frames*joints*3 float32 LE, [frame][joint][xyz] | optional frames*joints*3 mask bytes
# The CSV variant keeps the same header on a "#" line followed by one frame per row.

import os
import json
import struct
import logging

import numpy as np

from . import config as CFG
from .errors import (SequenceIOError, UnrecognizedFormatError, TruncatedPayloadError,
                     HeaderMismatchError, StructuralError, ParameterError)
from .sequence_core import PoseSequence, AvailabilityMask, SkeletonSpec, ROLE_FULL

logger = logging.getLogger('tcd_system.io')

_LENGTH = struct.Struct('<I')
_CSV_PREFIX = "# PSEQ1-CSV "


def _build_header(X: PoseSequence, mask):
    skeleton = X.skeleton.to_header() if X.skeleton is not None else {
        "joint_names": None, "limb_groups": None, "parent_index": None}
    return {
        "frames": X.frames,
        "joints": X.joints,
        "fps": X.fps,
        "observation_len": X.observation_len if mask is None else mask.observation_len,
        "role_tag": X.role_tag,
        **skeleton,
        "has_mask": mask is not None,
    }


def _check_pair(X, mask):
    if mask is not None and mask.bits.shape != X.coords.shape:
        raise StructuralError(f"Mask shape {mask.bits.shape} does not match sequence {X.coords.shape}")


def _parse_header(raw, path):
    try:
        header = json.loads(raw)
    except (UnicodeDecodeError, ValueError) as e:
        raise UnrecognizedFormatError(f"Header is not valid JSON: {e}", path=path)
    if not isinstance(header, dict):
        raise HeaderMismatchError(f"Header must be a JSON object, got {type(header).__name__}", path=path)
    required = ("frames", "joints", "fps", "observation_len", "has_mask")
    missing = [k for k in required if k not in header]
    if missing:
        raise HeaderMismatchError(f"Header lacks fields {missing}", path=path)

    def is_int(value):
        return isinstance(value, int) and not isinstance(value, bool)

    for key in ("frames", "joints"):
        if not is_int(header[key]) or header[key] <= 0:
            raise HeaderMismatchError(f"Header field '{key}' must be a positive integer, got {header[key]!r}",
                                      path=path)
    O = header["observation_len"]
    if O is not None and (not is_int(O) or not 0 <= O <= header["frames"]):
        raise HeaderMismatchError(f"Header field 'observation_len' must be an integer in 0..{header['frames']}, "
                                  f"got {O!r}", path=path)
    fps = header["fps"]
    if isinstance(fps, bool) or not isinstance(fps, (int, float)) or not fps > 0:
        raise HeaderMismatchError(f"Header field 'fps' must be a positive number, got {fps!r}", path=path)
    if not isinstance(header["has_mask"], bool):
        raise HeaderMismatchError(f"Header field 'has_mask' must be a boolean, got {header['has_mask']!r}",
                                  path=path)
    names = header.get("joint_names")
    if names is not None and not isinstance(names, list):
        raise HeaderMismatchError("Header field 'joint_names' must be a list", path=path)
    if names is not None and len(names) != header["joints"]:
        raise HeaderMismatchError(f"Header lists {len(names)} joint names for {header['joints']} joints", path=path)
    return header


def _assemble(header, coords, mask_bits, path):
    skeleton = None
    try:
        if header.get("joint_names") is not None:
            skeleton = SkeletonSpec.from_header(header)
        X = PoseSequence(coords, fps=header["fps"], role_tag=header.get("role_tag", ROLE_FULL),
                         observation_len=header["observation_len"], skeleton=skeleton)
        mask = AvailabilityMask(mask_bits, header["observation_len"]) if mask_bits is not None else None
    except (StructuralError, ParameterError) as e:
        raise HeaderMismatchError(e.message, path=path)
    except (TypeError, ValueError, KeyError, IndexError) as e:
        raise HeaderMismatchError(f"Malformed skeleton fields: {e}", path=path)
    return X, mask


# --- BINARY ---

def write_sequence(path, X: PoseSequence, mask: AvailabilityMask = None):
    """Writes PSEQ1 (or the CSV variant when the path ends in .csv)."""
    _check_pair(X, mask)
    if str(path).lower().endswith(".csv"):
        return write_sequence_csv(path, X, mask)
    header = json.dumps(_build_header(X, mask), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(X.coords, dtype='<f4').tobytes()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CFG.PSEQ_MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        f.write(payload)
        if mask is not None:
            f.write(np.ascontiguousarray(mask.bits, dtype=np.uint8).tobytes())
    logger.debug(f"Wrote {X.frames}x{X.joints} sequence to {path}")
    return path


def read_sequence(path):
    """Returns (PoseSequence, AvailabilityMask or None)."""
    if str(path).lower().endswith(".csv"):
        return read_sequence_csv(path)
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise SequenceIOError(f"Cannot read sequence file: {e.strerror}", path=path)

    magic = CFG.PSEQ_MAGIC
    if not blob.startswith(magic):
        raise UnrecognizedFormatError("Bad magic bytes; not a PSEQ1 file", path=path)
    cursor = len(magic)
    if len(blob) < cursor + _LENGTH.size:
        raise TruncatedPayloadError("File ends before the header length", path=path)
    (header_len,) = _LENGTH.unpack_from(blob, cursor)
    cursor += _LENGTH.size
    if len(blob) < cursor + header_len:
        raise TruncatedPayloadError("File ends inside the header", path=path)
    header = _parse_header(blob[cursor:cursor + header_len], path)
    cursor += header_len

    shape = (header["frames"], header["joints"], 3)
    count = shape[0] * shape[1] * 3
    expected = count * 4 + (count if header["has_mask"] else 0)
    available = len(blob) - cursor
    if available < expected:
        raise TruncatedPayloadError(
            f"Header declares {shape[0]}x{shape[1]} frames/joints ({expected} bytes) but payload has {available}",
            path=path)
    if available > expected:
        raise HeaderMismatchError(f"{available - expected} trailing bytes after the declared payload", path=path)

    coords = np.frombuffer(blob, dtype='<f4', count=count, offset=cursor).reshape(shape).astype(np.float64)
    mask_bits = None
    if header["has_mask"]:
        mask_bits = np.frombuffer(blob, dtype=np.uint8, count=count, offset=cursor + count * 4).reshape(shape)
    return _assemble(header, coords, mask_bits, path)


# --- CSV VARIANT ---

def write_sequence_csv(path, X: PoseSequence, mask: AvailabilityMask = None):
    _check_pair(X, mask)
    header = json.dumps(_build_header(X, mask), sort_keys=True)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(_CSV_PREFIX + header + "\n")
        for frame in X.coords.reshape(X.frames, -1):
            f.write(",".join(repr(float(v)) for v in frame) + "\n")
        if mask is not None:
            for frame in mask.bits.reshape(mask.frames, -1):
                f.write(",".join(str(int(v)) for v in frame) + "\n")
    return path


def read_sequence_csv(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = [line.rstrip("\n") for line in f if line.strip()]
    except (OSError, UnicodeDecodeError) as e:
        raise SequenceIOError(f"Cannot read CSV sequence: {e}", path=path)
    if not lines or not lines[0].startswith(_CSV_PREFIX):
        raise UnrecognizedFormatError("Missing PSEQ1-CSV header line", path=path)
    header = _parse_header(lines[0][len(_CSV_PREFIX):], path)
    frames, joints = header["frames"], header["joints"]
    rows = lines[1:]
    expected = frames * (2 if header["has_mask"] else 1)
    if len(rows) < expected:
        raise TruncatedPayloadError(f"Expected {expected} rows, found {len(rows)}", path=path)
    if len(rows) > expected:
        raise HeaderMismatchError(f"{len(rows) - expected} rows beyond the declared frames", path=path)

    def parse(block, kind):
        try:
            values = np.array([[kind(v) for v in row.split(",")] for row in block])
        except ValueError as e:
            raise HeaderMismatchError(f"Unparseable CSV value: {e}", path=path)
        if values.ndim != 2 or values.shape[1] != joints * 3:
            raise TruncatedPayloadError(f"Rows must hold {joints * 3} values", path=path)
        return values.reshape(len(block), joints, 3)

    coords = parse(rows[:frames], float)
    mask_bits = parse(rows[frames:], int).astype(np.uint8) if header["has_mask"] else None
    return _assemble(header, coords, mask_bits, path)


# --- CORPUS DIRECTORIES ---

def list_corpus(directory):
    """Sorted PSEQ1 paths in a corpus directory."""
    if not os.path.isdir(directory):
        raise SequenceIOError("Corpus directory does not exist", path=directory)
    return sorted(os.path.join(directory, name) for name in os.listdir(directory)
                  if name.endswith(CFG.PSEQ_EXTENSION))


def read_corpus(directory):
    return [read_sequence(path) for path in list_corpus(directory)]
