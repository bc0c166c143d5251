import json
import struct

import numpy as np
import pytest

from modules.tcd_forecast.errors import (HeaderMismatchError, SequenceIOError, TruncatedPayloadError,
                                         UnrecognizedFormatError)
from modules.tcd_forecast.sequence_core import OcclusionPattern, apply_mask, make_mask
from modules.tcd_forecast.sequence_io import list_corpus, read_corpus, read_sequence, write_sequence

from conftest import f32_exact, synthetic_corpus


@pytest.fixture
def masked_pair(skeleton):
    X = f32_exact(synthetic_corpus(1, 12, 8, seed=5)[0])
    mask = make_mask(OcclusionPattern("random_joint", prob=0.4), 8, 4, skeleton, 3)
    return f32_exact(apply_mask(X, mask, seed=2)), mask


def test_pseq_round_trip_is_bit_exact(tmp_path, masked_pair):
    X, mask = masked_pair
    path = write_sequence(tmp_path / "walk.pseq", X, mask)
    Y, mask_back = read_sequence(path)
    np.testing.assert_array_equal(Y.coords, X.coords)
    np.testing.assert_array_equal(mask_back.bits, mask.bits)
    assert Y.fps == X.fps
    assert Y.observation_len == 8
    assert Y.skeleton.joint_names == X.skeleton.joint_names
    assert Y.skeleton.parent_index == X.skeleton.parent_index


def test_pseq_without_mask(tmp_path, masked_pair):
    X, _ = masked_pair
    Y, mask = read_sequence(write_sequence(tmp_path / "plain.pseq", X))
    assert mask is None
    np.testing.assert_array_equal(Y.coords, X.coords)


def test_csv_variant_round_trip(tmp_path, masked_pair):
    X, mask = masked_pair
    Y, mask_back = read_sequence(write_sequence(tmp_path / "walk.csv", X, mask))
    np.testing.assert_array_equal(Y.coords, X.coords)
    np.testing.assert_array_equal(mask_back.bits, mask.bits)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.pseq"
    path.write_bytes(b"NOTPSEQ" + b"\x00" * 32)
    with pytest.raises(UnrecognizedFormatError):
        read_sequence(path)


def test_truncated_payload(tmp_path, masked_pair):
    X, mask = masked_pair
    path = write_sequence(tmp_path / "walk.pseq", X, mask)
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[:-10])
    with pytest.raises(TruncatedPayloadError):
        read_sequence(path)


def test_trailing_bytes_are_a_header_mismatch(tmp_path, masked_pair):
    X, _ = masked_pair
    path = write_sequence(tmp_path / "walk.pseq", X)
    with open(path, "ab") as f:
        f.write(b"\x00" * 4)
    with pytest.raises(HeaderMismatchError) as info:
        read_sequence(path)
    assert info.value.path == path


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(SequenceIOError) as info:
        read_sequence(tmp_path / "absent.pseq")
    assert "absent.pseq" in str(info.value.path)


def test_corpus_listing_is_sorted(tmp_path):
    corpus = [f32_exact(X) for X in synthetic_corpus(3, 6, 3)]
    for i in (2, 0, 1):
        write_sequence(tmp_path / f"seq_{i:05d}.pseq", corpus[i])
    (tmp_path / "notes.txt").write_text("ignored")
    paths = list_corpus(tmp_path)
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["seq_00000.pseq", "seq_00001.pseq", "seq_00002.pseq"]
    loaded = read_corpus(tmp_path)
    np.testing.assert_array_equal(loaded[1][0].coords, corpus[1].coords)
    with pytest.raises(SequenceIOError):
        list_corpus(tmp_path / "nowhere")


def _write_raw(path, header, payload=b""):
    raw = json.dumps(header).encode("utf-8")
    path.write_bytes(b"PSEQ1\n" + struct.pack("<I", len(raw)) + raw + payload)
    return path


GOOD_HEADER = {"frames": 2, "joints": 1, "fps": 25.0, "observation_len": 1, "has_mask": False}


@pytest.mark.parametrize("header, payload", [
    (dict(GOOD_HEADER, frames="abc"), b"\x00" * 24),
    (dict(GOOD_HEADER, frames=-2, joints=-1), b"\x00" * 24),
    (5, b""),
    (dict(GOOD_HEADER, has_mask="yes"), b"\x00" * 24),
    (dict(GOOD_HEADER, fps="fast"), b"\x00" * 24),
    (dict(GOOD_HEADER, observation_len=9), b"\x00" * 24),
    (dict(GOOD_HEADER, frames=True), b"\x00" * 12),
])
def test_malformed_headers_raise_header_mismatch(tmp_path, header, payload):
    path = _write_raw(tmp_path / "bad.pseq", header, payload)
    with pytest.raises(HeaderMismatchError) as info:
        read_sequence(path)
    assert info.value.path == path


def test_well_formed_raw_header_loads(tmp_path):
    path = _write_raw(tmp_path / "ok.pseq", GOOD_HEADER, np.arange(6, dtype="<f4").tobytes())
    X, mask = read_sequence(path)
    assert X.coords.shape == (2, 1, 3) and mask is None


def test_csv_header_is_checked_too(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# PSEQ1-CSV " + json.dumps(dict(GOOD_HEADER, joints="one")) + "\n0,0,0\n0,0,0\n")
    with pytest.raises(SequenceIOError) as info:
        read_sequence(path)
    assert isinstance(info.value, HeaderMismatchError)
