import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tasc.store import (ConsistencyError, DataError, EmbeddingMatrix,
                        FormatError, Manifest, build_similarity_cache,
                        l2_normalize, load_embeddings, manifest_path,
                        save_embeddings, stack_texts)

from conftest import unit_rows


def _save(tmp_path, data, role="noun_vocab", names=None, labels=None, count=None):
    m = EmbeddingMatrix(np.asarray(data, dtype=np.float32))
    names = [f"n{i}" for i in range(m.rows)] if names is None else names
    manifest = Manifest(role=role, names=names, labels=labels,
                        count=m.rows if count is None else count)
    path = tmp_path / "m.embx"
    save_embeddings(path, m, manifest)
    return path


def test_header_layout(tmp_path):
    path = _save(tmp_path, np.zeros((3, 4)))
    raw = path.read_bytes()
    assert raw[:4] == b"EMBX"
    version, rows, dims = struct.unpack("<IQQ", raw[4:24])
    assert (version, rows, dims) == (1, 3, 4)
    assert len(raw) == 24 + 3 * 4 * 4  # 48-byte payload


def test_round_trip_small(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = _save(tmp_path, data)
    m, manifest = load_embeddings(path)
    assert np.array_equal(m.data, data)
    assert not m.normalized
    assert manifest.count == 3


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 12), dims=st.integers(1, 9), seed=st.integers(0, 10**6))
def test_round_trip_bitexact(tmp_path_factory, rows, dims, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((rows, dims)).astype(np.float32)
    tmp = tmp_path_factory.mktemp("embx")
    path = _save(tmp, data)
    loaded, _ = load_embeddings(path)
    assert loaded.data.tobytes() == data.tobytes()


def test_manifest_count_mismatch(tmp_path):
    path = _save(tmp_path, np.zeros((3, 4)))
    mpath = manifest_path(path)
    obj = json.loads(mpath.read_text())
    obj["count"] = 5
    mpath.write_text(json.dumps(obj))
    with pytest.raises(ConsistencyError):
        load_embeddings(path)


def test_bad_magic(tmp_path):
    path = _save(tmp_path, np.zeros((2, 2)))
    raw = bytearray(path.read_bytes())
    raw[0] = 0x00
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_bad_version(tmp_path):
    path = _save(tmp_path, np.zeros((2, 2)))
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_truncated_payload(tmp_path):
    path = _save(tmp_path, np.zeros((3, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_nan_rejected(tmp_path):
    data = np.zeros((2, 2), dtype=np.float32)
    data[1, 1] = np.nan
    path = _save(tmp_path, data)
    with pytest.raises(DataError):
        load_embeddings(path)


def test_missing_manifest(tmp_path):
    path = _save(tmp_path, np.zeros((2, 2)))
    manifest_path(path).unlink()
    with pytest.raises(ConsistencyError):
        load_embeddings(path)


def test_normalize_34_row():
    m = l2_normalize(EmbeddingMatrix(np.array([[3.0, 4.0]], dtype=np.float32)))
    assert np.allclose(m.data, [[0.6, 0.8]], atol=1e-7)
    assert m.normalized


def test_normalize_unit_row_unchanged():
    m = l2_normalize(EmbeddingMatrix(np.array([[1.0, 0.0]], dtype=np.float32)))
    assert np.array_equal(m.data, np.array([[1.0, 0.0]], dtype=np.float32))


def test_normalize_random_norms(rng):
    m = l2_normalize(EmbeddingMatrix(rng.standard_normal((100, 64))))
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    assert np.abs(norms - 1.0).max() < 1e-5


def test_normalize_idempotent(rng):
    m1 = l2_normalize(EmbeddingMatrix(rng.standard_normal((20, 16))))
    m2 = l2_normalize(m1)
    assert np.abs(m2.data - m1.data).max() < 1e-6


def test_normalize_zero_row():
    with pytest.raises(DataError):
        l2_normalize(EmbeddingMatrix(np.zeros((1, 4), dtype=np.float32)))


def test_cache_identical_and_orthogonal():
    a = EmbeddingMatrix(np.array([[1.0, 0.0]], dtype=np.float32), normalized=True)
    b = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32),
                        normalized=True)
    cache = build_similarity_cache(a, b)
    assert cache.matrix[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert cache.matrix[0, 1] == pytest.approx(0.0, abs=1e-6)


def test_cache_matches_double_loop_oracle(rng):
    A = unit_rows(rng, 10, 8)
    B = unit_rows(rng, 7, 8)
    cache = build_similarity_cache(
        EmbeddingMatrix(A.astype(np.float32), normalized=True),
        EmbeddingMatrix(B.astype(np.float32), normalized=True))
    for i in range(10):
        for j in range(7):
            direct = float(np.dot(cache.targets.data[i].astype(np.float64),
                                  cache.texts.data[j].astype(np.float64)))
            assert cache.matrix[i, j] == pytest.approx(direct, abs=1e-5)
    assert cache.matrix.min() >= -1.0 - 1e-5
    assert cache.matrix.max() <= 1.0 + 1e-5


def test_cache_requires_normalized(rng):
    A = EmbeddingMatrix(rng.standard_normal((3, 4)))
    B = EmbeddingMatrix(rng.standard_normal((3, 4)))
    with pytest.raises(ValueError):
        build_similarity_cache(A, B)


def test_cache_dims_mismatch(rng):
    A = l2_normalize(EmbeddingMatrix(rng.standard_normal((3, 4))))
    B = l2_normalize(EmbeddingMatrix(rng.standard_normal((3, 5))))
    with pytest.raises(ConsistencyError):
        build_similarity_cache(A, B)


def test_stack_texts_column_order(rng):
    cls = l2_normalize(EmbeddingMatrix(rng.standard_normal((2, 4))))
    nouns = l2_normalize(EmbeddingMatrix(rng.standard_normal((3, 4))))
    stacked = stack_texts(cls, nouns)
    assert stacked.rows == 5
    assert np.array_equal(stacked.data[:2], cls.data)
    assert np.array_equal(stacked.data[2:], nouns.data)
