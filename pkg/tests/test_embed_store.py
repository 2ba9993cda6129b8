import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from avcleanse.embed_store import (
    EmbeddingSet, LabelMap, Modality, l2_normalize, load_embeddings, load_labels, write_embeddings,
)
from avcleanse.errors import FormatError, LabelError

from conftest import make_set


def test_roundtrip_small(tmp_path):
    emb = make_set(np.arange(12).reshape(3, 4), normalize=False)
    write_embeddings(emb, tmp_path / "a.avce")
    back = load_embeddings(tmp_path / "a.avce", "speech")
    assert back.sample_ids == ("s0", "s1", "s2")
    assert back.vectors.shape == (3, 4)
    assert not back.normalized
    np.testing.assert_array_equal(back.vectors, emb.vectors)


def test_roundtrip_random_bit_exact(tmp_path, rng):
    v = rng.standard_normal((10, 8)).astype(np.float32)
    ids = [f"utt-{i}-é" for i in rng.permutation(10)]
    emb = EmbeddingSet(Modality.FACE, ids, v)
    write_embeddings(emb, tmp_path / "f.avce")
    back = load_embeddings(tmp_path / "f.avce")
    assert back.modality is Modality.FACE
    assert back.sample_ids == tuple(ids)
    assert back.vectors.tobytes() == v.tobytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_roundtrip_property(tmp_path_factory, matrix):
    path = tmp_path_factory.mktemp("rt") / "x.avce"
    emb = EmbeddingSet("speech", [str(i) for i in range(matrix.shape[0])], matrix)
    write_embeddings(emb, path)
    assert load_embeddings(path).vectors.tobytes() == emb.vectors.tobytes()


def test_header_layout(tmp_path):
    emb = make_set([[1.0, 2.0]], modality="face", normalize=False)
    write_embeddings(emb, tmp_path / "h.avce")
    raw = (tmp_path / "h.avce").read_bytes()
    assert raw[:4] == b"AVCE"
    assert struct.unpack_from("<HBBQI", raw, 4) == (1, 1, 0, 1, 2)
    assert struct.unpack_from("<H", raw, 20) == (2,)
    assert raw[22:24] == b"s0"
    assert np.frombuffer(raw[24:], "<f4").tolist() == [1.0, 2.0]


def _raw_file(n, d, payload_values, ids=None):
    ids = ids or [f"s{i}" for i in range(n)]
    out = struct.pack("<4sHBBQI", b"AVCE", 1, 0, 0, n, d)
    for s in ids:
        out += struct.pack("<H", len(s)) + s.encode()
    return out + np.asarray(payload_values, "<f4").tobytes()


def test_payload_size_mismatch(tmp_path):
    (tmp_path / "m.avce").write_bytes(_raw_file(3, 4, np.zeros(15)))
    with pytest.raises(FormatError, match="payload size mismatch"):
        load_embeddings(tmp_path / "m.avce")


def test_nan_names_row_and_id(tmp_path):
    vals = np.zeros(6)
    vals[3] = np.nan
    (tmp_path / "n.avce").write_bytes(_raw_file(3, 2, vals, ids=["a", "b", "c"]))
    with pytest.raises(FormatError, match=r"row 1 \(sample id 'b'\)"):
        load_embeddings(tmp_path / "n.avce")


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "unsupported version"),
    (lambda b: b[:7] + b"\x01" + b[8:], "reserved"),
    (lambda b: b[:10], "malformed header"),
    (lambda b: b[:23], "id block truncated"),
])
def test_malformed_headers(tmp_path, mutate, message):
    (tmp_path / "bad.avce").write_bytes(mutate(_raw_file(2, 2, np.zeros(4))))
    with pytest.raises(FormatError, match=message):
        load_embeddings(tmp_path / "bad.avce")


def test_modality_mismatch(tmp_path):
    write_embeddings(make_set([[1.0]], normalize=False), tmp_path / "s.avce")
    with pytest.raises(FormatError, match="expected face"):
        load_embeddings(tmp_path / "s.avce", "face")


def test_write_unwritable(tmp_path):
    with pytest.raises(OSError):
        write_embeddings(make_set([[1.0]]), tmp_path / "missing" / "dir" / "x.avce")


def test_duplicate_ids_rejected():
    with pytest.raises(FormatError, match="duplicate"):
        EmbeddingSet("speech", ["a", "a"], np.ones((2, 2)))


def test_normalize_examples():
    emb = l2_normalize(make_set([[3, 4], [0.6, 0.8], [0, 0]], normalize=False))
    np.testing.assert_allclose(emb.vectors[0], [0.6, 0.8], atol=1e-7)
    np.testing.assert_allclose(emb.vectors[1], [0.6, 0.8], atol=1e-7)
    np.testing.assert_array_equal(emb.vectors[2], [0, 0])
    assert emb.zero_rows.tolist() == [False, False, True]
    assert emb.normalized


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 16)),
                  elements=st.floats(-1000, 1000, width=32)))
def test_normalize_properties(matrix):
    once = l2_normalize(EmbeddingSet("speech", [str(i) for i in range(len(matrix))], matrix))
    twice = l2_normalize(once)
    np.testing.assert_allclose(twice.vectors, once.vectors, rtol=0, atol=1e-7)
    norms = np.einsum("ij,ij->i", once.vectors.astype(np.float64), once.vectors.astype(np.float64))
    live = ~once.zero_rows
    assert np.all(np.abs(norms[live] - 1.0) <= 1e-5)
    assert np.all(once.vectors[once.zero_rows] == 0)


def test_loaded_set_is_immutable(tmp_path):
    emb = make_set([[1.0, 0.0]])
    with pytest.raises(ValueError):
        emb.vectors[0, 0] = 2.0


def _write_tsv(path, rows):
    path.write_text("".join(f"{a}\t{b}\n" for a, b in rows), encoding="utf-8")


def test_labels_counts(tmp_path):
    emb = make_set(np.eye(6))
    _write_tsv(tmp_path / "l.tsv", [(f"s{i}", c) for i, c in enumerate("aaabab")])
    lab = load_labels(tmp_path / "l.tsv", emb)
    assert lab.k == 2
    assert lab.class_sizes == {1: 4, 2: 2}
    assert lab.assignments["s3"] == 2


def test_labels_dense_reindex_first_appearance(tmp_path):
    emb = make_set(np.eye(3))
    _write_tsv(tmp_path / "l.tsv", [("s2", 7), ("s0", 42), ("s1", 7)])
    lab = load_labels(tmp_path / "l.tsv", emb)
    assert lab.classes.tolist() == [2, 1, 1]
    assert lab.original_ids == ("7", "42")


def test_labels_sparse_ids_become_dense(tmp_path):
    emb = make_set(np.eye(2))
    _write_tsv(tmp_path / "l.tsv", [("s0", 7), ("s1", 42)])
    lab = load_labels(tmp_path / "l.tsv", emb)
    assert lab.classes.tolist() == [1, 2]


def test_labels_missing_id(tmp_path):
    emb = make_set(np.eye(3))
    _write_tsv(tmp_path / "l.tsv", [("s0", 1), ("s2", 1)])
    with pytest.raises(LabelError, match="s1"):
        load_labels(tmp_path / "l.tsv", emb)


def test_labels_unknown_and_duplicate(tmp_path):
    emb = make_set(np.eye(2))
    _write_tsv(tmp_path / "u.tsv", [("s0", 1), ("s1", 1), ("zz", 1)])
    with pytest.raises(LabelError, match="unknown sample id 'zz'"):
        load_labels(tmp_path / "u.tsv", emb)
    _write_tsv(tmp_path / "d.tsv", [("s0", 1), ("s1", 1), ("s0", 2)])
    with pytest.raises(LabelError, match="duplicate"):
        load_labels(tmp_path / "d.tsv", emb)


def test_labels_malformed_line(tmp_path):
    emb = make_set(np.eye(2))
    (tmp_path / "m.tsv").write_text("s0\t1\ns1 1\n")
    with pytest.raises(FormatError, match=":2:"):
        load_labels(tmp_path / "m.tsv", emb)


def test_labelmap_invariants():
    lab = LabelMap.from_raw(["a", "b", "c"], ["x", "y", "x"])
    assert sum(lab.class_sizes.values()) == 3
    with pytest.raises(LabelError):
        LabelMap(("a", "b"), np.array([1, 3]), ("p", "q", "r"))
