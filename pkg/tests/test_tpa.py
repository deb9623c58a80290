import numpy as np
import pytest

from core.errors import DuplicatePointKey, LengthMismatch, OutOfNormalizationRange
from core.trajectory import SpatioTemporalPoint, synth_generate
from core.tpa import (
    EMBED_DIM,
    HIDDEN,
    EmbeddingBatch,
    Normalization,
    TpaParams,
    decode,
    encode,
    encode_batch,
    split_results,
    train_autoencoder,
    union_embeddings,
)

BBOX = (116.30, 39.90, 116.40, 39.98)
NORM = Normalization(BBOX, 0, 1000)


def test_dimensions_match_architecture():
    assert EMBED_DIM == 32 and HIDDEN == 256
    params = TpaParams.init(1, NORM)
    e = encode(SpatioTemporalPoint(116.35, 39.94, 500), params, "p")
    assert e.e.shape == (EMBED_DIM,)
    assert e.point_key == ("p", 500)
    assert isinstance(decode(e, params), SpatioTemporalPoint)


def test_param_count_and_flat_roundtrip():
    expected = sum(i * o + o for i, o in [(3, 256), (256, 256), (256, 32), (32, 256), (256, 256), (256, 3)])
    assert TpaParams.param_count() == expected
    params = TpaParams.init(2, NORM)
    flat = params.flatten()
    assert flat.size == expected
    back = TpaParams.from_flat(flat, NORM)
    for name in TpaParams.names():
        np.testing.assert_array_equal(back.arrays[name], params.arrays[name])
    with pytest.raises(LengthMismatch):
        TpaParams.from_flat(flat[:-1], NORM)


def test_init_is_deterministic():
    np.testing.assert_array_equal(TpaParams.init(3, NORM).flatten(), TpaParams.init(3, NORM).flatten())


def test_normalization_roundtrip_and_range_check():
    p = SpatioTemporalPoint(116.325, 39.92, 250)
    x = NORM.scale([p])
    np.testing.assert_allclose(x, [[0.25, 0.25, 0.25]])
    back = NORM.unscale(x)[0]
    assert back.t == 250
    assert back.lon == pytest.approx(p.lon) and back.lat == pytest.approx(p.lat)
    with pytest.raises(OutOfNormalizationRange):
        NORM.scale([SpatioTemporalPoint(116.5, 39.92, 10)])
    with pytest.raises(OutOfNormalizationRange):
        NORM.scale([SpatioTemporalPoint(116.35, 39.92, 5000)])


def test_encode_batch_empty():
    assert encode_batch([], TpaParams.init(1, NORM)).shape == (0, EMBED_DIM)


def test_training_reduces_reconstruction_error():
    trajs = synth_generate(2, 2, 50, BBOX, seed=4)
    points = [p for t in trajs for p in t.points]
    norm = Normalization.from_points(BBOX, points)
    params = TpaParams.init(5, norm)
    history = train_autoencoder(params, points, steps=60, lr=1e-3)
    assert len(history) == 61
    assert history[-1] < history[0]


# ---------- 合并 / 拆分 ----------
def _batch(cid, keys, width=4):
    return EmbeddingBatch(cid, tuple(keys), np.full((len(keys), width), float(cid)))


def test_union_sorts_by_key_and_records_owner():
    u = union_embeddings([_batch(1, [("b", 5), ("a", 9)]), _batch(0, [("a", 3), ("b", 1)])])
    assert u.keys == (("a", 3), ("a", 9), ("b", 1), ("b", 5))
    assert u.owners == (0, 1, 0, 1)
    np.testing.assert_array_equal(u.rows[:, 0], [0.0, 1.0, 0.0, 1.0])


def test_union_of_single_and_empty_batches():
    single = union_embeddings([_batch(2, [("x", 1)])])
    assert single.keys == (("x", 1),) and single.owners == (2,)
    empty = union_embeddings([_batch(0, []), _batch(1, [])])
    assert len(empty) == 0 and empty.rows.shape == (0, 4)


def test_union_rejects_duplicate_keys():
    with pytest.raises(DuplicatePointKey):
        union_embeddings([_batch(0, [("a", 1)]), _batch(1, [("a", 1)])])


def test_split_results_routes_rows_back_to_owners():
    u = union_embeddings([_batch(1, [("b", 5), ("a", 9)]), _batch(0, [("a", 3)]), _batch(2, [])])
    results = np.arange(len(u) * 2, dtype=np.float64).reshape(len(u), 2)
    out = split_results(u.keys, results, u.ownership(), clients=[0, 1, 2])
    assert sorted(out) == [0, 1, 2]
    assert out[0].keys == (("a", 3),)
    assert out[1].keys == (("a", 9), ("b", 5))
    np.testing.assert_array_equal(out[1].rows, results[1:])
    assert len(out[2]) == 0 and out[2].rows.shape == (0, 2)


def test_embedding_batch_length_check():
    with pytest.raises(LengthMismatch):
        EmbeddingBatch(0, (("a", 1), ("a", 2)), np.zeros((3, 4)))
