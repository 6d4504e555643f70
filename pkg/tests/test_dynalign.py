import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dypcl import ctc, dynalign
from dypcl.dynalign import AlignmentMode, DegenerateSpanError
from oracles import central_fd, rel_error


def _align(labels, logits):
    return ctc.ctc_forced_align(logits, labels)


def test_single_frame_span_is_that_column():
    emb = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(dynalign.weighted_pool(emb[:, 1:2], np.array([0.37])), emb[:, 1])


def test_two_frame_weights_hand_computed():
    e1, e2 = np.array([1.0, -2.0]), np.array([3.0, 4.0])
    cols = np.stack([e1, e2], axis=1)
    assert np.allclose(dynalign.pooling_weights([0.6, 0.2]), [0.75, 0.25])
    assert np.allclose(dynalign.weighted_pool(cols, [0.6, 0.2]), 0.75 * e1 + 0.25 * e2)


def test_uniform_scores_equal_mean_exactly():
    rng = np.random.default_rng(0)
    for k in (1, 2, 4, 8):
        cols = rng.normal(size=(5, k))
        pooled = dynalign.weighted_pool(cols, np.full(k, 0.5))
        assert np.allclose(pooled, cols.mean(axis=1), rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_weights_sum_to_one_and_convex_hull(k, seed):
    rng = np.random.default_rng(seed)
    cols = rng.normal(size=(4, k))
    s = rng.uniform(0.0, 1.0, size=k)
    s[rng.integers(k)] += 1e-3
    w = dynalign.pooling_weights(s)
    assert abs(w.sum() - 1.0) < 1e-12
    v = dynalign.weighted_pool(cols, s)
    assert np.all(v >= cols.min(axis=1) - 1e-12) and np.all(v <= cols.max(axis=1) + 1e-12)


def test_degenerate_scores_raise():
    with pytest.raises(DegenerateSpanError):
        dynalign.pooling_weights([0.0, 0.0])
    with pytest.raises(DegenerateSpanError):
        dynalign.pooling_weights([])
    with pytest.raises(DegenerateSpanError):
        dynalign.pooling_weights([0.5, -0.1])


def test_extract_all_one_per_label_in_order():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 9))
    emb = rng.normal(size=(3, 9))
    labels = [2, 4, 1]
    out = dynalign.extract_all(emb, logits, labels)
    assert [e.phoneme for e in out] == labels
    firsts = [e.source_span[0] for e in out]
    assert firsts == sorted(firsts)


def test_position_out_of_range():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 5))
    al = _align([1, 2], logits)
    with pytest.raises(IndexError):
        dynalign.extract_phoneme_embedding(rng.normal(size=(2, 5)), al, 2)


def test_frozen_snapshot_is_deterministic_and_independent_of_live_logits():
    rng = np.random.default_rng(3)
    snap = rng.normal(size=(4, 8))
    emb = rng.normal(size=(3, 8))
    a = dynalign.extract_all(emb, rng.normal(size=(4, 8)), [1, 3], aligner_logits=snap)
    b = dynalign.extract_all(emb, rng.normal(size=(4, 8)), [1, 3], aligner_logits=snap)
    for x, y in zip(a, b):
        assert x.source_span == y.source_span
        assert np.array_equal(x.vector, y.vector)


def test_time_to_frames_exact_cover():
    # frames 4..7 start at 20, 25, 30, 35 ms
    assert dynalign.time_to_frames(0.020, 0.040, 20) == (4, 7)
    emb = np.arange(40.0).reshape(2, 20)
    out = dynalign.timestamp_extract(emb, [(0.020, 0.040)])
    assert np.allclose(out[0].vector, emb[:, 4:8].mean(axis=1))


def test_time_to_frames_sub_hop_interval():
    # 11-13 ms: no frame starts inside, frame 2 (10-35 ms) covers it
    assert dynalign.time_to_frames(0.011, 0.013, 20) == (2, 2)


def test_time_to_frames_empty_overlap():
    with pytest.raises(DegenerateSpanError):
        dynalign.time_to_frames(0.2, 0.3, 10)
    with pytest.raises(DegenerateSpanError):
        dynalign.time_to_frames(0.02, 0.02, 10)


def test_timestamp_round_trip_widens_spans():
    spans = [(0, 2), (3, 5), (6, 9)]
    back = dynalign.timestamp_spans(spans, 20)
    for (f, l), (f2, l2) in zip(spans, back):
        # end time (l + 5) * hop excludes frame l + 5
        assert f2 == f and l2 == min(l + 4, 19)


def test_mode_parsing():
    assert AlignmentMode.parse("frozen") is AlignmentMode.FROZEN_LOGIT
    assert AlignmentMode.parse("dynamic") is AlignmentMode.DYNAMIC
    with pytest.raises(ValueError):
        AlignmentMode.parse("bogus")


def test_pool_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        k = int(rng.integers(1, 6))
        cols = rng.normal(size=(3, k))
        s = rng.uniform(0.05, 1.0, size=k)
        d = rng.normal(size=3)
        d_cols, d_s = dynalign.weighted_pool_backward(cols, s, d)
        f = lambda: float(d @ dynalign.weighted_pool(cols, s))
        assert rel_error(d_cols, central_fd(f, cols)) < 1e-6
        assert rel_error(d_s, central_fd(f, s, eps=1e-6)) < 1e-5


def test_score_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = rng.normal(size=(4, 5))
        sym = rng.integers(0, 4, size=5)
        up = rng.normal(size=5)
        g = dynalign.score_backward(z, sym, up)

        def f():
            p = np.exp(ctc.log_softmax(z))
            return float(up @ p[sym, np.arange(5)])

        assert rel_error(g, central_fd(f, z)) < 1e-6


def test_export_csv(tmp_path):
    p = tmp_path / "e.csv"
    n = dynalign.export_embeddings_csv(p, [("u1", "a", "C", np.array([1.0, 2.0])), ("u2", "b", "VL", np.array([0.5, -1.0]))])
    lines = p.read_text().splitlines()
    assert n == 2
    assert lines[0] == "utterance_id,phoneme,group,e_1,e_2"
    assert lines[2].startswith("u2,b,VL,0.5,-1")
