import json

import numpy as np
import pytest

from avcleanse.boundary import (
    BoundaryModel, TrialSet, load_model, predict, read_trials, save_model, score_trials,
    train_boundary, write_trials,
)
from avcleanse.errors import CleanseError, FormatError

from conftest import make_set
from oracles import svm_reference_conic, svm_reference_slsqp


def scored(points, labels):
    n = len(labels)
    return TrialSet([f"a{i}" for i in range(n)], [f"b{i}" for i in range(n)],
                    np.asarray(labels, bool), np.asarray(points, float))


TOY = scored([(0.8, 0.8), (0.9, 0.7), (0.0, 0.1), (0.1, 0.0)], [1, 1, 0, 0])


def accuracy(model, trials):
    return np.mean((model.decision(trials.scores) >= 0) == trials.labels)


def test_score_trials_examples(rng):
    speech = make_set([[1, 0], [0, 1], [0.6, 0.8]])
    face = make_set([[0, 1], [0, 1], [1, 0]], modality="face")
    trials = TrialSet(["s0", "s0", "s2"], ["s0", "s1", "s1"], [True, False, True])
    out = score_trials(trials, speech, face)
    np.testing.assert_allclose(out.scores[0], [1.0, 1.0], atol=1e-7)
    np.testing.assert_allclose(out.scores[1], [0.0, 1.0], atol=1e-7)
    np.testing.assert_allclose(out.scores[2], [0.8, 0.0], atol=1e-7)


def test_score_trials_random_matches_direct_cosine(rng):
    raw_s = rng.standard_normal((30, 7))
    raw_f = rng.standard_normal((30, 5))
    speech, face = make_set(raw_s), make_set(raw_f, modality="face")
    ia, ib = rng.integers(0, 30, 50), rng.integers(0, 30, 50)
    trials = TrialSet([f"s{i}" for i in ia], [f"s{i}" for i in ib], rng.random(50) < 0.5)
    out = score_trials(trials, speech, face)
    cos = lambda m, i, j: m[i] @ m[j] / np.linalg.norm(m[i]) / np.linalg.norm(m[j])
    direct = np.array([[cos(raw_s, i, j), cos(raw_f, i, j)] for i, j in zip(ia, ib)])
    np.testing.assert_allclose(out.scores, direct, atol=1e-6)


def test_score_trials_unknown_sample():
    speech = make_set(np.eye(2))
    face = make_set(np.eye(2), modality="face")
    with pytest.raises(CleanseError, match="'nope'"):
        score_trials(TrialSet(["s0"], ["nope"], [True]), speech, face)


def test_separable_toy():
    model = train_boundary(TOY, C=1.0)
    assert accuracy(model, TOY) == 1.0
    is_t, m = predict(model, (0.85, 0.75))
    assert is_t and m > 0
    is_t, m = predict(model, (0.05, 0.05))
    assert not is_t and m < 0


def test_predict_is_sign_of_decision(rng):
    model = train_boundary(TOY)
    for p in rng.uniform(-1, 1, size=(50, 2)):
        is_t, m = predict(model, p)
        manual = model.weights @ ((p - model.means) / model.stds) + model.bias
        assert m == pytest.approx(manual, abs=1e-12)
        assert is_t == (manual >= 0)


def test_xor_linear_limit(rng):
    base = np.array([(1, 1), (-1, -1), (1, -1), (-1, 1)], float)
    pts = np.repeat(base, 25, axis=0) + 0.05 * rng.standard_normal((100, 2))
    labels = np.repeat([1, 1, 0, 0], 25)
    model = train_boundary(scored(pts, labels))
    assert accuracy(model, scored(pts, labels)) <= 0.75


def separable_set(rng, n, gap=0.2):
    u = rng.standard_normal(2)
    u /= np.linalg.norm(u)
    pts = rng.uniform(-1, 1, size=(4 * n, 2))
    proj = pts @ u
    keep = np.abs(proj) > gap
    pts, proj = pts[keep][:n], proj[keep][:n]
    labels = proj > 0
    if labels.all() or not labels.any():
        labels[0] = not labels[0]
        pts[0] = -pts[0]
    return scored(pts, labels)


@pytest.mark.parametrize("seed", range(10))
def test_separable_zero_training_error(seed):
    rng = np.random.default_rng(seed)
    trials = separable_set(rng, int(rng.integers(10, 120)))
    model = train_boundary(trials, C=1e4)
    margins = model.decision(trials.scores)
    assert np.all((margins > 0) == trials.labels)


def test_duplication_and_order_invariance(rng):
    pts = rng.standard_normal((150, 2))
    labels = pts @ [1.0, -0.4] + 0.8 * rng.standard_normal(150) > 0
    base = train_boundary(scored(pts, labels))
    dup = train_boundary(scored(np.r_[pts, pts], np.r_[labels, labels]))
    perm = rng.permutation(150)
    shuffled = train_boundary(scored(pts[perm], labels[perm]))
    for other in (dup, shuffled):
        np.testing.assert_allclose(other.weights, base.weights, atol=1e-6)
        assert other.bias == pytest.approx(base.bias, abs=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_objective_matches_slsqp_restarts(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(12, 50))
    pts = rng.standard_normal((n, 2))
    labels = pts @ rng.standard_normal(2) + rng.standard_normal(n) > 0
    labels[:2] = [True, False]
    C = float(rng.choice([0.1, 1.0, 10.0]))
    model = train_boundary(scored(pts, labels), C)
    z = model.standardize(pts)
    ref = svm_reference_slsqp(z, np.where(labels, 1.0, -1.0), C, restarts=10, seed=seed)
    assert abs(model.objective - ref) <= 1e-6


def test_objective_matches_conic_reference(rng):
    for _ in range(3):
        pts = rng.standard_normal((200, 2))
        labels = pts @ rng.standard_normal(2) + 0.5 * rng.standard_normal(200) > 0
        model = train_boundary(scored(pts, labels), 1.0)
        ref = svm_reference_conic(model.standardize(pts), np.where(labels, 1.0, -1.0), 1.0)
        assert abs(model.objective - ref) <= 1e-6
        assert model.duality_gap <= 1e-6


def test_axis_scaling_keeps_predictions(rng):
    pts = rng.uniform(-1, 1, size=(120, 2))
    labels = pts.sum(axis=1) + 0.3 * rng.standard_normal(120) > 0
    a = train_boundary(scored(pts, labels))
    b = train_boundary(scored(pts * 3.7, labels))
    probe = rng.uniform(-1, 1, size=(200, 2))
    np.testing.assert_array_equal(a.decision(probe) >= 0, b.decision(probe * 3.7) >= 0)


def test_training_errors():
    with pytest.raises(CleanseError, match="target and one imposter"):
        train_boundary(scored([(0.1, 0.2), (0.3, 0.4)], [1, 1]))
    with pytest.raises(CleanseError, match="zero-variance feature.*face"):
        train_boundary(scored([(0.1, 0.5), (0.3, 0.5)], [1, 0]))
    with pytest.raises(CleanseError, match="scored"):
        train_boundary(TrialSet(["a"], ["b"], [True]))


def test_model_json_roundtrip(tmp_path):
    model = train_boundary(TOY)
    save_model(model, tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert {"w", "b", "means", "stds", "C", "kernel"} <= set(data)
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.weights, model.weights)
    assert back.bias == model.bias and back.model_id == model.model_id
    (tmp_path / "bad.json").write_text('{"w": [1, 2]}')
    with pytest.raises(FormatError, match="'b'"):
        load_model(tmp_path / "bad.json")


def test_raw_line_matches_decision(rng):
    model = train_boundary(TOY)
    a, c, d = model.raw_line()
    for p in rng.uniform(-1, 1, size=(20, 2)):
        assert a * p[0] + c * p[1] + d == pytest.approx(model.decision(p)[0], abs=1e-12)


def test_trial_file_roundtrip_and_errors(tmp_path):
    trials = TrialSet(["x", "y"], ["y", "z"], [True, False])
    write_trials(trials, tmp_path / "t.tsv")
    assert (tmp_path / "t.tsv").read_text() == "1\tx\ty\n0\ty\tz\n"
    back = read_trials(tmp_path / "t.tsv")
    assert back.sample_a == ("x", "y") and back.labels.tolist() == [True, False]
    (tmp_path / "bad.tsv").write_text("1\tx\ty\n2\tx\ty\n")
    with pytest.raises(FormatError, match=":2:"):
        read_trials(tmp_path / "bad.tsv")
