import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvmerge import paramspace as ps
from dvmerge import refnet as rn
from dvmerge import vectors as vec
from dvmerge.errors import DegenerateInputError, FormatError, ShapeMismatchError
from dvmerge.paramspace import BlockVector
from dvmerge.vectors import VectorHistory
from toy import bvec, ckpt


def rand_vec(seed, sizes=(6, 3)):
    rng = np.random.default_rng(seed)
    return bvec(*((f"b{i}", [n], rng.normal(size=n)) for i, n in enumerate(sizes)))


def test_task_vector_zero_and_roundtrip():
    pre = ckpt(("w", [3], [0.5, -1.0, 2.0]))
    ft = ckpt(("w", [3], [1.5, 0.0, 2.25]))
    assert vec.task_vector(pre, pre) == BlockVector.zeros(pre)
    assert ps.add(pre, vec.task_vector(ft, pre)) == ft


def test_difference_vector():
    pre = ckpt(("w", [2], [1.0, 2.0]))
    assert vec.difference_vector(pre, pre) == BlockVector.zeros(pre)
    v = bvec(("w", [2], [0.25, -4.0]))
    assert vec.difference_vector(ps.add(pre, v), pre) == v
    with pytest.raises(ShapeMismatchError):
        vec.difference_vector(pre, ckpt(("w", [3], [0, 0, 0])))


def test_task_vectors_from_two_fine_tunes():
    spec = rn.MlpSpec((8, 6, 2), "relu")
    pre = rn.init_weights(spec, 3)
    t1, t2 = rn.make_task("moons", 11), rn.make_task("rings", 12)
    hyper = rn.TrainHyper(epochs=3)
    a = vec.task_vector(rn.fine_tune(pre, t1.train, hyper)[0], pre)
    b = vec.task_vector(rn.fine_tune(pre, t2.train, hyper)[0], pre)
    assert ps.global_norm(a) > 0 and ps.global_norm(b) > 0 and a != b
    # brute-force oracle on the flattened concatenation
    fa, fb = a.flat(), b.flat()
    expected = sum(x * y for x, y in zip(fa, fb)) / math.sqrt(sum(x * x for x in fa) * sum(y * y for y in fb))
    assert math.isclose(vec.cosine(a, b), expected, rel_tol=1e-10)
    assert abs(vec.cosine(a, b)) < 1.0


def test_negate():
    v = rand_vec(0)
    assert vec.negate(vec.negate(v)) == v
    z = BlockVector.zeros(v)
    assert np.all(vec.negate(z).flat() == 0)
    assert ps.global_norm(vec.negate(v)) == ps.global_norm(v)


def test_sum_vectors():
    v = rand_vec(1)
    assert np.all(vec.sum_vectors([v, vec.negate(v)]).flat() == 0)
    assert vec.sum_vectors([v]) == v
    with pytest.raises(ValueError):
        vec.sum_vectors([])
    with pytest.raises(ShapeMismatchError):
        vec.sum_vectors([v, rand_vec(2, sizes=(6, 4))])


@given(st.permutations([0, 1, 2]), st.integers(0, 1000))
def test_sum_commutative(order, seed):
    vs = [rand_vec(seed + i) for i in range(3)]
    a = vec.sum_vectors(vs)
    b = vec.sum_vectors([vs[i] for i in order])
    assert ps.global_norm(a - b) <= 1e-12 * max(ps.global_norm(a), 1e-300)


def test_cosine_zero_vector():
    v = rand_vec(0)
    with pytest.raises(DegenerateInputError):
        vec.cosine(v, BlockVector.zeros(v))


def test_random_unit_matched_norm_and_determinism():
    t = rand_vec(4)
    r = vec.random_unit_matched(t, 9)
    assert r.same_structure(t)
    assert math.isclose(ps.global_norm(r), ps.global_norm(t), rel_tol=1e-10)
    assert vec.random_unit_matched(t, 9) == r
    assert vec.random_unit_matched(t, 10) != r
    assert vec.random_unit_matched(t, (9, 1)) == vec.random_unit_matched(t, (9, 1))


def test_random_unit_matched_zero_template():
    with pytest.raises(DegenerateInputError):
        vec.random_unit_matched(BlockVector.zeros(rand_vec(0)), 0)


def test_random_direction_nearly_orthogonal_in_high_dimension():
    t = rand_vec(5, sizes=(900, 300))
    cosines = [abs(vec.cosine(vec.random_unit_matched(t, s), t)) for s in range(100)]
    assert np.mean(cosines) < 0.1


# -- telescoping -------------------------------------------------------------

def test_single_step_history_residual_zero():
    pre = ckpt(("w", [2], [1.0, 2.0]))
    h = VectorHistory((ckpt(("w", [2], [3.0, -1.0])),))
    assert vec.telescoping_residual(h, pre) == 0.0


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        vec.telescoping_residual(VectorHistory(()), ckpt(("w", [1], [0.0])))


@settings(max_examples=30)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_random_walk_history_telescopes(k, seed):
    rng = np.random.default_rng(seed)
    pre = ckpt(("b0", [4], rng.normal(size=4)), ("b1", [2], rng.normal(size=2)))
    steps = [pre]
    for _ in range(k):
        steps.append(ps.add(steps[-1], rand_vec(int(rng.integers(1 << 30)), sizes=(4, 2)) * 0.1))
    h = VectorHistory(tuple(steps))
    delta = vec.difference_vector(steps[-1], pre)
    assert vec.telescoping_residual(h, pre) <= 1e-9 * ps.global_norm(delta)


def test_recorded_fine_tune_telescopes():
    spec = rn.MlpSpec((8, 6, 2))
    pre = rn.init_weights(spec, 0)
    task = rn.make_task("moons", 0)
    _, h = rn.fine_tune(pre, task.train, rn.TrainHyper(epochs=1, batch_size=120, record_history=True))
    assert len(h) == 6  # 5 steps plus the start
    total = vec.sum_vectors(h.increments())
    delta = vec.difference_vector(h.steps[-1], pre)
    assert ps.global_norm(delta - total) <= 1e-9 * ps.global_norm(delta)


def test_history_shape_check():
    with pytest.raises(ShapeMismatchError):
        VectorHistory((ckpt(("w", [1], [0.0])), ckpt(("w", [2], [0.0, 0.0]))))


def test_history_persistence(tmp_path):
    steps = tuple(ckpt(("w", [2], [float(i), -float(i)]), meta={"i": str(i)}) for i in range(4))
    h = VectorHistory(steps)
    h.save(tmp_path / "hist")
    names = (tmp_path / "hist" / "index.txt").read_text().split()
    assert names == [f"step_{i:04d}.dvck" for i in range(4)]
    assert VectorHistory.load(tmp_path / "hist").steps == steps
    with pytest.raises(FormatError):
        VectorHistory.load(tmp_path)
