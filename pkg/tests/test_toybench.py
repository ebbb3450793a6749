import json

import numpy as np
import pytest

from cycletrans.evaluation import bhattacharyya_distance, pooled_histogram
from cycletrans.toybench import (
    ToyDomainSpec,
    apply_shift,
    generate_toy_domains,
    invert_shift,
    oracle_score,
    phantom,
    read_truth,
    structure_mask,
    to_signed,
    toy_splits,
    write_truth,
)

PIECEWISE = {"knots_in": [0.0, 0.3, 1.0], "knots_out": [0.0, 0.6, 1.0]}


def spec(**kw):
    base = dict(image_size=32, n_images=20, seed=0)
    base.update(kw)
    return ToyDomainSpec(**base)


def test_inversion_negates_signed_phantom():
    s = spec(shift_kind="inversion", shift_params={})
    x = to_signed(phantom(np.random.default_rng(0), 32))
    assert np.allclose(apply_shift(x, s), -x, atol=1e-12)


@pytest.mark.parametrize("kind,params", [("gamma", {"gamma": 0.5}), ("inversion", {}), ("piecewise", PIECEWISE)])
def test_shift_is_invertible(kind, params):
    s = spec(shift_kind=kind, shift_params=params)
    x = to_signed(phantom(np.random.default_rng(1), 32))
    assert np.allclose(invert_shift(apply_shift(x, s), s), x, atol=1e-12)


def test_same_seed_same_dataset():
    a, b = generate_toy_domains(spec()), generate_toy_domains(spec())
    assert np.array_equal(a.x_images(), b.x_images()) and np.array_equal(a.y_images(), b.y_images())
    c = generate_toy_domains(spec(seed=1))
    assert not np.array_equal(a.x_images(), c.x_images())


def test_domains_are_independent_draws():
    toy = generate_toy_domains(spec())
    # Y is not simply the shifted X: unshifted Y phantoms differ from the X phantoms
    assert not np.allclose(toy.truth_y_to_x, toy.x_images())


def test_y_histogram_matches_shifted_x_histogram():
    n = 200
    y_toy = generate_toy_domains(spec(n_images=n, seed=0))
    x_toy = generate_toy_domains(spec(n_images=n, seed=1))
    shifted_x = [apply_shift(x, y_toy.spec) for x in x_toy.x_images()]
    bd = bhattacharyya_distance(pooled_histogram(y_toy.y_images()), pooled_histogram(shifted_x))
    assert bd < 0.05


@pytest.mark.parametrize("kind,params", [("gamma", {"gamma": 0.5}), ("inversion", {}), ("piecewise", PIECEWISE)])
def test_shift_preserves_structure(kind, params):
    s = spec(shift_kind=kind, shift_params=params)
    toy = generate_toy_domains(s)
    for x, y in zip(toy.x_images(), toy.truth_x_to_y):
        assert np.array_equal(structure_mask(x, s, "x"), structure_mask(y, s, "y"))


def test_values_in_signed_range():
    toy = generate_toy_domains(spec())
    for imgs in (toy.x_images(), toy.y_images()):
        assert imgs.min() >= -1 and imgs.max() <= 1


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyDomainSpec(shift_kind="blur")
    with pytest.raises(ValueError):
        ToyDomainSpec(shift_kind="piecewise", shift_params={"knots_in": [0, 1], "knots_out": [1, 0]})
    with pytest.raises(ValueError):
        ToyDomainSpec(shift_params={"gamma": -1})


def test_oracle_score_perfect_and_null():
    s = spec(n_images=30)
    toy = generate_toy_domains(s)

    def perfect(batch, direction):
        f = apply_shift if direction == "x_to_y" else invert_shift
        return np.stack([f(b, s) for b in batch])

    good = oracle_score(perfect, toy.x_images(), toy.y_images(), s)
    null = oracle_score(lambda b, d: b, toy.x_images(), toy.y_images(), s)
    for d in ("x_to_y", "y_to_x"):
        assert good[d]["translated_vs_truth"]["bd"] < 1e-9
        assert good[d]["translated_vs_truth"]["hc"] == pytest.approx(1.0, abs=1e-9)
        assert good[d]["translated_vs_truth"]["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert null[d]["translated_vs_truth"] == null[d]["untranslated_vs_truth"]
        assert null[d]["untranslated_vs_truth"]["bd"] > 0.1


def test_truth_roundtrip_and_errors(tmp_path):
    toy = generate_toy_domains(spec(n_images=3))
    path = write_truth(tmp_path / "truth.json", toy)
    doc = read_truth(path)
    assert ToyDomainSpec(**doc["spec"]) == toy.spec
    with pytest.raises(FileNotFoundError):
        read_truth(tmp_path / "missing.json")
    (tmp_path / "other.json").write_text(json.dumps({"format": "x"}))
    with pytest.raises(ValueError):
        read_truth(tmp_path / "other.json")


def test_toy_splits_disjoint():
    splits, full = toy_splits(spec(n_images=10), n_test=4)
    assert splits.train.counts() == {"x": 10, "y": 10}
    assert splits.test.counts() == {"x": 4, "y": 4}
    assert not splits.train.volume_ids() & splits.test.volume_ids()
    assert len(full.truth_x_to_y) == 14
