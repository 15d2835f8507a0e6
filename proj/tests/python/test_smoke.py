import math

import numpy as np
import pytest

import mikecoco


def test_dct_round_trip_and_parseval():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 9))
    c = mikecoco.dct2(x)
    assert np.allclose(mikecoco.idct2(c), x, atol=1e-10)
    assert math.isclose(np.sum(c * c), np.sum(x * x), rel_tol=1e-10)


def test_mask_and_stream_identities():
    m = mikecoco.band_pass_mask(32, 32)
    assert (m["v1"], m["v2"], m["v3"]) == (1, 22, 32)
    w = m["weights"]
    assert w.shape == (32, 32)
    assert w[0, 0] == 1.0
    assert 0.0 <= w.min() and w.max() <= 1.0

    rng = np.random.default_rng(1)
    img = rng.uniform(size=(32, 32, 3))
    dii = mikecoco.extract_dii(img)
    assert abs(dii[..., 0].mean()) < 1e-9
    a = mikecoco.make_spi(img, 5)
    b = mikecoco.make_spi(img, 5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, mikecoco.make_spi(img, 6))


def test_lr_schedule():
    assert mikecoco.lr_schedule(0, 100) == 5e-7
    assert mikecoco.lr_schedule(100, 100) <= 1e-9


def test_evaluate_hand_case():
    q = np.array([[1.0, 0.0]])
    sims = [0.9, 0.8, 0.7, 0.6, 0.5]
    g = np.array([[s, math.sqrt(1 - s * s)] for s in sims])
    r = mikecoco.evaluate(q, [1], [0], g, [1, 2, 1, 3, 4], [1] * 5, max_rank=5)
    assert r["map"] == pytest.approx(5 / 6, abs=1e-15)
    assert r["rank1"] == 1.0


def test_errors_map_to_python_exceptions(tmp_path):
    with pytest.raises(ValueError):
        mikecoco.dct2(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        mikecoco.evaluate_checkpoint(str(tmp_path / "none.ckpt"), "q", "g")
    code, _, err = mikecoco.run_cli(["train", "--stage", "3", "--manifest", "m", "--out", "o"])
    assert code == 1
    assert err.startswith("error[validation]")


def test_short_pipeline(tmp_path):
    d = mikecoco.synth_dataset(str(tmp_path / "syn"), seed=2)
    assert d["source_images"] == 128
    s1 = mikecoco.train_stage1(d["source"], str(tmp_path / "run"), {"epochs_stage1": 1, "epochs_stage2": 1})
    s2 = mikecoco.train_stage2(s1["checkpoint"], d["source"], str(tmp_path / "run"))
    r = mikecoco.evaluate_checkpoint(s2["checkpoint"], d["target_query"], d["target_gallery"])
    assert 0.0 <= r["map"] <= 1.0
    assert len(r["cmc"]) == 20
