import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpptsim import ann
from mpptsim.errors import ConfigError, DivergenceError
from mpptsim.harness import default_zone_model
from mpptsim.pvmodel import ShadingPattern, string_curve

from conftest import PSC


@pytest.fixture(scope="module")
def grid_data(specs3):
    return ann.generate_zone_dataset(list(specs3), ann.irradiance_grid())


@pytest.fixture(scope="module")
def v_oc(specs3):
    return string_curve(list(specs3), ShadingPattern((1000.0,) * 3)).v_oc


@pytest.fixture(scope="module")
def net(specs3):
    return default_zone_model(tuple(specs3))


@pytest.mark.parametrize("seed", range(5))
def test_backprop_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    m = ann.Mlp.init((3, 10, 2), seed=seed)
    m.biases = [r.normal(0, 0.5, b.shape) for b in m.biases]
    x = r.uniform(0.0, 1.2, (7, 3))
    y = r.uniform(0.0, 1.0, (7, 2))
    _, gw, gb = m.loss_and_grads(x, y)
    h = 1e-6
    for analytic, arrays in ((gw, m.weights), (gb, m.biases)):
        for k, a in enumerate(arrays):
            it = np.nditer(a, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = a[idx]
                a[idx] = old + h
                lp = m.loss_and_grads(x, y)[0]
                a[idx] = old - h
                lm = m.loss_and_grads(x, y)[0]
                a[idx] = old
                numeric = (lp - lm) / (2 * h)
                g = analytic[k][idx]
                assert abs(g - numeric) <= 1e-5 * max(abs(g), abs(numeric), 1e-4)


def test_learns_a_constant():
    data = [ann.ZoneSample((g1, g2, g3), 50.0, 60.0)
            for g1, g2, g3 in [(200, 400, 600), (1000, 1000, 1000), (300, 900, 500)]]
    m = ann.train(ann.Mlp.init(seed=1), data, epochs=3000)
    assert m.train_mse < 1e-4


def test_fits_single_sample():
    data = [ann.ZoneSample((600.0, 800.0, 1000.0), 77.0, 89.0)]
    m = ann.train(ann.Mlp.init(seed=2), data, epochs=3000)
    lo, hi = ann.predict_zone(m, (600.0, 800.0, 1000.0))
    # 1e-3 on the normalized outputs (v_scale = 100 V)
    assert abs(lo - 77.0) < 0.1 and abs(hi - 89.0) < 0.1
    assert m.train_mse < 1e-3


def test_loss_decreases_with_small_step(grid_data, v_oc):
    m0 = ann.Mlp.init(seed=0, v_scale=v_oc)
    m = ann.train(m0, grid_data, epochs=400, learning_rate=0.01, momentum=0.0)
    h = m.history
    assert all(b <= a * 1.01 for a, b in zip(h, h[1:]))
    assert h[-1] < h[0]


def test_training_reduces_error(grid_data, net):
    untrained = ann.Mlp.init(seed=0, v_scale=net.v_scale)
    assert net.train_mse < ann.mse(untrained, grid_data)


def test_divergence_is_reported(grid_data, v_oc):
    with pytest.raises(DivergenceError, match="learning rate"):
        ann.train(ann.Mlp.init(seed=0, v_scale=v_oc), grid_data, epochs=500,
                  learning_rate=1e4, momentum=0.9)


def test_empty_training_set():
    with pytest.raises(ValueError):
        ann.train(ann.Mlp.init(), [], epochs=1)


def test_held_out_predictions_within_five_volts(grid_data, v_oc):
    idx = np.random.default_rng(0).permutation(len(grid_data))
    n_test = len(grid_data) // 5
    test = [grid_data[i] for i in idx[:n_test]]
    train = [grid_data[i] for i in idx[n_test:]]
    m = ann.train(ann.Mlp.init(seed=0, v_scale=v_oc), train)
    ok = 0
    for s in test:
        lo, hi = ann.predict_zone(m, s.irradiances)
        ok += abs(lo - s.v_min) < 5.0 and abs(hi - s.v_max) < 5.0
    assert ok >= 0.9 * len(test)


def test_training_samples_within_five_volts(grid_data, net):
    ok = 0
    for s in grid_data:
        lo, hi = ann.predict_zone(net, s.irradiances)
        ok += abs(lo - s.v_min) < 5.0 and abs(hi - s.v_max) < 5.0
    assert ok >= 0.9 * len(grid_data)


def test_containment_on_grid(grid_data, net):
    assert ann.containment_rate(net, grid_data) >= 0.9


def test_psc_zone_contains_gmpp(net, psc_curve):
    from mpptsim.pvmodel import find_gmpp
    v_g, _ = find_gmpp(psc_curve)
    lo, hi = ann.predict_zone(net, PSC)
    assert lo <= v_g <= hi
    assert lo < 88.0 and hi > 79.99


def test_round_trip_is_bit_exact(net, tmp_path):
    path = tmp_path / "zone.mlp"
    net.save(path)
    back = ann.Mlp.load(path)
    assert back.sizes == net.sizes
    assert back.g_scale == net.g_scale and back.v_scale == net.v_scale
    assert back.sort_inputs == net.sort_inputs
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        assert np.array_equal(a, b)
    g = np.random.default_rng(0).uniform(0, 1000, (20, 3))
    assert np.array_equal(net.predict_raw(g), back.predict_raw(g))
    back.save(tmp_path / "again.mlp")
    assert (tmp_path / "again.mlp").read_bytes() == path.read_bytes()


def test_load_rejects_other_files(tmp_path):
    p = tmp_path / "x.mlp"
    p.write_text("hello\n")
    with pytest.raises(ConfigError):
        ann.Mlp.load(p)


def test_module_order_does_not_matter(net):
    assert ann.predict_zone(net, (600, 800, 1000)) == ann.predict_zone(net, (1000, 600, 800))


@settings(max_examples=200)
@given(st.lists(st.floats(0.0, 1200.0), min_size=3, max_size=3))
def test_predicted_zone_is_valid(net, v_oc, g):
    lo, hi = ann.predict_zone(net, g, v_max_limit=v_oc)
    assert 0.0 <= lo < hi <= v_oc


def test_inverted_output_is_swapped(caplog):
    m = ann.Mlp.init((3, 1, 2), seed=0)
    m.weights[1][:] = 0.0
    m.biases[1][:] = [0.8, 0.2]
    with caplog.at_level(logging.WARNING):
        lo, hi = ann.predict_zone(m, (500, 500, 500))
    assert (lo, hi) == pytest.approx((20.0, 80.0))
    assert "swapping" in caplog.text


def test_labels_are_valid(grid_data, v_oc):
    for s in grid_data:
        assert 0.0 <= s.v_min < s.v_max <= v_oc + 1e-9
        assert s.v_min <= s.v_gmpp <= s.v_max


def test_uniform_label_is_top_zone(spec, specs3):
    s = ann.zone_for(list(specs3), ShadingPattern((1000.0,) * 3))
    assert not s.widened
    assert s.v_min < 3 * spec.v_mp_stc < s.v_max
    assert abs(s.v_gmpp - 3 * spec.v_mp_stc) < 0.03 * 3 * spec.v_mp_stc


def test_dark_module_label_is_middle_zone(spec, specs3):
    s = ann.zone_for(list(specs3), ShadingPattern((0.0, 1000.0, 1000.0)))
    assert s.v_min < 2 * spec.v_mp_stc < s.v_max
    assert s.v_max < 3 * spec.v_mp_stc


def test_psc_label_overlaps_reported_window(specs3):
    s = ann.zone_for(list(specs3), ShadingPattern(PSC))
    assert s.v_min <= 79.99 * 1.1 and s.v_max >= 88.0 * 0.9
    assert 79.99 * 0.9 <= s.v_gmpp <= 88.0 * 1.1


def test_widened_labels_are_logged(specs3, caplog):
    with caplog.at_level(logging.WARNING, logger="mpptsim.ann"):
        data = ann.generate_zone_dataset(list(specs3), ann.irradiance_grid())
    n = sum(s.widened for s in data)
    if n:
        assert f"{n} of {len(data)}" in caplog.text


def test_zone_sample_rejects_empty_interval():
    with pytest.raises(ValueError):
        ann.ZoneSample((1, 2, 3), 5.0, 5.0)
