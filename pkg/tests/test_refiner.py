import numpy as np
import pytest

from promptvid import autodiff as ad
from promptvid.autodiff import ParameterStore, RngStream
from promptvid.errors import ContractError, DimensionError, StateError
from promptvid.refiner import Refiner, RefinerConfig, build_refiner, parameter_count

from conftest import tiny_bundles, tiny_model
from oracles import np_conv_cl, np_down, np_resblock, np_up


def built(config, seed=0):
    store = ParameterStore()
    build_refiner(store, config, RngStream(seed))
    return store


def perturb(store, seed=3, scale=0.1):
    g = np.random.default_rng(seed)
    for _, t, _ in store.items():
        if not t.data.any():
            t.data = g.standard_normal(t.shape).astype(t.dtype) * scale


@pytest.mark.parametrize("cfg", [RefinerConfig(8, (8, 8, 8), norm_groups=2),
                                 RefinerConfig(8, (4, 8, 12), (3, 3, 3), 2),
                                 RefinerConfig(16)])
def test_parameter_count_closed_form(cfg):
    store = built(cfg)
    assert parameter_count(cfg) == sum(t.size for _, t, _ in store.items())
    assert {store.tag(n) for n in store} == {"refiner"}


def test_fresh_refiner_is_exact_no_op():
    cfg = RefinerConfig(8, (8, 8, 8), norm_groups=2)
    x = ad.Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8, 8)))
    out = Refiner(built(cfg), cfg).apply(x)
    assert np.array_equal(out.data, x.data)


def test_matches_straightline_numpy(f64):
    cfg = RefinerConfig(8, (4, 8, 8), (1, 3, 3), 2)
    store = built(cfg)
    perturb(store)
    p = {n: t.data for n, t, _ in store.items()}
    x = np.random.default_rng(1).standard_normal((1, 2, 8, 8, 8))

    def block(name, h):
        return np_resblock(p, f"refiner.{name}.res1", np_resblock(p, f"refiner.{name}.res0", h, 2), 2)

    d0 = block("down0", np_down(x))
    d1 = block("down1", np_down(d0))
    h = block("mid1", block("mid0", d1))
    h = np_up(block("up1", h) + d1)
    h = np_up(block("up0", h) + d0)
    expect = x + np_conv_cl(h, p["refiner.out.weight"], p["refiner.out.bias"])
    out = Refiner(store, cfg).apply(ad.Tensor(x)).data
    np.testing.assert_allclose(out, expect, atol=1e-10)


def test_config_validation():
    with pytest.raises(ContractError):
        RefinerConfig(8, (8, 8))
    with pytest.raises(DimensionError):
        RefinerConfig(8, (6, 8, 8), norm_groups=4)


def test_shape_checks():
    cfg = RefinerConfig(8, (8, 8, 8), norm_groups=2)
    r = Refiner(built(cfg), cfg)
    with pytest.raises(DimensionError):
        r(ad.Tensor(np.zeros((1, 1, 8, 8, 4))))
    with pytest.raises(DimensionError):
        r(ad.Tensor(np.zeros((1, 1, 6, 6, 8))))


def test_unbuilt():
    with pytest.raises(StateError):
        Refiner(ParameterStore(), RefinerConfig(8, norm_groups=2))


def test_model_output_unchanged_when_enabled():
    m = tiny_model(refiner=(8, 8, 8))
    perturb(m.store, scale=0.05)  # wake the backbone, then re-zero the refiner head
    m.store["refiner.out.weight"].data[...] = 0
    m.store["refiner.out.bias"].data[...] = 0
    bundles = tiny_bundles(m)
    u = m.config.unet
    x = np.random.default_rng(2).standard_normal((2, u.frames, u.in_channels, u.height, u.width))
    t = np.array([4, 50])
    eps_p = np.random.default_rng(3).standard_normal((2, u.in_channels, u.height, u.width))
    base = m.predict_eps(x, t, bundles, "full", eps_p).data
    m.set_watermark_removal(True)
    assert np.array_equal(m.predict_eps(x, t, bundles, "full", eps_p).data, base)
    m.store["refiner.out.bias"].data[...] = 0.5
    assert not np.array_equal(m.predict_eps(x, t, bundles, "full", eps_p).data, base)


def test_model_without_refiner():
    with pytest.raises(StateError):
        tiny_model().set_watermark_removal(True)
