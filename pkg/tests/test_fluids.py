import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucleus import fluids
from nucleus.fluids import (BoilingCondition, FluidError, conditioning_vector, derive_nondimensional,
                            load_properties, make_params, nondim_saturation_temp,
                            raw_conditioning_vector)

# Published non-dimensional table, with the number of decimals printed for each entry.
# (value, decimals) pairs; l_c and t_c in mm and ms.
TABLE = {
    "FC-72": {"l_c": (0.73, 2), "u_c": (0.08, 2), "t_c": (8.6, 1), "rho_ratio": (8.687e-3, 6),
              "mu_ratio": (2.816e-2, 5), "k_ratio": (2.09e-1, 3), "cp_ratio": (7.997e-1, 4),
              "Re": (231.72, 2), "We": (1.0, 1), "Pr": (7.35, 2)},
    "R515B": {"l_c": (1.08, 2), "u_c": (0.1, 1), "t_c": (10.5, 1), "rho_ratio": (4.442e-3, 6),
              "mu_ratio": (2.809e-2, 5), "k_ratio": (1.158e-1, 4), "cp_ratio": (6.515e-1, 4),
              "Re": (426.67, 2), "We": (1.0, 1), "Pr": (4.87, 2)},
    "LN2": {"l_c": (1.06, 2), "u_c": (0.1, 1), "t_c": (10.4, 1), "rho_ratio": (5.589e-3, 6),
            "mu_ratio": (3.351e-2, 5), "k_ratio": (4.94e-2, 4), "cp_ratio": (5.501e-1, 4),
            "Re": (542.13, 2), "We": (1.0, 1), "Pr": (2.28, 2)},
    # the printed Re and Pr for this fluid are not reproducible from its own property row
    "OP2P50": {"l_c": (0.88, 2), "u_c": (0.093, 3), "t_c": (9.5, 1), "rho_ratio": (6.0e-3, 4),
               "mu_ratio": (2.42e-2, 4), "k_ratio": (1.51e-1, 3), "cp_ratio": (7.16e-1, 3),
               "We": (1.0, 1)},
}
ST_PER_K = {"OP2P50": 0.0095, "FC-72": 0.013, "R515B": 0.0066, "LN2": 0.0102}
SCALE = {"l_c": 1e3, "t_c": 1e3}


def nondim(name, dT=40.0):
    p = load_properties(name)
    return derive_nondimensional(p, BoilingCondition(p.T_sat - 0.0, p.T_sat + dT))


@pytest.mark.parametrize("fluid", sorted(TABLE))
def test_table_entries_match_at_printed_precision(fluid):
    nd = nondim(fluid)
    for key, (value, decimals) in TABLE[fluid].items():
        got = getattr(nd, key) * SCALE.get(key, 1.0)
        assert round(got, decimals) == pytest.approx(value, abs=10 ** -(decimals + 3)), key


@pytest.mark.parametrize("fluid", sorted(ST_PER_K))
def test_stefan_slope(fluid):
    nd = nondim(fluid, dT=1.0)
    decimals = len(str(ST_PER_K[fluid]).split(".")[1])
    assert round(nd.St, decimals) == pytest.approx(ST_PER_K[fluid])


def test_fc72_headline_values():
    nd = nondim("FC-72")
    assert nd.l_c * 1e3 == pytest.approx(0.73, rel=0.01)
    assert nd.Re == pytest.approx(231.72, rel=0.005)
    assert nd.Pr == pytest.approx(7.35, rel=0.005)


def test_ln2_headline_values():
    nd = nondim("LN2")
    assert nd.Re == pytest.approx(542.13, rel=0.005)
    assert nd.Pr == pytest.approx(2.28, rel=0.01)


@pytest.mark.parametrize("wall,sat_nd,stefan", [
    (81, 0.2000, 0.3792), (85, 0.1818, 0.4171), (89, 0.1667, 0.4550),
    (93, 0.1538, 0.4930), (97, 0.1429, 0.5309), (101, 0.1333, 0.5688),
])
def test_op2p50_boiling_curve(wall, sat_nd, stefan):
    p = make_params("OP2P50", 41.0, wall)
    assert round(p.T_sat_nondim, 4) == pytest.approx(sat_nd)
    assert p.nondim.St == pytest.approx(stefan, rel=0.003)
    assert p.condition.subcooled


def test_op2p50_saturation_exact():
    assert nondim_saturation_temp(49.0, 41.0, 81.0) == 0.2


def test_saturation_zero_when_saturated():
    assert nondim_saturation_temp(58.0, 58.0, 80.0) == 0.0


def test_saturation_undefined_without_superheat():
    with pytest.raises(FluidError):
        nondim_saturation_temp(58.0, 70.0, 70.0)


def test_non_buoyant_rejected():
    p = dataclasses.replace(load_properties("FC-72"), rho_v=2000.0)
    with pytest.raises(FluidError, match="non-buoyant"):
        derive_nondimensional(p, BoilingCondition(58.0, 80.0))


def test_non_positive_property_rejected():
    p = dataclasses.replace(load_properties("FC-72"), mu_l=0.0)
    with pytest.raises(FluidError):
        derive_nondimensional(p, BoilingCondition(58.0, 80.0))


def test_wall_must_exceed_saturation():
    with pytest.raises(FluidError):
        make_params("FC-72", 50.0, 55.0)


def test_unknown_fluid():
    with pytest.raises(FluidError):
        load_properties("water")


def test_surface_tension_scaling():
    p = load_properties("FC-72")
    cond = BoilingCondition(58.0, 80.0)
    a = derive_nondimensional(p, cond)
    b = derive_nondimensional(dataclasses.replace(p, sigma=4 * p.sigma), cond)
    assert b.l_c == pytest.approx(2 * a.l_c, rel=1e-12)
    assert b.u_c == pytest.approx(math.sqrt(2) * a.u_c, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 80.0))
def test_stefan_linear_in_superheat(dT):
    p = load_properties("FC-72")
    one = derive_nondimensional(p, BoilingCondition(50.0, 50.0 + dT)).St
    two = derive_nondimensional(p, BoilingCondition(50.0, 50.0 + 2 * dT)).St
    assert two == pytest.approx(2 * one, rel=1e-12)


@pytest.mark.parametrize("fluid", fluids.fluid_names())
def test_weber_close_to_one(fluid):
    nd = nondim(fluid)
    p = load_properties(fluid)
    assert nd.We == pytest.approx(p.rho_l / (p.rho_l - p.rho_v), rel=1e-12)
    assert abs(nd.We - 1) < 0.1


def test_params_round_trip_and_consistency():
    p = make_params("LN2", -200.0, -180.0)
    q = fluids.FluidParams.from_dict(p.to_dict())
    assert q == p
    bad = p.to_dict()
    bad["nondim"]["Re"] *= 1.01
    with pytest.raises(FluidError):
        fluids.FluidParams.from_dict(bad)


def test_conditioning_vector_layout():
    p = make_params("FC-72", 58.0, 88.0)
    v = conditioning_vector(p)
    assert v.shape == (12,) and v.dtype == np.float32
    np.testing.assert_array_equal(v, conditioning_vector(p))
    raw = raw_conditioning_vector(p)
    assert raw[11] == 0.0
    assert raw[0] == pytest.approx(231.72, rel=0.005)
    assert raw[1] == pytest.approx(7.35, rel=0.005)
    assert raw[4] == pytest.approx(8.687e-3, rel=0.001)
    assert raw[10] == 0.0
    assert raw[9] == pytest.approx(30.0 / (58.0 + 273.15))


def test_conditioning_subcooled_flag():
    assert raw_conditioning_vector(make_params("FC-72", 48.0, 88.0))[11] == 1.0


def test_conditioning_stats_shape_checked():
    p = make_params("FC-72", 58.0, 88.0)
    with pytest.raises(FluidError):
        conditioning_vector(p, {"mean": [0.0] * 11, "std": [1.0] * 11})


def test_conditioning_standardization():
    ps = [make_params(f, load_properties(f).T_sat, load_properties(f).T_sat + 30) for f in fluids.fluid_names()]
    stats = fluids.conditioning_stats(ps)
    mat = np.stack([conditioning_vector(p, stats) for p in ps]).astype(np.float64)
    np.testing.assert_allclose(mat[:, :8].mean(axis=0), 0.0, atol=1e-6)
