import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridstor import desk
from gridstor.profiles import (
    CSV_HEADER,
    DEFAULT_SEASONS,
    Day,
    ProfileError,
    PvScaling,
    SeasonParams,
    TimeGrid,
    format_profiles,
    load_profiles,
    save_profiles,
    scale_pv,
    single_day_grid,
    synth_profiles,
)


def _one_bus_csv(hours=range(24), p=1.0):
    rows = [",".join(CSV_HEADER)]
    rows += [f"2,A,day,{h},{p},0,0,0" for h in hours]
    return "\n".join(rows) + "\n"


def test_constant_load_series():
    net = desk.two_bus(load="A")
    grid = single_day_grid("day")
    prof = load_profiles(_one_bus_csv(), net, grid)
    k = net.topology.index[2]
    assert np.all(prof.p_load[0, :, k, 0] == 1.0)
    assert np.all(prof.p_load[0, :, k, 1:] == 0.0)
    assert np.all(prof.p_pv == 0.0)


def test_missing_hour_is_length_error():
    net = desk.two_bus(load="A")
    text = _one_bus_csv(h for h in range(24) if h != 13)
    with pytest.raises(ProfileError, match="series length 23.*hour 13"):
        load_profiles(text, net, single_day_grid("day"))


@pytest.mark.parametrize(
    "edit, match",
    [
        (lambda t: t.replace("2,A,day,0,", "9,A,day,0,"), "unknown bus"),
        (lambda t: t.replace("2,A,day,0,", "2,A,nope,0,"), "unknown day"),
        (lambda t: t.replace("2,A,day,0,1.0", "2,A,day,0,-1.0"), "negative load"),
        (lambda t: t + "2,A,day,0,1.0,0,0,0\n", "duplicate"),
        (lambda t: t + "2,B,day,0,1.0,0,0,0\n", "phase B"),
        (lambda t: t.replace("bus,", "node,"), "header"),
    ],
)
def test_load_rejects(edit, match):
    net = desk.two_bus(load="A")
    with pytest.raises(ProfileError, match=match):
        load_profiles(edit(_one_bus_csv()), net, single_day_grid("day"))


def test_four_day_round_trip_is_bit_identical(tmp_path):
    net = desk.chain(3)
    grid = TimeGrid()
    prof = synth_profiles(11, net, grid)
    path = tmp_path / "p.csv"
    save_profiles(prof, net, grid, path)
    again = load_profiles(path, net, grid)
    for name in ("p_load", "q_load", "p_pv", "q_pv"):
        assert np.array_equal(getattr(prof, name), getattr(again, name))
    assert format_profiles(again, net, grid) == path.read_text()


def test_synth_is_deterministic():
    net = desk.reference_feeder()
    a = synth_profiles(7, net, TimeGrid())
    b = synth_profiles(7, net, TimeGrid())
    assert all(np.array_equal(getattr(a, n), getattr(b, n)) for n in ("p_load", "q_load", "p_pv", "q_pv"))
    c = synth_profiles(8, net, TimeGrid())
    assert not np.array_equal(a.p_load, c.p_load)


def test_zero_rating_gives_no_pv():
    seasons = {k: SeasonParams(v.peak_load_kw, v.base_load_kw, 0.0, v.sunrise, v.sunset) for k, v in DEFAULT_SEASONS.items()}
    prof = synth_profiles(1, desk.chain(4), TimeGrid(), seasons)
    assert np.all(prof.p_pv == 0.0)


def test_summer_peak_equals_rating_at_solar_noon():
    net = desk.two_bus(pv="ABC")
    grid = single_day_grid("s", "summer")
    prof = synth_profiles(0, net, grid)
    sp = DEFAULT_SEASONS["summer"]
    series = prof.p_pv[0, :, 1, 0]
    noon = (sp.sunrise + sp.sunset) // 2
    assert series.max() == pytest.approx(1.0, abs=1e-12)
    assert int(np.argmax(series)) == noon


def test_pv_zero_outside_daylight_and_unity_pf():
    grid = TimeGrid()
    prof = synth_profiles(3, desk.chain(4), grid)
    for d, day in enumerate(grid.days):
        sp = DEFAULT_SEASONS[day.season]
        dark = [h for h in range(24) if h <= sp.sunrise or h >= sp.sunset]
        assert np.all(prof.p_pv[d, dark] == 0.0)
    assert np.all(prof.q_pv == 0.0)
    assert np.all(prof.p_load >= 0.0)


def test_power_factor_sets_reactive_load():
    prof = synth_profiles(3, desk.chain(3), TimeGrid(), power_factor=0.9)
    ratio = np.tan(np.arccos(0.9))
    assert np.allclose(prof.q_load, prof.p_load * ratio)


def test_scale_identity_zero_and_peak():
    net = desk.two_bus(pv="A")
    prof = synth_profiles(0, net, single_day_grid("s"))
    same = scale_pv(prof, 1.0)
    assert np.array_equal(same.p_pv, prof.p_pv)
    assert np.all(scale_pv(prof, 0.0).p_pv == 0.0)
    assert scale_pv(prof, PvScaling(2.1)).p_pv.max() == pytest.approx(2.1, rel=1e-12)
    assert np.array_equal(scale_pv(prof, 2.1).p_load, prof.p_load)


def test_scaling_rejects_negative():
    with pytest.raises(ProfileError):
        PvScaling(-1.0)


def test_grid_weights_checked():
    with pytest.raises(ProfileError, match="365"):
        TimeGrid(days=(Day("a", "summer", 100.0),))
    assert TimeGrid().weights.sum() == 365.0


# ---------------------------------------------------------------------------
# properties


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3, 5]))
def test_annual_energy_survives_round_trip(seed, n):
    net = desk.chain(n)
    grid = TimeGrid()
    prof = synth_profiles(seed, net, grid)
    again = load_profiles(format_profiles(prof, net, grid), net, grid)
    e0, e1 = prof.annual_energy_kwh(grid), again.annual_energy_kwh(grid)
    assert abs(e1 - e0) <= 1e-9 * abs(e0)


_alpha = st.floats(0.0, 50.0, allow_nan=False)


@given(_alpha, _alpha)
def test_scale_composes_exactly(a, b):
    prof = synth_profiles(0, desk.chain(3), single_day_grid("s"))
    lhs = scale_pv(scale_pv(prof, a), b)
    rhs = scale_pv(prof, a * b)
    assert lhs.pv_scale == rhs.pv_scale
    assert np.array_equal(lhs.p_pv, rhs.p_pv)
