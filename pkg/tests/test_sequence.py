import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bmapest import epg
from bmapest.errors import ValidationError
from bmapest.phantom import TissueTable
from bmapest.sequence import (
    PRESET_NAMES,
    Adc,
    DoubleInversion,
    Grad,
    Inversion,
    NoPrep,
    Pulse,
    T2Prep,
    Wait,
    bisect,
    build_flash,
    double_inversion_mz,
    dumps,
    loads,
    phase_encode_order,
    preset,
    solve_dir_times,
)

TABLE = TissueTable.default()


def test_adc_count_contract():
    seq = build_flash((8, 8), echo_times=(4.0, 9.0, 14.0, 19.0), dummies=0)
    assert seq.adc_count() == 8 * 8 * 4
    for c in range(4):
        assert seq.adc_count(c) == 64


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_have_four_contrasts(name):
    seq = preset(name, (8, 4))
    assert seq.n_contrasts == 4
    for c in range(4):
        assert seq.adc_count(c) == 8 * 4
    assert all(b > a for a, b in zip(seq.echo_times, seq.echo_times[1:]))


def test_me_flash_defaults():
    seq = preset("me_flash", (8, 8))
    assert seq.echo_times == (4.0, 9.0, 14.0, 19.0)
    assert seq.tr == 20.0 and seq.flip == pytest.approx(math.radians(15))
    dummies = sum(1 for e in seq.events if isinstance(e, Pulse)) - 8
    assert dummies == math.ceil(5 * 4000 / 20)


def test_prep_defaults():
    assert preset("t1ir", (8, 8)).prep == Inversion(800.0)
    assert preset("flair", (8, 8)).prep.ti == pytest.approx(math.log(2) * 4000.0)
    assert preset("t2prep", (8, 8)).prep == T2Prep((40.0, 80.0, 120.0, 160.0))
    assert preset("t2prep", (8, 8)).echo_times == (44.0, 84.0, 124.0, 164.0)
    assert preset("dwi", (8, 8)).prep.b == 1000.0


def test_echo_beyond_tr_rejected():
    with pytest.raises(ValidationError):
        build_flash((8, 8), tr=10.0, echo_times=(4.0, 12.0))
    with pytest.raises(ValidationError):
        build_flash((8, 8), echo_times=(9.0, 4.0))
    with pytest.raises(ValidationError):
        build_flash((8, 8), echo_times=tuple(range(1, 10)))


def test_unknown_preset_lists_names():
    with pytest.raises(ValidationError, match="me_flash"):
        preset("spin_echo")


def test_prep_validation():
    with pytest.raises(ValidationError):
        Inversion(0.0)
    with pytest.raises(ValidationError):
        DoubleInversion(100.0, 200.0)
    with pytest.raises(ValidationError):
        T2Prep(())
    with pytest.raises(ValidationError):
        Wait(-1.0)
    with pytest.raises(ValidationError):
        Grad(1, "slice")


def test_phase_encode_orders():
    assert phase_encode_order(4) == [2, 3, 0, 1]
    assert phase_encode_order(4, "centric") == [0, 1, 3, 2]
    for ny in (1, 2, 8, 16):
        for o in ("linear", "centric"):
            assert sorted(phase_encode_order(ny, o)) == list(range(ny))


def test_preset_is_pure():
    assert preset("dir", (8, 8)) == preset("dir", (8, 8))


def test_text_round_trip():
    for name in ("t1ir", "t2prep", "dir", "dwi"):
        seq = preset(name, (4, 4))
        assert loads(dumps(seq)) == seq


def test_dumps_one_event_per_line():
    seq = build_flash((2, 2), echo_times=(4.0,), dummies=1)
    body = [l for l in dumps(seq).splitlines() if l and not l.startswith("#")]
    assert sum(1 for l in body if l.split()[0] == "adc") == 4


# --- timing solvers


def test_bisect():
    r = bisect(lambda x: x * x - 2.0, 0.0, 2.0, 1e-10)
    assert abs(r - math.sqrt(2)) < 1e-9
    with pytest.raises(ValidationError):
        bisect(lambda x: x * x + 1.0, 0.0, 2.0, 1e-3)


def test_inversion_null_by_bisection():
    t1 = 900.0

    def dc(ti):
        ev = [Pulse(math.pi, 0.0), Wait(ti), Pulse(math.pi / 2, 0.0), Adc(0, 0, 0.0)]
        s, _ = epg.run_program(ev, t1, 80.0)
        return float(np.imag(s[0]))

    ti = bisect(dc, 1.0, 3 * t1, 0.5)
    assert abs(ti - t1 * math.log(2)) <= 1.0


def test_inversion_dc_follows_recovery_curve():
    t1 = 1100.0

    def dc(ti):
        seq = build_flash((1, 1), echo_times=(4.0,), prep=Inversion(ti), recovery=0.0)
        s, _ = epg.run_program(seq.events, t1, 95.0)
        return complex(s[0])

    ref = dc(1e6) / (1 - 2 * math.exp(-1e6 / t1))
    for frac in (0.5, 0.7, 1.4):
        want = 1 - 2 * math.exp(-frac)
        assert abs(dc(frac * t1) - ref * want) < 1e-12
    # the null sits at ln2 = 0.693 T1, so 0.5 and 1.4 straddle it
    assert np.sign(dc(0.5 * t1).imag) != np.sign(dc(1.4 * t1).imag)


def test_dir_times_null_csf_and_wm():
    ti1, ti2 = solve_dir_times(TABLE.csf.t1, TABLE.wm.t1)
    assert ti1 > ti2 > 0
    for t1 in (TABLE.csf.t1, TABLE.wm.t1):
        assert abs(double_inversion_mz(ti1, ti2, t1)) < 1e-3


@given(st.floats(200, 5000))
@settings(max_examples=30, deadline=None)
def test_single_inversion_null_property(t1):
    ev = [Pulse(math.pi, 0.0), Wait(t1 * math.log(2))]
    _, s = epg.run_program(ev, t1, 50.0)
    assert abs(s.z[0]) < 1e-12
