import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bmapest.config import parse_config_text
from bmapest.errors import FormatError, ValidationError
from bmapest.phantom import (
    BMAP_DATA_OFFSET,
    PARAMS,
    ProbabilityMaps,
    TissueParams,
    TissueTable,
    import_raw,
    load_maps,
    load_maps_csv,
    mix,
    mix_adjoint,
    save_maps,
    save_maps_csv,
    synth_phantom,
    write_bmap,
)

TABLE = TissueTable.default()


def pixel(csf, gm, wm):
    return ProbabilityMaps.from_stack(np.array([csf, gm, wm], float).reshape(3, 1, 1))


def test_default_table_values():
    assert (TABLE.csf.t1, TABLE.gm.t1, TABLE.wm.t1) == (4000.0, 1100.0, 650.0)
    assert (TABLE.csf.t2, TABLE.gm.t2, TABLE.wm.t2) == (2000.0, 95.0, 75.0)
    assert (TABLE.csf.pd, TABLE.gm.pd, TABLE.wm.pd) == (1.0, 0.85, 0.7)
    assert TABLE.matrix().shape == (len(PARAMS), 3)


@pytest.mark.parametrize(
    "kw",
    [dict(t1=-1.0), dict(t2=0.0), dict(t2=5000.0), dict(t2_prime=0.0), dict(pd=1.5), dict(d=-1e-3)],
)
def test_tissue_params_invariants(kw):
    base = dict(t1=1000.0, t2=80.0, t2_prime=60.0, pd=0.8, d=1e-3)
    with pytest.raises(ValidationError):
        TissueParams(**{**base, **kw})


def test_table_config_round_trip():
    text = TABLE.to_config_text()
    assert TissueTable.from_config(parse_config_text(text)) == TABLE
    t = TissueTable.from_config({"gm.t1": "1200"})
    assert t.gm.t1 == 1200.0 and t.wm == TABLE.wm
    with pytest.raises(ValidationError):
        TissueTable.from_config({"gm.t9": "1"})


def test_mix_examples():
    q = mix(pixel(1, 0, 0), TABLE)
    assert q.qt1[0, 0] == 4000.0
    q = mix(pixel(0, 0, 0), TABLE)
    assert q.pd[0, 0] == 0.0 and q.background_mask[0, 0]
    q = mix(pixel(0.5, 0.5, 0), TABLE)
    assert q.qt1[0, 0] == pytest.approx(2550.0, abs=1e-12)


def test_mix_rejects_mismatched_channels():
    with pytest.raises(ValidationError):
        ProbabilityMaps(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=50, deadline=None)
def test_mix_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.random((3, 4, 5)), rng.random((3, 4, 5))
    m = TABLE.matrix()
    lhs = np.tensordot(m, a * p1 + b * p2, axes=(1, 0))
    q1 = mix(ProbabilityMaps.from_stack(p1), TABLE)
    q2 = mix(ProbabilityMaps.from_stack(p2), TABLE)
    for i, name in enumerate(PARAMS):
        np.testing.assert_allclose(lhs[i], a * q1.param(name) + b * q2.param(name), atol=1e-12 * 4000)


def test_mix_adjoint_matches_finite_difference():
    rng = np.random.default_rng(0)
    p = rng.random((3, 3, 3))
    h = 0.125  # exact in binary; mixing is linear so no truncation error
    for ch in range(3):
        for name in PARAMS:
            g = {name: np.zeros((3, 3))}
            g[name][1, 2] = 1.0
            analytic = mix_adjoint(g, TABLE)[ch, 1, 2]
            pp, pm = p.copy(), p.copy()
            pp[ch, 1, 2] += h
            pm[ch, 1, 2] -= h
            fd = (mix(ProbabilityMaps.from_stack(pp), TABLE).param(name)[1, 2]
                  - mix(ProbabilityMaps.from_stack(pm), TABLE).param(name)[1, 2]) / (2 * h)
            assert abs(fd - analytic) <= 1e-9 * max(1.0, abs(analytic))


def test_quantitative_maps_within_tissue_range():
    q = mix(synth_phantom(1, 16), TABLE)
    fg = ~q.background_mask
    # sums <= 1 so mixed times sit below the largest tissue value
    assert q.qt1[fg].max() <= 4000.0 + 1e-9


# --- files


def test_bmap_round_trip_bytes(tmp_path):
    m = synth_phantom(2, 8)
    p = tmp_path / "a.bmap"
    save_maps(m, p)
    q = tmp_path / "b.bmap"
    save_maps(load_maps(p), q)
    assert p.read_bytes() == q.read_bytes()


def test_constant_file(tmp_path):
    p = tmp_path / "c.bmap"
    write_bmap(p, np.full((3, 2, 2), 0.25))
    m = load_maps(p)
    for t in ("csf", "gm", "wm"):
        assert (m.channel(t) == 0.25).all()


@given(arrays(np.float64, (3, 3, 4), elements=st.floats(0, 1)))
@settings(max_examples=200, deadline=None)
def test_bmap_round_trip_random(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("rt") / "m.bmap"
    save_maps(ProbabilityMaps.from_stack(data), p)
    np.testing.assert_array_equal(load_maps(p).stack(), data)


def test_bad_files(tmp_path):
    good = tmp_path / "g.bmap"
    save_maps(ProbabilityMaps.constant(2, 2), good)
    raw = good.read_bytes()

    bad = tmp_path / "magic.bmap"
    bad.write_bytes(b"XMAP1\n" + raw[6:])
    with pytest.raises(FormatError) as e:
        load_maps(bad)
    assert e.value.offset == 0

    trunc = tmp_path / "trunc.bmap"
    trunc.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as e:
        load_maps(trunc)
    assert e.value.offset == len(raw) - 3

    two = tmp_path / "two.bmap"
    write_bmap(two, np.zeros((2, 2, 2)))
    with pytest.raises(FormatError):
        load_maps(two)

    data = np.full((3, 2, 2), 0.5)
    data[1, 1, 0] = 1.5
    out = tmp_path / "range.bmap"
    write_bmap(out, data)
    with pytest.raises(FormatError) as e:
        load_maps(out)
    assert "pixel index 2" in str(e.value)
    assert e.value.offset == BMAP_DATA_OFFSET + 8 * (4 + 2)

    data[1, 1, 0] = np.nan
    write_bmap(out, data)
    with pytest.raises(FormatError, match="NaN"):
        load_maps(out)


def test_csv_round_trip(tmp_path):
    m = synth_phantom(3, 8)
    p = tmp_path / "m.csv"
    save_maps_csv(m, p)
    np.testing.assert_array_equal(load_maps_csv(p).stack(), m.stack())


def test_import_raw(tmp_path):
    planes = np.zeros((3, 2, 4), np.uint8)
    planes[0] = 255
    planes[2, 1, 3] = 51
    raw = tmp_path / "s.raw"
    raw.write_bytes(planes.tobytes())
    (tmp_path / "s.raw.json").write_text(json.dumps({"width": 4, "height": 2}))
    m = import_raw(raw)
    assert (m.csf == 1.0).all() and m.wm[1, 3] == pytest.approx(0.2)
    (tmp_path / "s.raw.json").write_text(json.dumps({"width": 5, "height": 2}))
    with pytest.raises(FormatError):
        import_raw(raw)


# --- synthetic phantoms


def test_synth_deterministic():
    np.testing.assert_array_equal(synth_phantom(1, 16).stack(), synth_phantom(1, 16).stack())
    assert not np.array_equal(synth_phantom(1, 16).stack(), synth_phantom(2, 16).stack())


@pytest.mark.parametrize("seed", [1, 2, 3, 7])
@pytest.mark.parametrize("size", [8, 16, 64])
def test_synth_constraints(seed, size):
    m = synth_phantom(seed, size)
    assert m.simplex_excess() <= 1e-12
    m.check_range()
    for t in ("csf", "gm", "wm"):
        assert (m.channel(t) > 0.5).mean() >= 0.05


def test_synth_rejects_small():
    with pytest.raises(ValidationError):
        synth_phantom(1, 7)
