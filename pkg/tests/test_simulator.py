import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bmapest import epg
from bmapest.errors import ValidationError
from bmapest.fft import dft_matrix, fft, fft2, ifft, ifft2
from bmapest.phantom import ProbabilityMaps, QuantitativeMaps, TissueTable, mix, synth_phantom
from bmapest.sequence import PRESET_NAMES, Adc, build_flash, preset
from bmapest.simulator import (
    KSpace,
    compile_program,
    echo_image,
    read_stack,
    reconstruct,
    simulate,
    simulate_stack,
    write_stack,
)

TABLE = TissueTable.default()


def uniform(tissue, n=8):
    p = np.zeros((3, n, n))
    p[("csf", "gm", "wm").index(tissue)] = 1.0
    return ProbabilityMaps.from_stack(p)


# --- fft


def test_fft_basics():
    assert not fft2(np.zeros((4, 8))).any()
    c = fft2(np.full((8, 8), 2.5))
    assert abs(c[0, 0] - 2.5 * 8) < 1e-12
    c[0, 0] = 0
    assert np.abs(c).max() < 1e-12


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 8, 16, 32]))
@settings(max_examples=40, deadline=None)
def test_fft_matches_dense_dft(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
    np.testing.assert_allclose(fft(x), x @ dft_matrix(n).T / math.sqrt(n), atol=1e-12)
    np.testing.assert_allclose(ifft(fft(x)), x, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_fft2_parseval_and_inverse(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 16)) + 1j * rng.normal(size=(8, 16))
    y = fft2(x)
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-12 * np.linalg.norm(x)
    np.testing.assert_allclose(ifft2(y), x, atol=1e-12)
    np.testing.assert_allclose(y, np.fft.fft2(x, norm="ortho"), atol=1e-12)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValidationError, match="pad"):
        fft2(np.zeros((6, 8)))
    with pytest.raises(ValidationError, match="pad"):
        reconstruct(KSpace(np.zeros((1, 8, 12), complex)))


def test_reconstruct_basics():
    k = np.zeros((1, 8, 8), complex)
    k[0, 0, 0] = 8.0
    np.testing.assert_allclose(reconstruct(KSpace(k)).data, np.ones((1, 8, 8)), atol=1e-12)
    img = np.random.default_rng(0).random((8, 8))
    np.testing.assert_allclose(reconstruct(KSpace(fft2(img)[None])).data[0], img, atol=1e-12)


# --- simulate


def test_all_background_is_zero():
    q = mix(ProbabilityMaps.constant(4, 4, 0.0), TABLE)
    k = simulate(q, preset("t1ir", (4, 4))).data
    assert not k.any()


def test_uniform_phantom_concentrates_at_dc():
    q = mix(uniform("gm"), TABLE)
    k = simulate(q, preset("me_flash", (8, 8))).data
    for c in range(4):
        dc = abs(k[c, 0, 0])
        off = k[c].copy()
        off[0, 0] = 0
        assert np.abs(off).max() <= 1e-10 * dc


@pytest.mark.parametrize("tissue", ["csf", "gm", "wm"])
def test_ernst_steady_state(tissue):
    q = mix(uniform(tissue), TABLE)
    seq = preset("me_flash", (8, 8))
    k = simulate(q, seq).data
    p = TABLE.tissue(tissue)
    a = seq.flip
    e1 = math.exp(-seq.tr / p.t1)
    t2s = 1 / (1 / p.t2 + 1 / p.t2_prime)
    for c, te in enumerate(seq.echo_times):
        want = p.pd * math.sin(a) * (1 - e1) / (1 - e1 * math.cos(a)) * math.exp(-te / t2s)
        got = abs(k[c, 0, 0]) / math.sqrt(64)
        assert abs(got - want) <= 1e-6 * want


def test_pd_linearity():
    m = synth_phantom(1, 8)
    q = mix(m, TABLE)
    q2 = QuantitativeMaps(q.qt1, q.qt2, q.qt2_prime, 0.5 * q.pd, q.d, background_mask=q.background_mask)
    seq = preset("dir", (8, 8))
    np.testing.assert_allclose(simulate(q2, seq).data, 0.5 * simulate(q, seq).data, atol=1e-12)


def test_shift_theorem():
    m = synth_phantom(2, 8)
    q = mix(m, TABLE)
    shifted = mix(ProbabilityMaps.from_stack(np.roll(m.stack(), 1, axis=2)), TABLE)
    seq = preset("t2prep", (8, 8))
    k0, k1 = simulate(q, seq).data, simulate(shifted, seq).data
    kx = np.arange(8)
    np.testing.assert_allclose(k1, k0 * np.exp(-2j * np.pi * kx / 8)[None, None, :], atol=1e-10)


def test_idealized_round_trip_equals_echo_amplitude():
    m = synth_phantom(3, 8)
    q = mix(m, TABLE)
    for name in PRESET_NAMES:
        seq = preset(name, (8, 8))
        img = reconstruct(simulate(q, seq)).data
        for c in range(seq.n_contrasts):
            np.testing.assert_allclose(img[c], np.abs(echo_image(q, seq, c)), atol=1e-10)


def test_intra_readout_decay_differs_but_stays_close():
    q = mix(synth_phantom(1, 8), TABLE)
    seq = preset("me_flash", (8, 8))
    a = simulate(q, seq, "idealized").data
    b = simulate(q, seq, "intra_readout_decay").data
    assert not np.allclose(a, b)
    assert np.linalg.norm(a - b) < 0.2 * np.linalg.norm(a)
    with pytest.raises(ValidationError):
        simulate(q, seq, "bogus")


def test_thread_count_invariance():
    q = mix(synth_phantom(1, 8), TABLE)
    seq = preset("t1ir", (8, 8))
    a = simulate(q, seq, threads=1).data
    for t in (2, 3, 4):
        assert np.array_equal(a, simulate(q, seq, threads=t).data)


def test_voxel_echo_matches_isochromat_oracle():
    m = synth_phantom(1, 8)
    q = mix(m, TABLE)
    seq = build_flash((4, 4), echo_times=(4.0, 9.0), dummies=30, name="short")
    q4 = QuantitativeMaps(*(q.param(n)[2:6, 2:6] for n in ("t1", "t2", "t2_prime", "pd", "d")))
    line = seq.events.index(next(e for e in seq.events if isinstance(e, Adc)))
    first_line = seq.events[line].line
    # events up to and including the first readout row of each echo
    for c, te in enumerate(seq.echo_times):
        cut = next(i for i, e in enumerate(seq.events) if isinstance(e, Adc) and e.contrast == c)
        prog = list(seq.events[: cut + 1])
        got = echo_image(q4, seq, c, first_line)
        for y in range(4):
            for x in range(4):
                ref = epg.isochromat_oracle(prog, 1024, q4.qt1[y, x], q4.qt2[y, x], q4.pd[y, x])[-1]
                ref *= math.exp(-te / q4.qt2_prime[y, x])
                assert abs(got[y, x] - ref) <= 1e-3 * max(q4.pd[y, x], 1e-12)


def test_dims_must_match():
    q = mix(synth_phantom(1, 8), TABLE)
    with pytest.raises(ValidationError):
        simulate(q, preset("t1ir", (4, 4)))


# --- stacks


def test_stack_sizes_and_order():
    m = synth_phantom(1, 8)
    seqs = [preset(n, (8, 8)) for n in PRESET_NAMES]
    st24 = simulate_stack(m, TABLE, seqs)
    assert len(st24) == 24 and st24.images.shape == (24, 8, 8)
    assert st24.labels[:5] == (("t1ir", 0), ("t1ir", 1), ("t1ir", 2), ("t1ir", 3), ("me_flash", 0))
    one = simulate_stack(m, TABLE, [preset("t1ir", (8, 8), echo_times=(4.0,))])
    assert len(one) == 1
    rev = simulate_stack(m, TABLE, seqs[::-1])
    np.testing.assert_array_equal(rev.select(st24.labels).images, st24.images)
    with pytest.raises(ValidationError):
        simulate_stack(m, TABLE, [])


def test_stack_files_round_trip(tmp_path):
    s = simulate_stack(synth_phantom(1, 8), TABLE, [preset("flair", (8, 8))])
    write_stack(s, tmp_path)
    r = read_stack(tmp_path)
    assert r.labels == s.labels
    np.testing.assert_array_equal(r.kspace, s.kspace)
    np.testing.assert_array_equal(r.images, s.images)
    head = (tmp_path / "flair_e0.pgm").read_bytes()[:15]
    assert head.startswith(b"P5\n8 8\n65535\n")


def test_flair_suppresses_csf():
    seq = preset("flair", (8, 8))
    csf = simulate_stack(uniform("csf"), TABLE, [seq]).images.max()
    gm = simulate_stack(uniform("gm"), TABLE, [seq]).images.max()
    assert csf <= 0.02 * gm


def test_compile_program_slots():
    prog = compile_program(preset("me_flash", (4, 4)))
    assert prog.n_contrasts == 4
