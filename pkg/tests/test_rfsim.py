import logging

import numpy as np
import pytest
from scipy import stats

from rfsr.dsp import amplitude_spectrum, envelope, measure_bandwidth
from rfsr.errors import ConfigError, DataError
from rfsr.metrics import fwhm
from rfsr.rfsim import (
    SPEED_OF_SOUND,
    ExcitationsConfig,
    ExcitationSpec,
    LineMeta,
    PhantomConfig,
    PhantomKind,
    PhantomSpec,
    ProbeSpec,
    RfLine,
    build_dataset,
    generate_phantom,
    kernel_center,
    simulate_pairs,
    simulate_rf,
    synth_excitation,
    synth_probe_impulse,
)

PROBE = ProbeSpec()
NARROW, WIDE = ExcitationsConfig().specs(PROBE)
SMALL = PhantomConfig(
    n_scatterers=100, n_lines=4, line_length=256,
    n_train=2, n_val=1, n_test=1, n_point_phantoms=1,
)


def single_scatterer(depth_m, lateral_m=0.0, amplitude=1.0):
    return PhantomSpec(
        PhantomKind.POINT_TARGETS, np.array([[depth_m, lateral_m, amplitude]]), [], 0, 0.0192, (0.002, 0.045)
    )


def test_probe_defaults():
    assert PROBE.fc == 5.2e6
    assert PROBE.fs == 20.832e6


def test_probe_below_nyquist_rejected():
    with pytest.raises(ConfigError, match="Nyquist"):
        ProbeSpec(fs=10e6)


def test_excitation_bandwidths():
    assert measure_bandwidth(synth_excitation(NARROW), PROBE.fs, PROBE.fc).fractional == pytest.approx(0.6, rel=0.02)
    assert measure_bandwidth(synth_excitation(WIDE), PROBE.fs, PROBE.fc).fractional == pytest.approx(1.2, rel=0.02)


def test_probe_impulse_bandwidth():
    bw = measure_bandwidth(synth_probe_impulse(PROBE), PROBE.fs, PROBE.fc)
    assert bw.fractional == pytest.approx(1.2, rel=0.02)


def test_pulses_have_unit_spectral_peak():
    for pulse in (synth_excitation(NARROW), synth_excitation(WIDE), synth_probe_impulse(PROBE)):
        assert amplitude_spectrum(pulse, PROBE.fs, 1 << 14)[1].max() == pytest.approx(1.0)


def test_narrow_excitation_is_longer():
    assert NARROW.sigma_t > WIDE.sigma_t


def test_aliasing_excitation_rejected():
    with pytest.raises(ConfigError, match="aliases"):
        ExcitationSpec.for_bandwidth(5.2e6, 12e6, 1.2)


def test_short_excitation_pulse_rejected():
    with pytest.raises(ConfigError, match="Nyquist"):
        ExcitationSpec(sigma_t=2e-8, fc=5.2e6, fs=20.832e6, target_frac_bw=0.6)
    assert ExcitationSpec(sigma_t=NARROW.sigma_t, fc=PROBE.fc, fs=PROBE.fs, target_frac_bw=0.6) == NARROW


def test_speckle_phantom_statistics():
    cfg = PhantomConfig(max_cysts=1, cyst_radius_m=(0.002, 0.002))
    phantom = generate_phantom(PhantomKind.SPECKLE_CYST, 5000, 7, cfg)
    depth, lateral, amp = phantom.scatterers.T
    z_min, z_max = phantom.depth_range_m
    assert np.all((depth >= z_min) & (depth <= z_max))
    assert np.all(np.abs(lateral) <= cfg.width_m / 2)

    (cyst,) = phantom.cyst_regions
    inside = (depth - cyst.depth_m) ** 2 + (lateral - cyst.lateral_m) ** 2 <= cyst.radius_m**2
    assert stats.kstest(amp[~inside], "rayleigh").pvalue > 1e-3
    assert stats.kstest((lateral + cfg.width_m / 2) / cfg.width_m, "uniform").pvalue > 1e-3
    assert np.mean(amp[inside]) < 0.2 * np.mean(amp[~inside])


def test_phantom_is_deterministic():
    a = generate_phantom("speckle_cyst", 300, 11)
    b = generate_phantom("speckle_cyst", 300, 11)
    c = generate_phantom("speckle_cyst", 300, 12)
    assert np.array_equal(a.scatterers, b.scatterers)
    assert not np.array_equal(a.scatterers, c.scatterers)


def test_point_target_phantom():
    phantom = generate_phantom(PhantomKind.POINT_TARGETS, 5, 0)
    depth, lateral, amp = phantom.scatterers.T
    assert len(depth) == 5
    assert np.all(np.diff(depth) > 0)
    assert np.all(lateral == 0) and np.all(amp == 1)
    assert phantom.summary()["targets"][0] == [depth[0], 0.0]


def test_phantom_needs_scatterers():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomKind.SPECKLE_CYST, 0, 0)


def test_echo_delay():
    depth = 0.02
    (line,) = simulate_rf(single_scatterer(depth), PROBE, NARROW, n_lines=1, length=1536)
    expected = 2 * depth / SPEED_OF_SOUND * PROBE.fs
    assert abs(int(np.argmax(envelope(line.samples))) - round(expected)) <= 1


def test_narrow_band_echo_is_wider():
    phantom = single_scatterer(0.02)
    (low,) = simulate_rf(phantom, PROBE, NARROW, 1, 1536)
    (high,) = simulate_rf(phantom, PROBE, WIDE, 1, 1536)
    assert fwhm(envelope(low.samples), PROBE.fs).seconds > fwhm(envelope(high.samples), PROBE.fs).seconds


def test_simulation_is_linear():
    a = single_scatterer(0.015, amplitude=0.7)
    b = single_scatterer(0.0213, amplitude=1.3)
    both = PhantomSpec(a.kind, np.vstack([a.scatterers, b.scatterers]), [], 0, a.width_m, a.depth_range_m)
    (la,), (lb,), (lab,) = (simulate_rf(p, PROBE, WIDE, 1, 1024) for p in (a, b, both))
    assert np.allclose(la.samples + lb.samples, lab.samples, atol=1e-12)

    doubled = single_scatterer(0.015, amplitude=1.4)
    (ld,) = simulate_rf(doubled, PROBE, WIDE, 1, 1024)
    assert np.allclose(ld.samples, 2 * la.samples, atol=1e-12)


def test_pairs_differ_only_by_excitation():
    cfg = PhantomConfig(n_scatterers=200, n_lines=4)
    phantom = generate_phantom(PhantomKind.SPECKLE_CYST, 200, 3, cfg)
    e_narrow, e_wide = synth_excitation(NARROW), synth_excitation(WIDE)
    h = synth_probe_impulse(PROBE)
    c_low = kernel_center(np.convolve(h, e_narrow))
    c_high = kernel_center(np.convolve(h, e_wide))
    shift = c_low - c_high

    for low, high in simulate_pairs(phantom, PROBE, NARROW, WIDE, cfg):
        assert low.meta.line_index == high.meta.line_index
        assert (low.meta.band, high.meta.band) == ("low", "high")
        a = np.convolve(low.samples, e_wide)
        b = np.convolve(high.samples, e_narrow)
        j = np.arange(100, cfg.line_length - 100)
        scale = np.abs(a).max()
        assert np.max(np.abs(a[j] - b[j + shift])) <= 1e-9 * scale


def test_empty_lines_logged_once(caplog):
    with caplog.at_level(logging.WARNING, logger="rfsr.rfsim"):
        simulate_rf(single_scatterer(0.005), PROBE, NARROW, n_lines=5, length=512, acceptance_width_m=0.0006)
    warnings = [r for r in caplog.records if r.levelno == logging.WARNING]
    assert len(warnings) == 1
    assert "4 of 5" in warnings[0].getMessage()


def test_rf_line_rejects_non_finite():
    with pytest.raises(DataError):
        RfLine(np.array([0.0, np.nan]), PROBE.fs, LineMeta("p", 0, "low"))


def test_build_dataset_layout():
    data = build_dataset(PROBE, ExcitationsConfig(), SMALL, seed=5)
    assert len(data.pairs) == 5 * 4
    assert data.line_length == 256
    assert data.splits.count("train") == 8
    assert data.splits.count("test") == 8
    assert np.abs(data.high()).max() == pytest.approx(1.0)
    assert data.info["amplitude_scale"] > 0
    assert data.info["excitations"]["wide"]["measured_frac_bw"] == pytest.approx(1.2, rel=0.02)
    kinds = [p["kind"] for p in data.phantoms]
    assert kinds.count("point_targets") == 1
    test = data.select("test")
    assert {p["split"] for p in test.phantoms} == {"test"}
    assert len(test.lines_of(test.phantoms[0]["id"])) == 4


def test_build_dataset_is_deterministic():
    a = build_dataset(PROBE, ExcitationsConfig(), SMALL, seed=5)
    b = build_dataset(PROBE, ExcitationsConfig(), PhantomConfig(**{**vars(SMALL), "workers": 3}), seed=5)
    c = build_dataset(PROBE, ExcitationsConfig(), SMALL, seed=6)
    assert np.array_equal(a.low(), b.low())
    assert np.array_equal(a.high(), b.high())
    assert not np.array_equal(a.high(), c.high())
