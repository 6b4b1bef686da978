import json
import math

import numpy as np
import pytest
from scipy import stats

from zfit.circuit import Role, parse_circuit
from zfit.datagen import (
    DEFAULT_CIRCUITS,
    GenerationConfig,
    generate_dataset,
    id_sort_key,
    load_dataset,
    sample_parameters,
    synthesize,
    write_dataset,
)
from zfit.loss import LossKind
from zfit.metrics import chi_squared_arrays
from zfit.solver import fit_once


class TestConfig:
    def test_default_grid(self):
        cfg = GenerationConfig()
        f = cfg.frequencies()
        assert cfg.n_points == 64
        assert f[0] == pytest.approx(1e-3) and f[-1] == pytest.approx(1e6)
        np.testing.assert_allclose(np.diff(np.log10(f)), 1 / 7, rtol=1e-9)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(freq_min=10.0, freq_max=1.0),
            dict(points_per_decade=1, freq_min=1.0, freq_max=100.0),
            dict(noise_sigma_rel=-0.1),
            dict(circuits=()),
            dict(circuits=("R1-[",)),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GenerationConfig(**kwargs)


class TestSampling:
    def test_ranges(self):
        m = parse_circuit("R1-[P2,R3]")
        rng = np.random.default_rng(0)
        draws = np.array([sample_parameters(m, rng) for _ in range(2000)])
        lo = np.array([1, 1e-6, 0.3, 10])
        hi = np.array([10, 1e-3, 1, 1e5])
        assert np.all(draws >= lo) and np.all(draws <= hi)

    def test_r3_is_log_uniform(self):
        m = parse_circuit("R1-[P2,R3]")
        rng = np.random.default_rng(1)
        r3 = np.array([sample_parameters(m, rng)[3] for _ in range(10_000)])
        cdf = lambda x: np.log(x / 10) / np.log(1e4)
        assert stats.kstest(r3, cdf).pvalue > 0.01

    def test_zero_noise_repeat(self):
        a, _ = generate_dataset(GenerationConfig(spectra_per_circuit=3, noise_sigma_rel=0.0))
        b, _ = generate_dataset(GenerationConfig(spectra_per_circuit=3, noise_sigma_rel=0.0))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.true_params, y.true_params)
            assert x.spectrum == y.spectrum


class TestSynthesize:
    def test_noiseless_is_exact(self):
        m = parse_circuit("R1-[P2,R3]-P4")
        cfg = GenerationConfig(noise_sigma_rel=0.0)
        p = sample_parameters(m, np.random.default_rng(2))
        ls = synthesize(m, p, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(ls.spectrum.z, m.evaluate(p, 2 * np.pi * cfg.frequencies()))

    def test_resistor_noise_statistics(self):
        # 10,000 grid points in one spectrum
        cfg = GenerationConfig(circuits=("R1",), points_per_decade=1111)
        assert cfg.n_points == 10_000
        ls = synthesize(parse_circuit("R1"), [5.0], cfg, np.random.default_rng(4))
        zr = ls.spectrum.z_real
        assert zr.mean() == pytest.approx(5.0, rel=0.05 * 0.002)
        assert zr.std(ddof=1) == pytest.approx(0.002 * 5.0, rel=0.05)
        np.testing.assert_array_equal(ls.spectrum.z_imag, 0.0)

    def test_noise_independent_across_points(self):
        cfg = GenerationConfig(circuits=("R1",), points_per_decade=1111)
        zr = synthesize(parse_circuit("R1"), [5.0], cfg, np.random.default_rng(5)).spectrum.z_real
        assert abs(np.corrcoef(zr[:-1], zr[1:])[0, 1]) < 0.05

    def test_true_params_unperturbed(self):
        m = parse_circuit("R1-[P2,R3]")
        p = np.array([2.0, 1e-5, 0.7, 300.0])
        ls = synthesize(m, p, GenerationConfig(), np.random.default_rng(6))
        np.testing.assert_array_equal(ls.true_params, p)

    def test_exponents_fixed_by_default(self):
        # a lone CPE has constant phase -alpha*pi/2 unless alpha itself is perturbed
        m = parse_circuit("P1")
        p = [1e-4, 0.6]
        ls = synthesize(m, p, GenerationConfig(), np.random.default_rng(7))
        np.testing.assert_allclose(ls.spectrum.phase, -0.6 * math.pi / 2, rtol=1e-12)
        moved = synthesize(m, p, GenerationConfig(perturb_exponents=True), np.random.default_rng(7))
        assert np.ptp(moved.spectrum.phase) > 0


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(GenerationConfig(spectra_per_circuit=10, rng_seed=3))


class TestDataset:
    def test_counts_and_ids(self, small_dataset):
        spectra, manifest = small_dataset
        assert len(spectra) == 60
        assert [s.id for s in spectra][:3] == ["0-0", "0-1", "0-2"]
        assert spectra[-1].id == "5-9"
        assert manifest["seed"] == 3
        assert [e["id"] for e in manifest["spectra"]] == [s.id for s in spectra]
        assert manifest["spectra"][0]["true_params"].keys() == {"R1", "P2_w", "P2_n", "R3"}

    def test_magnitudes_positive_and_finite(self, small_dataset):
        for ls in small_dataset[0]:
            mag = ls.spectrum.magnitude
            assert np.all(np.isfinite(mag)) and np.all(mag > 0)

    def test_noise_scale_calibration(self, small_dataset):
        spectra, _ = small_dataset
        cfg = GenerationConfig()
        ratios = []
        for ls in spectra:
            clean = ls.model.evaluate(ls.true_params, ls.spectrum.omega)
            ratios.append(chi_squared_arrays(ls.spectrum.z, clean) / (2 * cfg.n_points * cfg.noise_sigma_rel**2))
        assert 1 / 3 <= np.mean(ratios) <= 3

    def test_ground_truth_fit(self):
        spectra, _ = generate_dataset(GenerationConfig(spectra_per_circuit=3, noise_sigma_rel=0.0))
        for ls in spectra:
            res = fit_once(ls.model, ls.spectrum, LossKind.X2, ls.true_params)
            assert res.loss < 1e-12

    def test_jobs_do_not_change_output(self):
        cfg = GenerationConfig(spectra_per_circuit=2)
        a, ma = generate_dataset(cfg)
        b, mb = generate_dataset(cfg, jobs=2)
        assert ma == mb
        assert all(x.spectrum == y.spectrum for x, y in zip(a, b))

    def test_desk_count(self):
        assert GenerationConfig().spectra_per_circuit * len(DEFAULT_CIRCUITS) == 600

    def test_byte_identical_files(self, tmp_path):
        cfg = GenerationConfig(spectra_per_circuit=2, rng_seed=7)
        for name in ("a", "b"):
            write_dataset(tmp_path / name, *generate_dataset(cfg))
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 13
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_round_trip(self, tmp_path):
        spectra, manifest = generate_dataset(GenerationConfig(spectra_per_circuit=2))
        write_dataset(tmp_path, spectra, manifest)
        loaded, m2 = load_dataset(tmp_path)
        assert m2 == json.loads(json.dumps(manifest))
        for x, y in zip(spectra, loaded):
            assert x.id == y.id
            np.testing.assert_array_equal(x.true_params, y.true_params)
            assert x.spectrum == y.spectrum

    def test_different_seeds_differ(self):
        a, _ = generate_dataset(GenerationConfig(spectra_per_circuit=1, rng_seed=0))
        b, _ = generate_dataset(GenerationConfig(spectra_per_circuit=1, rng_seed=1))
        assert not np.array_equal(a[0].true_params, b[0].true_params)


def test_id_sort_is_numeric():
    ids = ["1-10", "1-2", "0-11", "10-0", "2-0"]
    assert sorted(ids, key=id_sort_key) == ["0-11", "1-2", "1-10", "2-0", "10-0"]


def test_schema_roles_in_default_circuits():
    for text in DEFAULT_CIRCUITS:
        schema = parse_circuit(text).schema
        assert schema[0].lower in (1, 1e-6)
        assert sum(d.role is Role.CPE_EXPONENT for d in schema) == text.count("P")
