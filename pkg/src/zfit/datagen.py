"""Synthetic EIS datasets with per-point Gaussian component noise."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .circuit import CircuitModel, Role, draw_parameters, parse_circuit
from .spectrum import Spectrum, read_spectrum_csv, write_spectrum_csv

DEFAULT_CIRCUITS = (
    "R1-[P2,R3]",
    "R1-[P2,R3]-[P4,R5]",
    "R1-[P2,R3]-P4",
    "R1-[P2,R3]-[P4,R5]-P6",
    "L1-R2-[P3,R4]",
    "L1-R2-[P3,R4]-[P5,R6]",
)
MAX_NOISE_REDRAWS = 100
MANIFEST_NAME = "manifest.json"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    circuits: tuple = DEFAULT_CIRCUITS
    spectra_per_circuit: int = 100
    freq_min: float = 1e-3
    freq_max: float = 1e6
    points_per_decade: int = 7
    noise_sigma_rel: float = 0.002
    rng_seed: int = 0
    perturb_exponents: bool = False

    def __post_init__(self):
        object.__setattr__(self, "circuits", tuple(self.circuits))
        if not self.circuits:
            raise ValueError("at least one circuit is required")
        if not 0 < self.freq_min < self.freq_max:
            raise ValueError("need 0 < freq_min < freq_max")
        if self.spectra_per_circuit < 1:
            raise ValueError("spectra_per_circuit must be positive")
        if self.n_points < 10:
            raise ValueError("frequency grid needs at least 10 points")
        if self.noise_sigma_rel < 0:
            raise ValueError("noise_sigma_rel must be non-negative")
        for c in self.circuits:
            parse_circuit(c)

    @property
    def n_points(self) -> int:
        decades = math.log10(self.freq_max / self.freq_min)
        return int(round(decades * self.points_per_decade)) + 1

    def frequencies(self) -> np.ndarray:
        return np.logspace(math.log10(self.freq_min), math.log10(self.freq_max), self.n_points)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["circuits"] = list(self.circuits)
        return d


@dataclass(frozen=True, eq=False)
class LabeledSpectrum:
    id: str
    circuit: str
    true_params: np.ndarray
    spectrum: Spectrum

    @property
    def model(self) -> CircuitModel:
        return parse_circuit(self.circuit)


def spectrum_rng(seed: int, circuit_idx: int, seq_idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), circuit_idx, seq_idx]))


def sample_parameters(model: CircuitModel, rng: np.random.Generator) -> np.ndarray:
    return draw_parameters(model.schema, rng)


def synthesize(model: CircuitModel, params, config: GenerationConfig, rng, spectrum_id: str = "") -> LabeledSpectrum:
    """Spectrum from ``params`` with every component value perturbed independently at each point.

    Each value ``v`` becomes ``v * (1 + sigma * g)``, ``g ~ N(0, 1)``, drawn
    afresh per frequency point. Draws that make a value non-positive are redrawn.
    CPE exponents are dimensionless shape parameters and stay fixed unless
    ``config.perturb_exponents`` is set.
    """
    params = np.asarray(params, dtype=float)
    freqs = config.frequencies()
    sigma = config.noise_sigma_rel
    if sigma == 0:
        z = model.evaluate(params, 2 * np.pi * freqs)
    else:
        factors = 1.0 + sigma * rng.standard_normal((params.size, freqs.size))
        for _ in range(MAX_NOISE_REDRAWS):
            bad = factors <= 0
            if not bad.any():
                break
            factors[bad] = 1.0 + sigma * rng.standard_normal(int(bad.sum()))
        else:
            raise GenerationError("noise kept driving a parameter non-positive")
        if not config.perturb_exponents:
            for k, d in enumerate(model.schema):
                if d.role is Role.CPE_EXPONENT:
                    factors[k] = 1.0
        perturbed = params[:, None] * factors
        z = model.evaluate(list(perturbed), 2 * np.pi * freqs)
    return LabeledSpectrum(spectrum_id, str(model), params, Spectrum.from_complex(freqs, z))


def _generate_one(config: GenerationConfig, ci: int, si: int) -> LabeledSpectrum:
    model = parse_circuit(config.circuits[ci])
    rng = spectrum_rng(config.rng_seed, ci, si)
    params = sample_parameters(model, rng)
    return synthesize(model, params, config, rng, f"{ci}-{si}")


def build_manifest(config: GenerationConfig, spectra) -> dict:
    entries = []
    for ls in spectra:
        names = parse_circuit(ls.circuit).param_names
        entries.append(
            {
                "id": ls.id,
                "circuit": ls.circuit,
                "true_params": {n: float(v) for n, v in zip(names, ls.true_params)},
            }
        )
    return {"config": config.to_dict(), "seed": config.rng_seed, "spectra": entries}


def generate_dataset(config: GenerationConfig, jobs: int = 1):
    """All spectra for ``config`` plus their manifest.

    Ids are ``"{circuit_index}-{sequence_index}"``; output order is by
    (circuit_index, sequence_index) regardless of ``jobs``.
    """
    tasks = [(ci, si) for ci in range(len(config.circuits)) for si in range(config.spectra_per_circuit)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            spectra = list(pool.map(_generate_one, [config] * len(tasks), *zip(*tasks), chunksize=16))
    else:
        spectra = [_generate_one(config, ci, si) for ci, si in tasks]
    return spectra, build_manifest(config, spectra)


def id_sort_key(spectrum_id: str):
    head, _, tail = spectrum_id.partition("-")
    try:
        return (int(head), int(tail), "")
    except ValueError:
        return (math.inf, math.inf, spectrum_id)


def write_dataset(out_dir, spectra, manifest: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for ls in spectra:
        write_spectrum_csv(out / f"{ls.id}.csv", ls.spectrum)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return out


def load_dataset(data_dir):
    """Read a dataset directory written by :func:`write_dataset`."""
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
    spectra = []
    for entry in manifest["spectra"]:
        model = parse_circuit(entry["circuit"])
        truth = np.array([entry["true_params"][n] for n in model.param_names])
        spectrum = read_spectrum_csv(root / f"{entry['id']}.csv")
        spectra.append(LabeledSpectrum(entry["id"], entry["circuit"], truth, spectrum))
    spectra.sort(key=lambda ls: id_sort_key(ls.id))
    return spectra, manifest
