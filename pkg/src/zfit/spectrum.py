"""Impedance spectra and their CSV representation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = ("freq_hz", "z_real", "z_imag")


class SpectrumFormatError(ValueError):
    """Raised when a spectrum file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Frequency grid plus rectangular complex impedance samples.

    Frequencies are in Hz and must be positive and strictly increasing.
    Polar views (``magnitude``, ``phase``) are derived on demand; phase is
    in radians.
    """

    freqs: np.ndarray
    z_real: np.ndarray
    z_imag: np.ndarray

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=float)
        z_real = np.asarray(self.z_real, dtype=float)
        z_imag = np.asarray(self.z_imag, dtype=float)
        if freqs.ndim != 1 or z_real.shape != freqs.shape or z_imag.shape != freqs.shape:
            raise ValueError("freqs, z_real and z_imag must be 1-D arrays of equal length")
        if freqs.size == 0:
            raise ValueError("spectrum is empty")
        if not np.all(freqs > 0):
            raise ValueError("frequencies must be strictly positive")
        if np.any(np.diff(freqs) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        for arr in (freqs, z_real, z_imag):
            arr.setflags(write=False)
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "z_real", z_real)
        object.__setattr__(self, "z_imag", z_imag)

    @classmethod
    def from_complex(cls, freqs, z) -> "Spectrum":
        z = np.asarray(z, dtype=complex)
        return cls(freqs, z.real.copy(), z.imag.copy())

    def __len__(self) -> int:
        return self.freqs.size

    @property
    def z(self) -> np.ndarray:
        return self.z_real + 1j * self.z_imag

    @property
    def omega(self) -> np.ndarray:
        return 2 * np.pi * self.freqs

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.z_real, self.z_imag)

    @property
    def phase(self) -> np.ndarray:
        return np.arctan2(self.z_imag, self.z_real)

    def same_grid(self, other: "Spectrum") -> bool:
        return self.freqs.shape == other.freqs.shape and np.array_equal(self.freqs, other.freqs)

    def __eq__(self, other):
        if not isinstance(other, Spectrum):
            return NotImplemented
        return (
            self.same_grid(other)
            and np.array_equal(self.z_real, other.z_real)
            and np.array_equal(self.z_imag, other.z_imag)
        )

    __hash__ = None

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        for f, re, im in zip(self.freqs, self.z_real, self.z_imag):
            buf.write(f"{f:.17g},{re:.17g},{im:.17g}\n")
        return buf.getvalue()


def write_spectrum_csv(path, spectrum: Spectrum) -> None:
    Path(path).write_text(spectrum.to_csv_text(), encoding="utf-8")


def parse_spectrum_csv(text: str) -> Spectrum:
    """Parse ``freq_hz,z_real,z_imag`` CSV text. Errors carry 1-based line numbers."""
    reader = csv.reader(io.StringIO(text))
    rows = []
    header_seen = False
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        cells = [cell.strip() for cell in row]
        if not header_seen:
            if tuple(cells) != CSV_HEADER:
                raise SpectrumFormatError(
                    f"expected header {','.join(CSV_HEADER)!r}, got {','.join(cells)!r}", lineno
                )
            header_seen = True
            continue
        if len(cells) != 3:
            raise SpectrumFormatError(f"expected 3 columns, got {len(cells)}", lineno)
        try:
            values = [float(c) for c in cells]
        except ValueError:
            raise SpectrumFormatError(f"non-numeric value in {row!r}", lineno) from None
        if not all(np.isfinite(values)):
            raise SpectrumFormatError("non-finite value", lineno)
        if values[0] <= 0:
            raise SpectrumFormatError("frequency must be positive", lineno)
        if rows and values[0] <= rows[-1][0]:
            raise SpectrumFormatError("frequencies must be strictly increasing", lineno)
        rows.append(values)
    if not header_seen:
        raise SpectrumFormatError("missing header", 1)
    if len(rows) < 2:
        raise SpectrumFormatError("at least two frequency points are required")
    data = np.array(rows)
    return Spectrum(data[:, 0], data[:, 1], data[:, 2])


def read_spectrum_csv(path) -> Spectrum:
    return parse_spectrum_csv(Path(path).read_text(encoding="utf-8"))
