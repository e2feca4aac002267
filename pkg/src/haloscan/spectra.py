"""Spectrum containers and the on-disk columnar format.

A spectrum file is plain text: a version line, ``# key value`` header
lines, then one PSD sample per line.  The format is deliberately dumb so
that spectra diff cleanly and survive language changes.  Frequencies refer
to bin centers; bin k sits at ``nu_start + k * bin_width``.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_MAGIC = "haloscan-spectrum"

# Header keys that are structural rather than free-form metadata.
_CORE_KEYS = ("step_id", "nu_start_hz", "bin_width_hz", "n_bins", "n_averages")


@dataclass
class RawSpectrum:
    """One averaged power spectrum plus acquisition metadata.

    ``psd`` is gain-scaled (quanta times the chain power gain), one value
    per analysis bin.  ``metadata`` carries measured per-step diagnostics
    (cavity geometry, squeezing level, probe power, frequency drift);
    values must be str, int, float, or bool.
    """

    step_id: int
    nu_start_hz: float
    bin_width_hz: float
    psd: np.ndarray
    n_averages: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.psd = np.asarray(self.psd, dtype=float)
        if self.psd.ndim != 1 or self.psd.size == 0:
            raise DataError("psd must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.psd)):
            raise DataError(f"step {self.step_id}: psd contains non-finite samples")
        if np.any(self.psd < 0.0):
            raise DataError(f"step {self.step_id}: psd contains negative samples")
        if self.bin_width_hz <= 0:
            raise DataError(f"bin width must be > 0, got {self.bin_width_hz!r}")
        if self.n_averages < 1:
            raise DataError(f"n_averages must be >= 1, got {self.n_averages!r}")

    @property
    def n_bins(self):
        return self.psd.size

    @property
    def frequencies(self):
        """Bin-center frequencies, Hz."""
        return self.nu_start_hz + np.arange(self.n_bins) * self.bin_width_hz

    def detunings(self, nu_c):
        return self.frequencies - nu_c


@dataclass
class CalibrationSet:
    """The five-spectrum calibration block taken at one tuning step.

    meas1: far-detuned, squeezer off (input-field benchmark).
    meas2: on resonance, squeezer on.
    meas3: on resonance, squeezer off.
    hot, cold: matched loads at t_hot_k / t_cold_k replacing the cavity path.
    """

    step_id: int
    meas1: RawSpectrum
    meas2: RawSpectrum
    meas3: RawSpectrum
    hot: RawSpectrum
    cold: RawSpectrum
    t_hot_k: float
    t_cold_k: float

    ROLES = ("meas1", "meas2", "meas3", "hot", "cold")

    def spectra(self):
        return {role: getattr(self, role) for role in self.ROLES}


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _parse_value(text):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        as_int = int(text)
    except ValueError:
        pass
    else:
        return as_int
    try:
        return float(text)
    except ValueError:
        return text


def write_spectrum(spectrum, path):
    """Write one spectrum in the versioned columnar format."""
    lines = [f"{_MAGIC} v{FORMAT_VERSION}\n"]
    header = {
        "step_id": spectrum.step_id,
        "nu_start_hz": spectrum.nu_start_hz,
        "bin_width_hz": spectrum.bin_width_hz,
        "n_bins": spectrum.n_bins,
        "n_averages": spectrum.n_averages,
    }
    for key, value in header.items():
        lines.append(f"# {key} {_format_value(value)}\n")
    for key in sorted(spectrum.metadata):
        if key in _CORE_KEYS:
            raise DataError(f"metadata key {key!r} collides with a core header key")
        lines.append(f"# {key} {_format_value(spectrum.metadata[key])}\n")
    buf = io.StringIO()
    np.savetxt(buf, spectrum.psd, fmt="%.17g")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.writelines(lines)
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_spectrum(path):
    """Read a spectrum file; raises DataError on any format problem."""
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open spectrum: {exc}") from exc
    with fh:
        magic = fh.readline().strip()
        if not magic.startswith(_MAGIC):
            raise DataError(f"{path}: not a spectrum file (got {magic!r})")
        version = magic[len(_MAGIC):].strip()
        if version != f"v{FORMAT_VERSION}":
            raise DataError(f"{path}: unsupported format version {version!r}")
        header = {}
        pos = fh.tell()
        while True:
            line = fh.readline()
            if not line.startswith("#"):
                break
            try:
                key, value = line[1:].strip().split(" ", 1)
            except ValueError as exc:
                raise DataError(f"{path}: malformed header line {line!r}") from exc
            header[key] = _parse_value(value)
            pos = fh.tell()
        fh.seek(pos)
        try:
            psd = np.loadtxt(fh, dtype=float, ndmin=1)
        except ValueError as exc:
            raise DataError(f"{path}: malformed PSD block: {exc}") from exc
    missing = [key for key in _CORE_KEYS if key not in header]
    if missing:
        raise DataError(f"{path}: missing header keys {missing}")
    core = {key: header.pop(key) for key in _CORE_KEYS}
    if core["n_bins"] != psd.size:
        raise DataError(
            f"{path}: header declares {core['n_bins']} bins, file holds {psd.size}"
        )
    try:
        return RawSpectrum(
            step_id=int(core["step_id"]),
            nu_start_hz=float(core["nu_start_hz"]),
            bin_width_hz=float(core["bin_width_hz"]),
            psd=psd,
            n_averages=int(core["n_averages"]),
            metadata=header,
        )
    except DataError:
        raise
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: inconsistent header: {exc}") from exc


def write_calibration_set(calset, directory):
    """Write the five calibration spectra into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for role, spectrum in calset.spectra().items():
        write_spectrum(spectrum, os.path.join(directory, f"{role}.spec"))


def read_calibration_set(directory):
    spectra = {}
    for role in CalibrationSet.ROLES:
        path = os.path.join(directory, f"{role}.spec")
        if not os.path.exists(path):
            raise DataError(f"calibration set {directory}: missing {role}.spec")
        spectra[role] = read_spectrum(path)
    step_ids = {s.step_id for s in spectra.values()}
    if len(step_ids) != 1:
        raise DataError(f"calibration set {directory}: mixed step ids {sorted(step_ids)}")
    hot = spectra["hot"]
    try:
        t_hot = float(hot.metadata["load_temp_k"])
        t_cold = float(spectra["cold"].metadata["load_temp_k"])
    except KeyError as exc:
        raise DataError(f"calibration set {directory}: load spectra lack load_temp_k") from exc
    return CalibrationSet(
        step_id=hot.step_id,
        t_hot_k=t_hot,
        t_cold_k=t_cold,
        **spectra,
    )
