"""CXI/HDF5 scan files, the portable fixture format and run configuration.

The CXI layout follows the common convention: raw data under ``/entry_1``,
all derived results under a single output group (``/speckle_tracking`` by
default). Fixtures are a zero-dependency directory format (a ``meta`` text
file plus raw little-endian binaries) for shuttling scans between
implementations and tests.
"""

from __future__ import annotations

import configparser
import io
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import h5py
import numpy as np
from scipy.constants import c as _c, h as _h

from .data_model import Roi, ScanData

HC = _h * _c  # J*m

# Sane range for sample-detector distances; outside it we warn, not fail.
DISTANCE_RANGE = (1e-3, 100.0)


class CxiError(RuntimeError):
    pass


class MissingDataset(CxiError):
    def __init__(self, path: str):
        super().__init__(f"missing dataset: {path}")
        self.path = path


class ShapeMismatch(CxiError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"{name}: expected shape {expected}, found {found}")
        self.expected = expected
        self.found = found


class ReadOnlyFile(CxiError):
    pass


class FixtureError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class UnitSanityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CxiPaths:
    """Dataset paths inside a CXI file; all absolute."""

    data: str = "/entry_1/data_1/data"
    translation: str = "/entry_1/sample_1/geometry/translation"
    basis_vectors: str = "/entry_1/instrument_1/detector_1/basis_vectors"
    distance: str = "/entry_1/instrument_1/detector_1/distance"
    x_pixel_size: str = "/entry_1/instrument_1/detector_1/x_pixel_size"
    y_pixel_size: str = "/entry_1/instrument_1/detector_1/y_pixel_size"
    wavelength: str = "/entry_1/instrument_1/source_1/wavelength"
    energy: str = "/entry_1/instrument_1/source_1/energy"
    good_frames: str = "/speckle_tracking/good_frames"
    mask: str = "/speckle_tracking/mask"
    whitefield: str = "/speckle_tracking/whitefield"
    output_group: str = "/speckle_tracking"

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name).startswith("/"):
                raise ValueError(f"CXI path {f.name} must be absolute")


def _read_scalar(h5, path: str) -> float:
    if path not in h5:
        raise MissingDataset(path)
    return float(np.asarray(h5[path][()]).reshape(-1)[0])


def load_scan(path, paths: CxiPaths = CxiPaths(), roi: Roi | None = None) -> ScanData:
    """Read a scan from a CXI file.

    ``good_frames`` defaults to all-true when absent; the wavelength may be
    derived from a photon-energy dataset (``lambda = h*c / E``). When
    ``roi`` is given, frames are cropped to it (indices rebase to the ROI
    corner). Out-of-range distances warn rather than fail.
    """
    with h5py.File(path, "r") as h5:
        if paths.data not in h5:
            raise MissingDataset(paths.data)
        frames = h5[paths.data][()]
        if frames.ndim != 3:
            raise ShapeMismatch("data", "(N, SS, FS)", frames.shape)
        n = frames.shape[0]

        if paths.translation not in h5:
            raise MissingDataset(paths.translation)
        translations = np.asarray(h5[paths.translation][()], dtype=np.float64)
        if translations.shape != (n, 3):
            raise ShapeMismatch("translation", (n, 3), translations.shape)

        if paths.basis_vectors not in h5:
            raise MissingDataset(paths.basis_vectors)
        basis = np.asarray(h5[paths.basis_vectors][()], dtype=np.float64)
        if basis.shape != (n, 2, 3):
            raise ShapeMismatch("basis_vectors", (n, 2, 3), basis.shape)

        distance = _read_scalar(h5, paths.distance)
        x_pixel_size = _read_scalar(h5, paths.x_pixel_size)
        y_pixel_size = _read_scalar(h5, paths.y_pixel_size)
        if paths.wavelength in h5:
            wavelength = _read_scalar(h5, paths.wavelength)
        elif paths.energy in h5:
            wavelength = HC / _read_scalar(h5, paths.energy)
        else:
            raise MissingDataset(paths.wavelength)

        if paths.good_frames in h5:
            good = np.asarray(h5[paths.good_frames][()]).astype(bool)
            if good.shape != (n,):
                raise ShapeMismatch("good_frames", (n,), good.shape)
        else:
            good = np.ones(n, dtype=bool)

    if not DISTANCE_RANGE[0] <= distance <= DISTANCE_RANGE[1]:
        warnings.warn(
            f"distance {distance} m outside {DISTANCE_RANGE}; check units",
            UnitSanityWarning,
        )
    if roi is not None:
        frames = frames[:, roi.ss_min:roi.ss_max, roi.fs_min:roi.fs_max]

    return ScanData(
        frames=np.asarray(frames, dtype=np.float64),
        wavelength=wavelength,
        distance=distance,
        x_pixel_size=x_pixel_size,
        y_pixel_size=y_pixel_size,
        basis_vectors=basis,
        translations=translations,
        good_frames=good,
    )


def write_result(path, group: str, name: str, data) -> None:
    """Create or overwrite dataset ``group/name`` in the HDF5 file."""
    try:
        with h5py.File(path, "a") as h5:
            g = h5.require_group(group)
            if name in g:
                del g[name]
            g.create_dataset(name, data=data)
    except OSError as exc:
        raise ReadOnlyFile(f"cannot write {group}/{name} in {path}: {exc}") from exc


def read_result(path, group: str, name: str):
    with h5py.File(path, "r") as h5:
        full = f"{group.rstrip('/')}/{name}"
        if full not in h5:
            raise MissingDataset(full)
        return h5[full][()]


class CxiScanReader:
    """Lazy per-frame access to a CXI file, for streaming consumers."""

    def __init__(self, path, paths: CxiPaths = CxiPaths()):
        self.path = Path(path)
        self.paths = paths
        self._h5 = h5py.File(path, "r")
        if paths.data not in self._h5:
            self._h5.close()
            raise MissingDataset(paths.data)
        self._data = self._h5[paths.data]

    @property
    def n_frames(self) -> int:
        return self._data.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return tuple(self._data.shape[1:])

    def frame(self, n: int) -> np.ndarray:
        return np.asarray(self._data[n], dtype=np.float64)

    def close(self):
        self._h5.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Fixture format: directory with a `meta` key=value file and raw
# little-endian binaries (float64 for numeric fields, uint8 for flags).

_FIXTURE_ARRAYS = {
    "frames": "<f8",
    "translations": "<f8",
    "basis_vectors": "<f8",
    "good_frames": "|u1",
}
_FIXTURE_SCALARS = ("wavelength", "distance", "x_pixel_size", "y_pixel_size")


def save_fixture(scan: ScanData, dirpath) -> None:
    """Write a scan as a portable fixture directory (lossless)."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {getattr(scan, k)!r}" for k in _FIXTURE_SCALARS]
    for name, dtype in _FIXTURE_ARRAYS.items():
        arr = np.ascontiguousarray(np.asarray(getattr(scan, name)), dtype=dtype)
        lines.append(f"{name}.shape = {' '.join(str(s) for s in arr.shape)}")
        arr.tofile(d / f"{name}.bin")
    (d / "meta").write_text("\n".join(lines) + "\n")


def load_fixture(dirpath) -> ScanData:
    """Read a fixture directory back into a scan."""
    d = Path(dirpath)
    meta_path = d / "meta"
    if not meta_path.exists():
        raise FixtureError(f"missing meta file in {d}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FixtureError(f"malformed meta line: {line!r}")
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()

    values = {}
    for key in _FIXTURE_SCALARS:
        if key not in meta:
            raise FixtureError(f"meta missing key {key!r}")
        values[key] = float(meta[key])
    for name, dtype in _FIXTURE_ARRAYS.items():
        shape_key = f"{name}.shape"
        if shape_key not in meta:
            raise FixtureError(f"meta missing key {shape_key!r}")
        shape = tuple(int(tok) for tok in meta[shape_key].split())
        binpath = d / f"{name}.bin"
        if not binpath.exists():
            raise FixtureError(f"missing payload {binpath.name}")
        arr = np.fromfile(binpath, dtype=dtype)
        if arr.size != int(np.prod(shape)):
            raise FixtureError(f"truncated payload {binpath.name}: "
                               f"{arr.size} items for shape {shape}")
        values[name] = arr.reshape(shape)
    values["good_frames"] = values["good_frames"].astype(bool)
    return ScanData(**values)


# ---------------------------------------------------------------------------
# Run configuration: INI sections named after commands, typed values.

_FLOAT, _INT, _BOOL, _STR, _FLOATS = "float", "int", "bool", "str", "floats"

CONFIG_SCHEMA: dict[str, dict[str, str]] = {
    "simulate": {
        "shape_ss": _INT, "shape_fs": _INT, "wavelength": _FLOAT, "distance": _FLOAT,
        "z1_ss": _FLOAT, "z1_fs": _FLOAT, "x_pixel_size": _FLOAT, "y_pixel_size": _FLOAT,
        "aberrations": _STR, "whitefield": _STR, "peak_counts": _FLOAT,
        "whitefield_width": _FLOAT, "texture": _STR, "texture_contrast": _FLOAT,
        "texture_scale": _FLOAT, "hologram": _BOOL, "hologram_phase_rms": _FLOAT,
        "nx": _INT, "ny": _INT, "step_px": _FLOAT, "spiral": _BOOL,
        "poisson": _BOOL, "seed": _INT, "margin": _INT,
    },
    "make_whitefield": {},
    "make_mask": {"kappa": _FLOAT, "mad_floor": _FLOAT},
    "guess_roi": {"fraction": _FLOAT},
    "generate_pixel_map": {"defocus": _FLOAT, "z1_ss": _FLOAT, "z1_fs": _FLOAT},
    "fit_thon_rings": {
        "z1_min": _FLOAT, "z1_max": _FLOAT, "n_grid": _INT, "astigmatic": _BOOL,
        "t_min": _FLOAT, "t_max": _FLOAT,
    },
    "fit_defocus_registration": {
        "z1_min": _FLOAT, "z1_max": _FLOAT, "n_grid": _INT, "astigmatic": _BOOL,
    },
    "make_reference": {},
    "update_pixel_map": {
        "sigma": _FLOAT, "integrate": _BOOL, "quadratic_refinement": _BOOL,
        "window": _INT, "subpixel_grid": _FLOAT,
    },
    "update_translations": {"window": _INT},
    "calc_error": {},
    "run": {
        "max_iters": _INT, "tol": _FLOAT, "window_first": _INT, "window": _INT,
        "sigma_start": _FLOAT, "sigma_final": _FLOAT, "integrate": _BOOL,
        "quadratic_refinement": _BOOL, "translations_from": _INT,
    },
    "calculate_phase": {},
    "zernike": {"max_noll": _INT},
    "focus_profile": {"z_min": _FLOAT, "z_max": _FLOAT, "nz": _INT},
    "calculate_sample_thickness": {"delta": _FLOAT, "mu": _FLOAT, "zbar": _FLOAT,
                                   "pixel": _FLOAT},
    "split_half_recon": {"window": _INT, "seed": _INT},
    "serve": {"port": _INT},
}


@dataclass
class RunConfig:
    """Typed per-command configuration sections.

    Unknown keys are kept verbatim as strings and listed in ``unknown``
    rather than silently dropped.
    """

    sections: dict = field(default_factory=dict)
    unknown: list = field(default_factory=list)

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})


def _parse_value(section: str, key: str, raw: str, kind: str):
    raw = raw.strip()
    try:
        if kind == _FLOAT:
            return float(raw)
        if kind == _INT:
            return int(raw)
        if kind == _BOOL:
            if raw in ("True", "true", "1", "yes"):
                return True
            if raw in ("False", "false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == _FLOATS:
            return [float(tok) for tok in raw.split(",") if tok.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse INI-style configuration text into typed sections."""
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig()
    for section in parser.sections():
        schema = CONFIG_SCHEMA.get(section, {})
        out = {}
        for key, raw in parser[section].items():
            if key in schema:
                out[key] = _parse_value(section, key, raw, schema[key])
            else:
                out[key] = raw
                cfg.unknown.append((section, key))
        cfg.sections[section] = out
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
