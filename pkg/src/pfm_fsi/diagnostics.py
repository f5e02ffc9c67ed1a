"""Measurements and writers: vorticity, energy, solid traces, shedding spectra, images and CSV."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NoShedding
from .grid import MacGrid, divergence, dump_grid

TRACE_COLUMNS = ("t", "com_x", "com_y", "vel_x", "vel_y", "ke", "max_div", "max_vort")


def vorticity(grid: MacGrid) -> np.ndarray:
    """Cell-centred dv/dx - du/dy by central differences of face velocities."""
    u, v, dx = grid.u, grid.v, grid.dx
    px, py = grid.periodic
    vc = 0.5 * (v[:, 1:] + v[:, :-1])   # v at cell centres
    uc = 0.5 * (u[1:] + u[:-1])         # u at cell centres
    if px:
        dvdx = (np.roll(vc, -1, 0) - np.roll(vc, 1, 0)) / (2 * dx)
    else:
        dvdx = np.gradient(vc, dx, axis=0)
    if py:
        dudy = (np.roll(uc, -1, 1) - np.roll(uc, 1, 1)) / (2 * dx)
    else:
        dudy = np.gradient(uc, dx, axis=1)
    return dvdx - dudy


def kinetic_energy(grid: MacGrid) -> float:
    """1/2 sum rho u^2 dx^2 over faces.

    Boundary faces count half; periodic duplicates are counted once.
    """
    px, py = grid.periodic
    wu = np.ones_like(grid.u)
    wv = np.ones_like(grid.v)
    if px:
        wu[-1] = 0.0
    else:
        wu[0] = wu[-1] = 0.5
    if py:
        wv[:, -1] = 0.0
    else:
        wv[:, 0] = wv[:, -1] = 0.5
    e = (wu * grid.rho_u * grid.u ** 2).sum() + (wv * grid.rho_v * grid.v ** 2).sum()
    return 0.5 * float(e) * grid.dx ** 2


@dataclass
class SolidTracer:
    """COM rows with velocities from frame-to-frame finite differences."""

    rows: list = field(default_factory=list)
    _last: tuple = None

    def record(self, t, com):
        com = np.asarray(com, dtype=np.float64)
        if self._last is None or t == self._last[0]:
            vel = np.zeros(2)
        else:
            vel = (com - self._last[1]) / (t - self._last[0])
        self._last = (t, com)
        row = (float(t), float(com[0]), float(com[1]), float(vel[0]), float(vel[1]))
        self.rows.append(row)
        return row

    def array(self):
        return np.array(self.rows).reshape(-1, 5)


def solid_trace(t, com, tracer: SolidTracer):
    return tracer.record(t, com)


def resample_uniform(t, y, dt=None):
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if dt is None:
        dt = float(np.median(np.diff(t)))
    grid_t = np.arange(t[0], t[-1] + 0.5 * dt, dt)
    return grid_t, np.interp(grid_t, t, y)


def dominant_frequency(t, signal, detrend=True):
    """Frequency of the largest non-DC DFT peak of a (possibly non-uniform) signal.

    Returns ``(f_peak, bin_width, peak_power / mean_power)``.
    """
    tu, s = resample_uniform(t, signal)
    if detrend:
        s = s - np.polyval(np.polyfit(tu, s, 1), tu)
    n = len(s)
    spec = np.abs(np.fft.rfft(s * np.hanning(n))) ** 2
    freqs = np.fft.rfftfreq(n, tu[1] - tu[0])
    k = 1 + int(np.argmax(spec[1:]))
    ratio = spec[k] / max(spec[1:].mean(), 1e-300)
    return float(freqs[k]), float(freqs[1] - freqs[0]), float(ratio)


def shedding_frequency(t, probe, inflow, rms_fraction=0.05, min_peak_ratio=10.0):
    """Dominant shedding frequency of a cross-stream probe signal.

    Raises :class:`NoShedding` when the probe RMS is below ``rms_fraction`` of the
    inflow speed or the spectrum has no clear peak.
    """
    probe = np.asarray(probe, dtype=np.float64)
    rms = float(np.sqrt(np.mean((probe - probe.mean()) ** 2)))
    if rms < rms_fraction * abs(inflow):
        raise NoShedding(f"probe RMS {rms:.3g} below {rms_fraction:.0%} of inflow {inflow:g}")
    f, width, ratio = dominant_frequency(t, probe)
    if ratio < min_peak_ratio:
        raise NoShedding(f"no dominant spectral peak (peak/mean power {ratio:.2g})")
    return f


def strouhal(frequency, diameter, speed):
    return frequency * diameter / speed


def plateau(t, speed, fraction=0.25):
    """(mean, std / |mean|) of the final ``fraction`` of a trace."""
    t = np.asarray(t, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    cut = t[0] + (1.0 - fraction) * (t[-1] - t[0])
    tail = speed[t >= cut]
    mean = float(tail.mean())
    rel = float(tail.std() / max(abs(mean), 1e-300))
    return mean, rel


# ---------------------------------------------------------------------------
# writers

def write_pgm(path, field_, vmax=None):
    """8-bit binary graymap: 128 at zero, linear and symmetric, clamped at +-vmax."""
    f = np.asarray(field_, dtype=np.float64)
    if vmax is None:
        vmax = float(np.abs(f).max())
    scaled = np.clip(f / vmax, -1.0, 1.0) if vmax > 0 else np.zeros_like(f)
    img = np.round(128.0 + 127.0 * scaled).astype(np.uint8)
    img = img.T[::-1]  # rows top-down, y up
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(img.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


class CsvWriter:
    def __init__(self, path, columns):
        self.path = path
        self.columns = tuple(columns)
        try:
            self._fh = open(path, "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot open {path}: {exc}") from exc
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)

    def write(self, row):
        self._w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows).reshape(-1, len(header))


def diff_traces(a, b, tol):
    """Max abs difference between two trace files; ``None`` if shapes differ."""
    ha, A = read_trace(a)
    hb, B = read_trace(b)
    if ha != hb or A.shape != B.shape:
        return None
    if A.size == 0:
        return 0.0
    return float(np.nanmax(np.abs(A - B)))


def write_frame(out_dir, frame, grid: MacGrid, vort_max=None, dump=False):
    """Vorticity image and optional MACG dump for one frame; returns the vorticity."""
    w = vorticity(grid)
    write_pgm(os.path.join(out_dir, f"vort_{frame:05d}.pgm"), w, vort_max)
    if dump:
        dump_grid(grid, os.path.join(out_dir, f"grid_{frame:05d}.macg"))
    return w


def frame_row(t, com, vel, grid: MacGrid, vort=None):
    if vort is None:
        vort = vorticity(grid)
    return (t, com[0], com[1], vel[0], vel[1], kinetic_energy(grid),
            float(np.abs(divergence(grid)).max()), float(np.abs(vort).max()))
