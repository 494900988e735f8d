"""Track grid, grip-limited velocity envelope and region classification.

A track is a closed loop sampled every ``ds`` meters. Each sample carries
the grip-limited maximum velocity (the envelope a perfect driver on cold
tires could follow, ignoring powertrain limits) and the extra linear drag
coefficient active in corners. The envelope comes from three passes:

1. cap: aero ceiling on straights, apex speed inside corners,
2. braking: backward sweep, you cannot carry more speed into a corner
   than the tires can shed at ``a_brake``,
3. traction: forward sweep, you cannot gain speed faster than ``a_traction``.

Both sweeps run around the loop until the fixed point, so the closure at
the start/finish line is consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import PlantParams, TrackParams
from .errors import SpecError

MIN_UPDATE_RATE = 10.0  # controller updates per second the grid must allow


@dataclass(frozen=True)
class TrackProfile:
    """Sampled closed track."""

    ds: float                 # grid spacing [m]
    n: int                    # number of samples per lap [-]
    v_max: np.ndarray         # grip-limited velocity envelope [m/s]
    drag_extra: np.ndarray    # extra linear resistance coefficient [N]
    corner: np.ndarray        # bool, inside a corner
    length: float             # lap length [m]

    def wrap(self, i: int) -> int:
        return i % self.n

    def s_of(self, i: int) -> float:
        return (i % self.n) * self.ds

    def extra_at(self, s):
        if isinstance(s, np.ndarray):
            i = np.rint(s / self.ds).astype(int) % self.n
            return self.drag_extra[i]
        i = int(round(s / self.ds)) % self.n
        return float(self.drag_extra[i])

    def bind(self, pp: PlantParams) -> PlantParams:
        """Attach this track's corner drag to a parameter bundle."""
        return pp.with_res_extra(self.extra_at)

    def with_v_max(self, v_max: np.ndarray) -> "TrackProfile":
        return TrackProfile(self.ds, self.n, np.asarray(v_max, dtype=float),
                            self.drag_extra, self.corner, self.length)


def _sweep_envelope(cap: np.ndarray, ds: float, a_brake: float,
                    a_traction: float) -> np.ndarray:
    """Apply braking (backward) and traction (forward) sweeps to a cap."""
    n = cap.size
    v = cap.copy()
    # iterate to the loop fixed point; each sweep can only lower values
    for _ in range(8):
        changed = False
        for i in range(n - 1, -1, -1):
            lim = math.sqrt(v[(i + 1) % n] ** 2 + 2.0 * a_brake * ds)
            if v[i] > lim:
                v[i] = lim
                changed = True
        for i in range(n):
            lim = math.sqrt(v[i] ** 2 + 2.0 * a_traction * ds)
            j = (i + 1) % n
            if v[j] > lim:
                v[j] = lim
                changed = True
        if not changed:
            break
    else:
        raise SpecError("velocity envelope failed to close around the loop")
    return v


def make_track(tp: TrackParams) -> TrackProfile:
    """Build the sampled profile from segment descriptions."""
    lengths = [seg[1] for seg in tp.segments]
    total = sum(lengths)
    n = int(round(total / tp.ds))
    if abs(n * tp.ds - total) > 1e-9:
        raise SpecError(f"track length {total} m is not a multiple of "
                        f"ds={tp.ds} m")
    cap = np.full(n, tp.v_cap, dtype=float)
    drag = np.zeros(n, dtype=float)
    corner = np.zeros(n, dtype=bool)
    pos = 0.0
    for kind, length, apex in tp.segments:
        i0 = int(round(pos / tp.ds))
        i1 = int(round((pos + length) / tp.ds))
        if kind == "corner":
            if apex <= 0.0:
                raise SpecError("corner segment needs a positive apex speed")
            cap[i0:i1] = apex
            drag[i0:i1] = tp.corner_drag
            corner[i0:i1] = True
        elif kind != "straight":
            raise SpecError(f"unknown segment kind '{kind}'")
        pos += length

    v_max = _sweep_envelope(cap, tp.ds, tp.a_brake, tp.a_traction)

    # the envelope must still reach every declared apex speed
    for kind, _, apex in tp.segments:
        if kind == "corner" and v_max.min() < apex - 1e-9 and apex > v_max.max():
            raise SpecError(f"envelope cannot reach apex speed {apex}")
    floor = tp.ds * MIN_UPDATE_RATE
    if v_max.min() < floor:
        raise SpecError(
            f"envelope min {v_max.min():.2f} m/s below {floor:.1f} m/s; the "
            f"controller grid would fall under {MIN_UPDATE_RATE:.0f} updates/s")
    return TrackProfile(ds=tp.ds, n=n, v_max=v_max, drag_extra=drag,
                        corner=corner, length=total)


def scale_apexes(tp: TrackParams, i0: int, i1: int, factor: float,
                 base: TrackProfile) -> TrackProfile:
    """Rebuild the envelope with the cap scaled on index range [i0, i1).

    Scaling the cap rather than the finished envelope keeps the braking
    and traction sweeps consistent with the new apex speeds.
    """
    n = base.n
    cap = np.full(n, tp.v_cap, dtype=float)
    # recover the segment caps
    pos = 0.0
    for kind, length, apex in tp.segments:
        a = int(round(pos / tp.ds))
        b = int(round((pos + length) / tp.ds))
        if kind == "corner":
            cap[a:b] = apex
        pos += length
    idx = np.arange(n)
    if i0 <= i1:
        mask = (idx >= i0) & (idx < i1)
    else:
        mask = (idx >= i0) | (idx < i1)
    cap[mask] = cap[mask] * factor
    np.minimum(cap, tp.v_cap * max(1.0, factor), out=cap)
    v_max = _sweep_envelope(cap, tp.ds, tp.a_brake, tp.a_traction)
    floor = tp.ds * MIN_UPDATE_RATE
    if v_max.min() < floor:
        raise SpecError(f"scaled envelope falls below {floor:.1f} m/s")
    return base.with_v_max(v_max)


def classify_region(v_nom: np.ndarray, v_max: np.ndarray,
                    tol: float = 5e-3) -> np.ndarray:
    """Mark grip-limited indices: nominal velocity rides the envelope."""
    v_nom = np.asarray(v_nom, dtype=float)
    v_max = np.asarray(v_max, dtype=float)
    if v_nom.shape != v_max.shape:
        raise SpecError("velocity trace and envelope lengths differ")
    return v_nom >= v_max * (1.0 - tol)


def save_track(path: str, track: TrackProfile) -> None:
    """Write the profile as columnar text (index, s, v_max, drag, corner)."""
    with open(path, "w") as fh:
        fh.write("# track profile v1\n")
        fh.write(f"# ds {track.ds!r} n {track.n} length {track.length!r}\n")
        fh.write("# i s v_max drag_extra corner\n")
        for i in range(track.n):
            fh.write(f"{i} {i * track.ds!r} {float(track.v_max[i])!r} "
                     f"{float(track.drag_extra[i])!r} {int(track.corner[i])}\n")


def load_track(path: str) -> TrackProfile:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# track profile v1"):
            raise SpecError(f"{path} is not a track profile file")
        meta = fh.readline().split()
        ds = float(meta[2]); n = int(meta[4]); length = float(meta[6])
        data = np.loadtxt(fh)
    if data.shape[0] != n:
        raise SpecError(f"{path}: row count {data.shape[0]} != n {n}")
    return TrackProfile(ds=ds, n=n, v_max=data[:, 2].copy(),
                        drag_extra=data[:, 3].copy(),
                        corner=data[:, 4].astype(bool), length=length)


def mini_track_params() -> TrackParams:
    """Short single-corner loop for fast tests."""
    return TrackParams(
        ds=2.0, v_cap=70.0, a_brake=42.0, a_traction=12.0,
        corner_drag=2400.0,
        segments=(
            ("straight", 120.0, 0.0),
            ("corner", 50.0, 22.0),
            ("straight", 70.0, 0.0),
        ))
