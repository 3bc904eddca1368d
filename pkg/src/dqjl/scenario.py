"""Random collision-free initial road environments and their file format."""

from __future__ import annotations

import csv
from dataclasses import dataclass
import io
from pathlib import Path

import numpy as np

from dqjl.env import PaddedState, RoadConfig, VehicleState, pad_state
from dqjl.errors import InfeasibleDensityError, TooManyVehiclesError

SCENARIO_MAGIC = "# dqjl-scenario v1"
SCENARIO_COLUMNS = ("x", "lane", "v", "z", "b_star", "length")


@dataclass(frozen=True)
class ScenarioSpec:
    """Distribution of initial road environments.

    Give either ``n_vehicles`` or ``spacing_m_per_veh``; with a spacing the
    vehicle count is ``round(L / spacing)`` over both lanes. ``n_jitter``
    widens the count to a uniform draw from ``n +- n_jitter``.
    """

    n_vehicles: int | None = None
    spacing_m_per_veh: float | None = None
    n_jitter: int = 0
    length_range: tuple[float, float] = (4.0, 5.5)
    decel_mean: float = 3.5
    decel_std: float = 1.0
    decel_bounds: tuple[float, float] = (0.5, 8.0)
    background_speed_mps: float | None = None
    lane_split: float = 0.5
    seed: int | None = None
    max_retries: int = 1000

    def __post_init__(self) -> None:
        if self.n_vehicles is None and self.spacing_m_per_veh is None:
            raise ValueError("ScenarioSpec needs n_vehicles or spacing_m_per_veh")
        if self.spacing_m_per_veh is not None and not self.spacing_m_per_veh > 0:
            raise ValueError("spacing_m_per_veh must be > 0")
        if self.n_vehicles is not None and self.n_vehicles < 0:
            raise ValueError("n_vehicles must be >= 0")
        if not 0.0 <= self.lane_split <= 1.0:
            raise ValueError("lane_split must be a probability")
        if self.n_jitter < 0:
            raise ValueError("n_jitter must be >= 0")

    def nominal_count(self, segment_length_m: float) -> int:
        if self.n_vehicles is not None:
            return int(self.n_vehicles)
        return int(round(segment_length_m / self.spacing_m_per_veh))


def _truncated_decel(rng: np.random.Generator, spec: ScenarioSpec) -> float:
    lo, hi = spec.decel_bounds
    while True:
        b = float(rng.normal(spec.decel_mean, spec.decel_std))
        if lo < b < hi:
            return b


def _fits(x: float, length: float, placed: list[tuple[float, float]], d: float) -> bool:
    for xj, lj in placed:
        if xj <= x:
            if x - length - xj <= d:
                return False
        elif xj - lj - x <= d:
            return False
    return True


def generate_scenario(
    spec: ScenarioSpec, config: RoadConfig, rng: np.random.Generator | None = None
) -> PaddedState:
    """Sample a padded, collision-free initial state.

    Vehicles are placed one at a time with the front uniform in ``(l, L]``
    (rear inside the segment) and rejected on a gap violation with their
    lane-mates; rows come out sorted by front position.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    L = config.segment_length_m
    speed = config.background_speed_mps if spec.background_speed_mps is None else spec.background_speed_mps

    n = spec.nominal_count(L)
    if spec.n_jitter:
        n = int(rng.integers(max(0, n - spec.n_jitter), n + spec.n_jitter + 1))
        n = min(n, config.pad_size)
    if n > config.pad_size:
        raise TooManyVehiclesError(f"{n} vehicles requested but pad_size is {config.pad_size}")

    lanes = (rng.random(n) >= spec.lane_split).astype(int)
    placed: dict[int, list[tuple[float, float]]] = {0: [], 1: []}
    rows: list[VehicleState] = []
    for lane in lanes:
        length = float(rng.uniform(*spec.length_range))
        b_star = _truncated_decel(rng, spec)
        for _ in range(spec.max_retries):
            # whole vehicle on the segment: x in (l, L]
            x = L - float(rng.uniform(0.0, L - length))
            if _fits(x, length, placed[int(lane)], config.min_gap_m):
                break
        else:
            raise InfeasibleDensityError(
                f"could not place {n} vehicles on L={L} m within {spec.max_retries} retries"
            )
        placed[int(lane)].append((x, length))
        rows.append(
            VehicleState(
                front_pos_m=x,
                lane=int(lane),
                speed_mps=float(speed),
                comfort_decel_mps2=b_star,
                length_m=length,
            )
        )
    rows.sort(key=lambda r: r.front_pos_m)
    return pad_state(rows, config.pad_size)


def dumps_scenario(state: PaddedState) -> str:
    buf = io.StringIO()
    buf.write(f"{SCENARIO_MAGIC}\n# pad_size={state.pad_size}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCENARIO_COLUMNS)
    for row in state.real_rows():
        writer.writerow(
            [
                repr(row.front_pos_m),
                row.lane,
                repr(row.speed_mps),
                row.yielding,
                repr(row.comfort_decel_mps2),
                repr(row.length_m),
            ]
        )
    return buf.getvalue()


def loads_scenario(text: str, pad_size: int | None = None) -> PaddedState:
    """Parse a scenario document; ``pad_size`` overrides the stored one."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCENARIO_MAGIC:
        raise ValueError("not a dqjl scenario file")
    stored = None
    body = []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "pad_size":
                stored = int(value)
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != SCENARIO_COLUMNS:
        raise ValueError(f"scenario header must be {','.join(SCENARIO_COLUMNS)}")
    rows = [
        VehicleState(
            front_pos_m=float(r["x"]),
            lane=int(r["lane"]),
            speed_mps=float(r["v"]),
            yielding=int(r["z"]),
            comfort_decel_mps2=float(r["b_star"]),
            length_m=float(r["length"]),
        )
        for r in reader
    ]
    k = pad_size if pad_size is not None else stored
    if k is None:
        raise ValueError("scenario has no pad_size and none was given")
    return pad_state(rows, k)


def save_scenario(state: PaddedState, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(state))


def load_scenario(path: str | Path, pad_size: int | None = None) -> PaddedState:
    return loads_scenario(Path(path).read_text(), pad_size)


def scenario_pad_size(path: str | Path) -> int | None:
    for line in Path(path).read_text().splitlines()[1:]:
        if line.startswith("# pad_size="):
            return int(line.split("=", 1)[1])
    return None
