"""Demand scenarios: multipliers on the OD service demand with probabilities."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError

SCENARIO_SCHEMA = "facility-equilibrium/scenarios/1"


@dataclass(frozen=True)
class ScenarioSet:
    """Demand multipliers ``thetas`` with probabilities ``probs``.

    ``theta_min``/``theta_max`` record the sampling interval when the set was
    generated; ``seed`` the generator seed.
    """

    thetas: tuple
    probs: tuple
    seed: int | None = None
    theta_min: float | None = None
    theta_max: float | None = None

    def __post_init__(self):
        thetas = tuple(float(t) for t in self.thetas)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "probs", probs)
        if not thetas or len(thetas) != len(probs):
            raise DomainError("need at least one scenario and one probability per scenario")
        if any(t < 0 or not np.isfinite(t) for t in thetas):
            raise DomainError("demand multipliers must be finite and nonnegative")
        if any(p <= 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise DomainError("scenario probabilities must be positive and sum to 1")
        lo, hi = self.theta_min, self.theta_max
        if lo is not None and hi is not None and not all(lo <= t <= hi for t in thetas):
            raise DomainError("demand multiplier outside [theta_min, theta_max]")

    def __len__(self) -> int:
        return len(self.thetas)

    @property
    def mean_theta(self) -> float:
        return float(np.dot(self.thetas, self.probs))

    @classmethod
    def single(cls, theta: float = 1.0) -> "ScenarioSet":
        return cls((theta,), (1.0,))

    def subset(self, xi: int) -> "ScenarioSet":
        """Scenario ``xi`` alone, with probability one."""
        return ScenarioSet((self.thetas[xi],), (1.0,), self.seed)

    def to_dict(self) -> dict:
        # repr() of a float round-trips exactly through JSON
        return {"schema": SCENARIO_SCHEMA, "seed": self.seed, "theta_min": self.theta_min,
                "theta_max": self.theta_max, "thetas": list(self.thetas), "probs": list(self.probs)}

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSet":
        if data.get("schema") != SCENARIO_SCHEMA:
            raise ParseError(f"unsupported scenario schema {data.get('schema')!r}")
        try:
            return cls(tuple(data["thetas"]), tuple(data["probs"]), data.get("seed"),
                       data.get("theta_min"), data.get("theta_max"))
        except KeyError as exc:
            raise ParseError(f"scenario document lacks {exc.args[0]!r}") from None


def generate_scenarios(n: int, theta_min: float, theta_max: float, seed: int | None = 0) -> ScenarioSet:
    """``n`` equally likely multipliers drawn uniformly from ``[theta_min, theta_max]``.

    Draws come from numpy's PCG64 generator seeded with ``seed`` and are mapped
    by ``theta_min + (theta_max - theta_min) * u``.
    """
    if n < 1:
        raise DomainError("need at least one scenario")
    if theta_min > theta_max:
        raise DomainError("theta_min must not exceed theta_max")
    u = np.random.default_rng(seed).random(n)
    thetas = np.minimum(theta_min + (theta_max - theta_min) * u, theta_max)
    return ScenarioSet(tuple(thetas.tolist()), tuple([1.0 / n] * n), seed, float(theta_min), float(theta_max))


def save_scenarios(scenarios: ScenarioSet, path) -> None:
    Path(path).write_text(json.dumps(scenarios.to_dict(), indent=2) + "\n")


def load_scenarios(path) -> ScenarioSet:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid scenario file: {exc.msg}", exc.lineno) from None
    return ScenarioSet.from_dict(data)
