"""
Experiment configuration
Validated experiment settings, flat result records and the JSON files they live in
"""

import json
import os
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from chain_analysis import EXACT_CAP
from isoperimetry import ENUMERATION_CAP, iso_exponent
from lattice import MAX_CELLS, TorusConfig


CODE_VERSION = "rangemix-1.0.0"

EXPERIMENT_KINDS = ("scaling", "iso", "density", "torus_control")

RECORD_COLUMNS = [
    "kind", "d", "N", "u", "seed", "V", "E", "t_mix", "method",
    "errbar", "gamma_hat", "mp_bound", "wall_ms",
]


def worker_count(requested: Optional[int] = None) -> int:
    """Worker processes for trial pools, capped by RANGEMIX_THREADS"""
    workers = requested or os.cpu_count() or 1
    cap = os.environ.get("RANGEMIX_THREADS")
    if cap:
        try:
            workers = min(workers, int(cap))
        except ValueError:
            raise ValueError(f"RANGEMIX_THREADS must be an integer, got {cap!r}")
    return max(1, workers)


class ExperimentConfig(BaseModel):
    """Everything needed to rerun an experiment; checked before any trial starts"""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["scaling", "iso", "density", "torus_control"]
    d: int = 3
    N: List[int]
    u: float = 1.0
    u_values: List[float] = Field(default_factory=list)
    trials: int = 20
    seed: int = 0
    exact_cap: int = EXACT_CAP
    mc_trials: int = 4000
    rmax: int = ENUMERATION_CAP
    mu: Optional[float] = None
    mp_constant: Optional[float] = None
    output_dir: str = "Output"
    workers: Optional[int] = None

    @field_validator("d")
    @classmethod
    def _check_dimension(cls, value):
        if value < 3:
            raise ValueError(f"dimension must be >= 3, got {value}")
        return value

    @field_validator("N")
    @classmethod
    def _check_sides(cls, value):
        if not value:
            raise ValueError("N list must not be empty")
        if list(value) != sorted(set(value)):
            raise ValueError(f"N list must be strictly increasing, got {value}")
        if value[0] < 2:
            raise ValueError(f"side lengths must be >= 2, got {value}")
        return value

    @field_validator("u")
    @classmethod
    def _check_density(cls, value):
        if not value > 0:
            raise ValueError(f"u must be positive, got {value}")
        return value

    @field_validator("u_values")
    @classmethod
    def _check_density_list(cls, value):
        if any(not u > 0 for u in value):
            raise ValueError(f"every u must be positive, got {value}")
        return value

    @field_validator("seed")
    @classmethod
    def _check_seed(cls, value):
        if not 0 <= value < 2 ** 64:
            raise ValueError(f"root seed must be a 64-bit unsigned integer, got {value}")
        return value

    @field_validator("trials", "mc_trials", "exact_cap")
    @classmethod
    def _check_counts(cls, value):
        if value < 0:
            raise ValueError(f"counts must be >= 0, got {value}")
        return value

    @field_validator("rmax")
    @classmethod
    def _check_rmax(cls, value):
        if not 1 <= value <= ENUMERATION_CAP:
            raise ValueError(f"rmax must lie in [1, {ENUMERATION_CAP}], got {value}")
        return value

    @field_validator("mu")
    @classmethod
    def _check_mu(cls, value):
        if value is not None and not 0 < value < 1:
            raise ValueError(f"mu must lie in (0, 1), got {value}")
        return value

    @field_validator("mp_constant")
    @classmethod
    def _check_constant(cls, value):
        if value is not None and not value > 0:
            raise ValueError(f"mp_constant must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _check_experiment(self):
        for N in self.N:
            if N ** self.d > MAX_CELLS:
                raise ValueError(f"torus {N}^{self.d} exceeds addressing limit {MAX_CELLS}")
        if self.kind == "scaling" and self.trials and self.trials < 10:
            raise ValueError(f"scaling needs >= 10 trials per N, got {self.trials}")
        if self.kind == "density" and not self.u_values:
            self.u_values = [self.u]
        return self

    @property
    def admissible_mu(self) -> float:
        return self.mu if self.mu is not None else 1 - 1 / (4 * self.d)

    @property
    def exponent(self) -> float:
        return iso_exponent(self.d)

    def torus(self, N: int, u: Optional[float] = None) -> TorusConfig:
        return TorusConfig(d=self.d, N=N, u=self.u if u is None else u)

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        """Copy with the root seed replaced, re-validated"""
        if seed is None:
            return self
        return ExperimentConfig.model_validate({**self.model_dump(), "seed": seed})


class ExperimentRecord(BaseModel):
    """One measured trial; (kind, d, N, u, seed, stream) reproduces it"""

    kind: str
    d: int
    N: int
    u: float
    seed: int
    stream: int = 0
    V: Optional[int] = None
    E: Optional[int] = None
    t_mix: Optional[int] = None
    method: Optional[str] = None
    errbar: Optional[float] = None
    gamma_hat: Optional[float] = None
    mp_bound: Optional[int] = None
    wall_ms: float = 0.0
    density: Optional[float] = None
    profile: Optional[dict] = None
    code_version: str = CODE_VERSION

    def row(self) -> list:
        """Values in RECORD_COLUMNS order, blanks for missing fields"""
        values = self.model_dump()
        return ["" if values[c] is None else values[c] for c in RECORD_COLUMNS]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.model_validate(data)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(cfg.model_dump(), f, indent=2)
    except OSError as e:
        raise OSError(f"cannot write config {path}: {e}") from e
    return path


def load_records(path) -> List[ExperimentRecord]:
    """Records from a JSON list or a JSON-lines file"""
    path = Path(path)
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise OSError(f"cannot read records {path}: {e}") from e
    if path.suffix == ".jsonl":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    else:
        rows = json.loads(text) if text.strip() else []
        if isinstance(rows, dict):
            rows = rows.get("records", [])
    return [ExperimentRecord.model_validate(r) for r in rows]
