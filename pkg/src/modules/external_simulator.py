import os
import shlex
import subprocess
import threading
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.logger import get_application_logger
from src.core.priors import LaplaceMarginal, PriorSpec, UniformMarginal
from src.core.rng import SeedStream
from src.core.simulator import SimulatorError, SimulatorModel

SEED_PLACEHOLDER = "{seed}"
SEED_ENV_VAR = "SBI_SEED"


class ExternalSimulatorError(SimulatorError):
    """Custom exception for external simulator failures."""
    pass


class ExternalSimulatorTimeout(ExternalSimulatorError):
    pass


class ExternalSimulatorFailed(ExternalSimulatorError):
    """Nonzero exit or missing executable. `stderr` holds what the process printed."""

    def __init__(self, message: str, returncode: Optional[int] = None, stderr: str = ""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class ExternalDimensionMismatch(ExternalSimulatorError):
    pass


class ExternalNonNumericOutput(ExternalSimulatorError):
    pass


@dataclass(frozen=True)
class ExternalSimulatorSpec:
    """
    How to call a simulator living in another process.

    The parameter vector is written as one CSV row on stdin; the summary is
    read back as one CSV row (the last non-empty line) from stdout. Any
    `{seed}` token in the command is replaced by the task's 32-bit seed,
    which is also exported as SBI_SEED.
    """
    command: Tuple[str, ...]
    timeout: float = 60.0
    summary_dim: Optional[int] = None
    working_dir: Optional[str] = None

    def __post_init__(self):
        if not self.command:
            raise ExternalSimulatorError("External simulator command is empty.")
        if self.timeout <= 0:
            raise ExternalSimulatorError(f"timeout must be positive, got {self.timeout}.")
        if self.summary_dim is not None and self.summary_dim < 1:
            raise ExternalSimulatorError(f"summary_dim must be >= 1, got {self.summary_dim}.")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> "ExternalSimulatorSpec":
        command = settings.get("command")
        if isinstance(command, str):
            command = shlex.split(command)
        return cls(
            command=tuple(command or ()),
            timeout=float(settings.get("timeout", 60.0)),
            summary_dim=settings.get("summary_dim"),
            working_dir=settings.get("working_dir"),
        )

    def argv(self, seed: int) -> list:
        return [token.replace(SEED_PLACEHOLDER, str(seed)) for token in self.command]


class DimensionCalibration:
    """Remembers the summary dimension seen on the first successful call."""

    def __init__(self, expected: Optional[int] = None):
        self._lock = threading.Lock()
        self._dim = expected

    @property
    def dim(self) -> Optional[int]:
        with self._lock:
            return self._dim

    def check(self, size: int) -> None:
        with self._lock:
            if self._dim is None:
                self._dim = size
                get_application_logger().info(f"External simulator calibrated: summary dimension {size}.")
            elif size != self._dim:
                raise ExternalDimensionMismatch(
                    f"External simulator returned {size} field(s), calibrated dimension is {self._dim}."
                )


def format_parameter_row(theta: np.ndarray) -> str:
    return ",".join(f"{float(v):.17g}" for v in np.asarray(theta, dtype=np.float64).reshape(-1)) + "\n"


def parse_summary_row(stdout: str) -> np.ndarray:
    lines = [line.strip() for line in stdout.splitlines() if line.strip()]
    if not lines:
        raise ExternalNonNumericOutput("External simulator produced no output.")
    fields = [f.strip() for f in lines[-1].split(",")]
    try:
        return np.array([float(f) for f in fields], dtype=np.float64)
    except ValueError as e:
        raise ExternalNonNumericOutput(f"Non-numeric field in simulator output '{lines[-1]}': {e}") from e


def external_simulate(spec: ExternalSimulatorSpec, theta: np.ndarray, seed: SeedStream,
                      calibration: Optional[DimensionCalibration] = None) -> np.ndarray:
    """
    Invokes the external simulator once and returns the parsed summary.

    Raises:
        ExternalSimulatorTimeout: The process ran longer than `spec.timeout`.
        ExternalSimulatorFailed: Nonzero exit status or missing executable.
        ExternalNonNumericOutput: Output could not be parsed as numbers.
        ExternalDimensionMismatch: Field count differs from the calibrated one.
    """
    logger = get_application_logger()
    seed_value = seed.uint32()
    argv = spec.argv(seed_value)
    env = os.environ.copy()
    env[SEED_ENV_VAR] = str(seed_value)
    try:
        process = subprocess.run(
            argv, input=format_parameter_row(theta), capture_output=True, text=True,
            encoding="utf-8", timeout=spec.timeout, env=env, cwd=spec.working_dir,
        )
    except subprocess.TimeoutExpired as e:
        raise ExternalSimulatorTimeout(f"External simulator exceeded {spec.timeout}s: {' '.join(argv)}") from e
    except FileNotFoundError as e:
        raise ExternalSimulatorFailed(f"External simulator executable not found: {argv[0]}") from e

    if process.returncode != 0:
        logger.error(f"External simulator exited with {process.returncode}. STDERR: {process.stderr}")
        raise ExternalSimulatorFailed(
            f"External simulator exited with status {process.returncode}: {process.stderr.strip()}",
            returncode=process.returncode, stderr=process.stderr,
        )

    summary = parse_summary_row(process.stdout)
    if calibration is not None:
        calibration.check(summary.size)
    return summary


def prior_from_settings(settings: Mapping[str, Any]) -> PriorSpec:
    """
    Builds a prior from `{"names": [...], "low": [...], "high": [...]}` or
    a per-parameter list of `{"name", "kind": "uniform"|"laplace", ...}`.
    """
    if "marginals" in settings:
        marginals, names = [], []
        for entry in settings["marginals"]:
            kind = entry.get("kind", "uniform")
            if kind == "uniform":
                marginals.append(UniformMarginal(float(entry["low"]), float(entry["high"])))
            elif kind == "laplace":
                marginals.append(LaplaceMarginal(float(entry.get("location", 0.0)), float(entry["scale"])))
            else:
                raise ExternalSimulatorError(f"Unknown prior kind '{kind}'.")
            names.append(entry.get("name", f"theta_{len(names) + 1}"))
        return PriorSpec(tuple(marginals), tuple(names))
    return PriorSpec.uniform(settings["low"], settings["high"], settings.get("names", ()))


class ExternalSimulatorModel(SimulatorModel):
    """A SimulatorModel whose simulate step is a subprocess call."""
    name = "external"

    def __init__(self, spec: ExternalSimulatorSpec, prior: PriorSpec,
                 true_theta: Sequence[float] = ()):
        super().__init__(prior)
        self.spec = spec
        self.calibration = DimensionCalibration(spec.summary_dim)
        self.true_theta = tuple(true_theta)

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "ExternalSimulatorModel":
        if "prior" not in settings:
            raise ExternalSimulatorError("External model settings need a 'prior' section.")
        return cls(ExternalSimulatorSpec.from_settings(settings), prior_from_settings(settings["prior"]),
                   settings.get("true_theta", ()))

    @property
    def summary_dim(self) -> int:
        dim = self.calibration.dim
        if dim is None:
            raise ExternalSimulatorError(
                "Summary dimension unknown until the first call; set 'summary_dim' to declare it."
            )
        return dim

    def simulate(self, theta: np.ndarray, seed: SeedStream) -> np.ndarray:
        return external_simulate(self.spec, theta, seed, self.calibration)

    def summarize(self, raw: np.ndarray) -> np.ndarray:
        return raw
