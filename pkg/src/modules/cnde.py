import copy
import json
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch
from scipy.special import logsumexp
from torch import nn
from torch.nn import functional as F

from src.core.logger import get_application_logger
from src.core.rng import SeedStream

ProgressCallback = Callable[[int, str], None]

DIRECTIONS = ("posterior", "likelihood")
WEIGHT_FORMAT = "float64-little-endian"


class CndeError(Exception):
    """Custom exception for conditional density estimator errors."""
    pass


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 5e-4
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    validation_fraction: float = 0.1
    rounds: int = 10
    sims_per_round: int = 10000
    n_components: int = 8
    hidden_units: int = 64
    hidden_layers: int = 2
    min_pairs: int = 100

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "rounds", "sims_per_round",
                     "n_components", "hidden_units", "hidden_layers"):
            if getattr(self, name) <= 0:
                raise CndeError(f"{name} must be positive.")
        if not 0.0 < self.validation_fraction < 0.5:
            raise CndeError(f"validation_fraction must lie in (0, 0.5), got {self.validation_fraction}.")

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (settings or {}).items() if k in known})


class MixtureDensityNetwork(nn.Module):
    """
    Diagonal Gaussian mixture p(y | x) with a tanh MLP trunk.
    Heads give mixture logits, component means and component log-scales.
    """

    def __init__(self, d_in: int, d_out: int, n_components: int = 8, hidden_units: int = 64, hidden_layers: int = 2):
        super().__init__()
        self.d_in, self.d_out, self.n_components = d_in, d_out, n_components
        layers: List[nn.Module] = []
        width = d_in
        for _ in range(hidden_layers):
            layers += [nn.Linear(width, hidden_units), nn.Tanh()]
            width = hidden_units
        self.trunk = nn.Sequential(*layers)
        self.fc_logits = nn.Linear(width, n_components)
        self.fc_mu = nn.Linear(width, n_components * d_out)
        self.fc_log_scale = nn.Linear(width, n_components * d_out)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.trunk(x)
        log_w = F.log_softmax(self.fc_logits(h), dim=-1)
        mu = self.fc_mu(h).view(-1, self.n_components, self.d_out)
        log_scale = self.fc_log_scale(h).view(-1, self.n_components, self.d_out)
        return log_w, mu, log_scale

    def log_prob(self, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """log p(y|x), shape (B,)."""
        log_w, mu, log_scale = self.forward(x)
        z = (y.unsqueeze(1) - mu) * torch.exp(-log_scale)
        log_comp = (-0.5 * z ** 2 - log_scale - 0.5 * np.log(2.0 * np.pi)).sum(dim=-1)
        return torch.logsumexp(log_w + log_comp, dim=-1)


@contextmanager
def deterministic_torch(seed: int):
    """Single-threaded torch with a scoped global RNG seeded from `seed`."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            yield
    finally:
        torch.set_num_threads(previous)


@dataclass
class ConditionalDensityEstimator:
    """
    A trained mixture density network plus the z-score statistics of its
    training set. All public methods take and return raw-space values.
    """
    direction: str
    network: MixtureDensityNetwork
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise CndeError(f"Unknown direction '{self.direction}'. Valid choices: {', '.join(DIRECTIONS)}.")

    @property
    def input_dim(self) -> int:
        return self.network.d_in

    @property
    def output_dim(self) -> int:
        return self.network.d_out

    def _conditioner(self, x: np.ndarray) -> torch.Tensor:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise CndeError(f"Conditioner has dimension {x.shape[1]}, estimator expects {self.input_dim}.")
        return torch.from_numpy((x - self.in_mean) / self.in_std)

    def mixture_params(self, conditioner: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw-space (log weights (K,), means (K, d), scales (K, d)) at one conditioner."""
        with torch.no_grad():
            log_w, mu, log_scale = self.network(self._conditioner(conditioner))
        mu = mu[0].numpy() * self.out_std + self.out_mean
        scale = np.exp(log_scale[0].numpy()) * self.out_std
        return log_w[0].numpy(), mu, scale

    def log_prob(self, outputs: np.ndarray, conditioner: np.ndarray) -> np.ndarray:
        """
        Raw-space log-density of each output row given its conditioner row
        (a single conditioner is broadcast).
        """
        outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
        if outputs.shape[1] != self.output_dim:
            raise CndeError(f"Output has dimension {outputs.shape[1]}, estimator expects {self.output_dim}.")
        x = self._conditioner(conditioner)
        if x.shape[0] == 1 and outputs.shape[0] > 1:
            x = x.expand(outputs.shape[0], -1)
        y = torch.from_numpy((outputs - self.out_mean) / self.out_std)
        with torch.no_grad():
            values = self.network.log_prob(y, x).numpy()
        return values - np.sum(np.log(self.out_std))

    def sample(self, conditioner: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """n raw-space draws at one conditioner."""
        log_w, mu, scale = self.mixture_params(conditioner)
        weights = np.exp(log_w - logsumexp(log_w))
        components = rng.choice(len(weights), size=n, p=weights / weights.sum())
        return mu[components] + scale[components] * rng.standard_normal((n, self.output_dim))

    def architecture(self) -> Dict[str, Any]:
        net = self.network
        return {
            "direction": self.direction,
            "input_dim": net.d_in,
            "output_dim": net.d_out,
            "n_components": net.n_components,
            "hidden_units": net.fc_logits.in_features,
            "hidden_layers": sum(isinstance(m, nn.Linear) for m in net.trunk),
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "out_mean": self.out_mean.tolist(),
            "out_std": self.out_std.tolist(),
            "weight_format": WEIGHT_FORMAT,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in net.state_dict().items()],
        }

    def save(self, path: Path) -> Tuple[Path, Path]:
        """Writes `<path>.json` (architecture) and `<path>.bin` (weights)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
        json_path.write_text(json.dumps(self.architecture(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        blob = np.concatenate([v.detach().numpy().astype("<f8").reshape(-1) for v in self.network.state_dict().values()])
        bin_path.write_bytes(blob.astype("<f8").tobytes())
        get_application_logger().debug(f"Estimator saved to {json_path} / {bin_path}.")
        return json_path, bin_path

    @classmethod
    def load(cls, path: Path) -> "ConditionalDensityEstimator":
        path = Path(path)
        json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
        if not json_path.exists() or not bin_path.exists():
            raise CndeError(f"Estimator files not found at {json_path} / {bin_path}.")
        arch = json.loads(json_path.read_text(encoding="utf-8"))
        if arch.get("weight_format") != WEIGHT_FORMAT:
            raise CndeError(f"Unsupported weight format {arch.get('weight_format')}.")
        net = MixtureDensityNetwork(arch["input_dim"], arch["output_dim"], arch["n_components"],
                                    arch["hidden_units"], arch["hidden_layers"]).double()
        blob = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
        state, offset = {}, 0
        for spec in arch["tensors"]:
            size = int(np.prod(spec["shape"])) if spec["shape"] else 1
            if offset + size > blob.size:
                raise CndeError("Weight blob is shorter than the architecture requires.")
            state[spec["name"]] = torch.from_numpy(blob[offset:offset + size].reshape(spec["shape"]).astype(np.float64))
            offset += size
        if offset != blob.size:
            raise CndeError("Weight blob is longer than the architecture requires.")
        net.load_state_dict(state)
        return cls(arch["direction"], net, np.array(arch["in_mean"]), np.array(arch["in_std"]),
                   np.array(arch["out_mean"]), np.array(arch["out_std"]))


def _zscore_stats(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    if np.any(std == 0):
        get_application_logger().warning(f"Constant training column(s) {np.flatnonzero(std == 0).tolist()}; std set to 1.")
        std = np.where(std == 0, 1.0, std)
    return mean, std


def train_cnde(thetas: np.ndarray, data: np.ndarray, direction: str, config: TrainingConfig = TrainingConfig(),
               seed: SeedStream = SeedStream(0), progress_callback: Optional[ProgressCallback] = None) -> ConditionalDensityEstimator:
    """
    Fits a mixture density network by maximum likelihood with early stopping.

    Args:
        thetas: (n, p) parameters.
        data: (n, d) simulated data or summaries.
        direction (str): "posterior" learns q(θ|x); "likelihood" learns q(x|θ).
        config (TrainingConfig): Optimiser and architecture settings.
        seed (SeedStream): child 0 splits the data, child 1 initialises weights,
                           child 2 orders the mini-batches.

    Returns:
        ConditionalDensityEstimator: The network at its best validation loss.
    """
    logger = get_application_logger()
    if direction not in DIRECTIONS:
        raise CndeError(f"Unknown direction '{direction}'. Valid choices: {', '.join(DIRECTIONS)}.")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if thetas.shape[0] != data.shape[0]:
        raise CndeError("thetas and data must have the same number of rows.")
    n = thetas.shape[0]
    if n < config.min_pairs:
        raise CndeError(f"Need at least {config.min_pairs} training pairs, got {n}.")
    if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(data))):
        raise CndeError("Training pairs contain non-finite values.")

    outputs, conditioners = (thetas, data) if direction == "posterior" else (data, thetas)
    in_mean, in_std = _zscore_stats(conditioners)
    out_mean, out_std = _zscore_stats(outputs)
    x_all = torch.from_numpy((conditioners - in_mean) / in_std)
    y_all = torch.from_numpy((outputs - out_mean) / out_std)

    perm = seed.child(0).generator().permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    batch_rng = seed.child(2).generator()

    with deterministic_torch(seed.child(1).uint32()):
        network = MixtureDensityNetwork(x_all.shape[1], y_all.shape[1], config.n_components,
                                        config.hidden_units, config.hidden_layers).double()
        optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
        best_state, best_val, stale = copy.deepcopy(network.state_dict()), np.inf, 0
        history: Dict[str, List[float]] = {"train": [], "validation": []}
        x_val, y_val = x_all[val_idx], y_all[val_idx]

        for epoch in range(config.max_epochs):
            network.train()
            order = train_idx[batch_rng.permutation(len(train_idx))]
            epoch_loss = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = torch.from_numpy(order[start:start + config.batch_size])
                loss = -network.log_prob(y_all[batch], x_all[batch]).mean()
                if not torch.isfinite(loss):
                    raise CndeError(f"Non-finite training loss at epoch {epoch + 1}; check input scaling.")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss) * len(batch)
            network.eval()
            with torch.no_grad():
                val_loss = float(-network.log_prob(y_val, x_val).mean())
            history["train"].append(epoch_loss / len(order))
            history["validation"].append(val_loss)
            if val_loss < best_val:
                best_val, stale = val_loss, 0
                best_state = copy.deepcopy(network.state_dict())
            else:
                stale += 1
            if progress_callback:
                progress_callback(int(100 * (epoch + 1) / config.max_epochs), f"Epoch {epoch + 1}: validation loss {val_loss:.4f}")
            if stale >= config.patience:
                break
        network.load_state_dict(best_state)
        network.eval()

    logger.info(f"CNDE ({direction}) trained on {n} pairs for {len(history['train'])} epoch(s); "
                f"best validation loss {best_val:.4f}.")
    return ConditionalDensityEstimator(direction, network, in_mean, in_std, out_mean, out_std, history)


def gradient_check(network: MixtureDensityNetwork, outputs: np.ndarray, conditioners: np.ndarray,
                   h: float = 1e-5) -> float:
    """
    Norm-wise relative error between the autograd gradient of the mean
    negative log-likelihood and its central finite-difference estimate.
    """
    y = torch.as_tensor(np.atleast_2d(outputs), dtype=torch.float64)
    x = torch.as_tensor(np.atleast_2d(conditioners), dtype=torch.float64)
    params = [p for p in network.parameters()]
    loss = -network.log_prob(y, x).mean()
    auto = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)]).numpy()

    flat = nn.utils.parameters_to_vector(params).detach().clone()
    numeric = np.empty_like(auto)
    with torch.no_grad():
        for i in range(flat.numel()):
            shifted = flat.clone()
            shifted[i] += h
            nn.utils.vector_to_parameters(shifted, params)
            plus = float(-network.log_prob(y, x).mean())
            shifted[i] -= 2 * h
            nn.utils.vector_to_parameters(shifted, params)
            minus = float(-network.log_prob(y, x).mean())
            numeric[i] = (plus - minus) / (2 * h)
        nn.utils.vector_to_parameters(flat, params)
    denom = max(np.linalg.norm(auto), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(auto - numeric) / denom)
