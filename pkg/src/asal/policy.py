"""Budget- and safety-aware query policy phi(budget, history) -> x in [0, 1]^D."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "asal-policy"
CHECKPOINT_VERSION = 1
ACTIVATION = "gelu"


class CheckpointError(ValueError):
    pass


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.GELU(), nn.Linear(hidden, n_out))


class HistoryEncoder(nn.Module):
    """Embeds (x, value) pairs with one shared MLP, optionally attends, sum-pools."""

    def __init__(self, dim: int, embed_dim: int, hidden: int, mode: str):
        super().__init__()
        self.embed = _mlp(dim + 1, hidden, embed_dim)
        self.mode = mode
        if mode == "attention":
            layer = nn.TransformerEncoderLayer(
                d_model=embed_dim,
                nhead=max(1, embed_dim // 16),
                dim_feedforward=hidden,
                dropout=0.0,
                activation=ACTIVATION,
                batch_first=True,
            )
            self.attend = nn.TransformerEncoder(layer, num_layers=2, enable_nested_tensor=False)
        elif mode == "deepset":
            self.attend = None
        else:
            raise ValueError(f"unknown encoder mode {mode!r}")

    def point_embeddings(self, X, V):
        return self.embed(torch.cat([X, V.unsqueeze(-1)], dim=-1))

    def forward(self, X, V):
        e = self.point_embeddings(X, V)
        if self.attend is not None:
            e = self.attend(e)
        return e.sum(dim=-2)


@dataclass
class PolicyState:
    """Running history for incremental rollouts."""

    X: torch.Tensor
    Y: torch.Tensor
    Z: Optional[torch.Tensor]
    pooled_y: Optional[torch.Tensor] = None
    pooled_z: Optional[torch.Tensor] = None


class QueryPolicy(nn.Module):
    def __init__(
        self,
        dim: int,
        embed_dim: int = 128,
        hidden: int = 512,
        safety: bool = True,
        budget: bool = True,
        mode: str = "attention",
        max_budget: int = 1,
    ):
        super().__init__()
        self.dim = dim
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.has_safety = safety
        self.has_budget = budget
        self.mode = mode
        self.max_budget = max(1, int(max_budget))
        self.task_encoder = HistoryEncoder(dim, embed_dim, hidden, mode)
        self.safety_encoder = HistoryEncoder(dim, embed_dim, hidden, mode) if safety else None
        self.budget_embed = _mlp(1, hidden, embed_dim) if budget else None
        n_parts = 1 + int(safety) + int(budget)
        self.decision = _mlp(n_parts * embed_dim, hidden, dim)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
            "safety": self.has_safety,
            "budget": self.has_budget,
            "mode": self.mode,
            "max_budget": self.max_budget,
        }

    def _decide(self, E_y, E_z, budget):
        parts = [E_y]
        if self.has_safety:
            parts.append(E_z)
        if self.has_budget:
            b = torch.as_tensor(budget, dtype=E_y.dtype).reshape(-1, 1) / self.max_budget
            parts.append(self.budget_embed(b.expand(E_y.shape[0], 1)))
        h = self.decision(torch.cat(parts, dim=-1))
        return 0.5 * (torch.tanh(h) + 1.0)

    def forward(self, budget, X, Y, Z=None):
        """Next query for a batch of histories ``X (B, n, D)``, ``Y (B, n)``, ``Z (B, n)``."""
        if X.shape[-2] == 0:
            raise ValueError("policy needs a nonempty history")
        E_y = self.task_encoder(X, Y)
        E_z = None
        if self.has_safety:
            if Z is None:
                raise ValueError("safety-aware policy needs safety observations")
            E_z = self.safety_encoder(X, Z)
        return self._decide(E_y, E_z, budget)

    # -- incremental interface used by rollouts --------------------------------

    def start(self, X, Y, Z=None) -> PolicyState:
        if X.shape[-2] == 0:
            raise ValueError("policy needs a nonempty history")
        state = PolicyState(X, Y, Z if self.has_safety else None)
        if self.mode == "deepset":
            state.pooled_y = self.task_encoder.point_embeddings(X, Y).sum(-2)
            if self.has_safety:
                state.pooled_z = self.safety_encoder.point_embeddings(X, Z).sum(-2)
        return state

    def propose(self, state: PolicyState, budget):
        if self.mode == "deepset":
            return self._decide(state.pooled_y, state.pooled_z, budget)
        return self.forward(budget, state.X, state.Y, state.Z)

    def extend(self, state: PolicyState, x, y, z=None) -> PolicyState:
        """Append one observation per batch row: ``x (B, D)``, ``y (B,)``."""
        X = torch.cat([state.X, x.unsqueeze(-2)], dim=-2)
        Y = torch.cat([state.Y, y.unsqueeze(-1)], dim=-1)
        Z = None
        if self.has_safety:
            Z = torch.cat([state.Z, z.unsqueeze(-1)], dim=-1)
        new = PolicyState(X, Y, Z)
        if self.mode == "deepset":
            new.pooled_y = state.pooled_y + self.task_encoder.point_embeddings(x, y)
            if self.has_safety:
                new.pooled_z = state.pooled_z + self.safety_encoder.point_embeddings(x, z)
        return new

    @torch.no_grad()
    def query(self, budget: int, X, Y, Z=None) -> np.ndarray:
        """Single-history numpy convenience wrapper used at deployment."""
        dtype = next(self.parameters()).dtype
        t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype).unsqueeze(0)  # noqa: E731
        X = np.asarray(X, dtype=float).reshape(len(Y), self.dim)
        out = self.forward(budget, t(X), t(Y), t(Z) if self.has_safety else None)
        return out[0].numpy().astype(float)


def init_policy(
    dim: int,
    embed_dim: int = 128,
    seed: int = 0,
    safety: bool = True,
    budget: bool = True,
    mode: str = "attention",
    max_budget: int = 1,
    hidden: int = 512,
    dtype=torch.float64,
) -> QueryPolicy:
    """Build a policy with PyTorch's fan-in scaled uniform init under ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        policy = QueryPolicy(dim, embed_dim, hidden, safety, budget, mode, max_budget)
    return policy.to(dtype)


# -- self-describing checkpoint files ------------------------------------------


def write_archive(path, header: dict, arrays: dict) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)
    return path


def read_archive(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            arrays = {k: data[k] for k in data.files if k != "__header__"}
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError("checkpoint header is not a mapping")
    return header, arrays


def policy_header(policy: QueryPolicy) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "activation": ACTIVATION,
        "dtype": str(next(policy.parameters()).dtype).replace("torch.", ""),
        "policy": policy.config(),
        "parameters": [[k, list(v.shape)] for k, v in policy.state_dict().items()],
        "n_parameters": policy.n_parameters,
    }


def policy_arrays(policy: QueryPolicy, prefix: str = "param/") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in policy.state_dict().items()}


def save_checkpoint(policy: QueryPolicy, path, extra_header=None, extra_arrays=None) -> Path:
    header = policy_header(policy)
    if extra_header:
        header.update(extra_header)
    arrays = policy_arrays(policy)
    if extra_arrays:
        arrays.update(extra_arrays)
    return write_archive(path, header, arrays)


def policy_from_archive(header: dict, arrays: dict, prefix: str = "param/") -> QueryPolicy:
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a policy checkpoint (format={header.get('format')!r})")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    try:
        cfg = dict(header["policy"])
        dtype = getattr(torch, header["dtype"])
        expected = {k: tuple(s) for k, s in header["parameters"]}
    except (KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    policy = QueryPolicy(
        cfg["dim"], cfg["embed_dim"], cfg["hidden"], cfg["safety"], cfg["budget"], cfg["mode"], cfg["max_budget"]
    ).to(dtype)
    state = policy.state_dict()
    if set(state) != set(expected):
        raise CheckpointError("checkpoint parameter list does not match the declared architecture")
    loaded = {}
    for name, ref in state.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"missing array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape) or tuple(arr.shape) != expected[name]:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
        loaded[name] = torch.as_tensor(arr, dtype=dtype)
    policy.load_state_dict(loaded)
    return policy


def load_checkpoint(path) -> QueryPolicy:
    header, arrays = read_archive(path)
    return policy_from_archive(header, arrays)
