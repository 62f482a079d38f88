"""Conditional velocity network, regression loss, Adam training loop, and
binary checkpoint format.

The network is a small transformer over non-overlapping image patches.
Conditioning (time + class label, with a reserved null label for
unconditional prediction) enters every block through adaptive layer-norm
modulation. The output head is zero-initialized so a fresh model predicts
the zero velocity field.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .interpolant import InterpolantSchedule, schedule_eval

CHECKPOINT_MAGIC = b"CDPIRCKPT"
CHECKPOINT_VERSION = 1
T_LO = 1e-3  # training excludes t within T_LO of either endpoint

VARIANTS = {
    "big": dict(depth=12, hidden_size=768, n_heads=12),
    "small": dict(depth=12, hidden_size=384, n_heads=6),
    "tiny": dict(depth=4, hidden_size=128, n_heads=4),
}


class CheckpointError(Exception):
    """Raised for unreadable, mismatched, or corrupt checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    n_labels: int
    patch_size: int = 2
    depth: int = 4
    hidden_size: int = 128
    n_heads: int = 4
    variant: str = "tiny"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden_size % self.n_heads != 0:
            raise ValueError("hidden_size must be divisible by n_heads")
        if self.n_labels < 1:
            raise ValueError("need at least one label")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def null_label(self) -> int:
        return self.n_labels

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "n_labels": self.n_labels,
            "patch_size": self.patch_size,
            "depth": self.depth,
            "hidden_size": self.hidden_size,
            "n_heads": self.n_heads,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_variant(cls, variant: str, image_size: int, n_labels: int,
                     patch_size: int = 2) -> "ModelConfig":
        key = variant.lower()
        if key not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return cls(image_size=image_size, n_labels=n_labels, patch_size=patch_size,
                   variant=key, **VARIANTS[key])


@dataclass(frozen=True)
class TrainConfig:
    n_iters: int
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_beta: tuple = (0.9, 0.999)
    label_dropout_prob: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if not 0.0 <= self.label_dropout_prob <= 1.0:
            raise ValueError("label_dropout_prob must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_iters < 0:
            raise ValueError("need batch_size >= 1 and n_iters >= 0")


def sincos_pos_embedding(n_side: int, dim: int) -> np.ndarray:
    """Fixed 2D sine/cosine position table, one row per patch token."""
    if dim % 4 != 0:
        raise ValueError("position embedding dim must be divisible by 4")
    half = dim // 2
    omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2))
    grid = np.arange(n_side, dtype=np.float64)
    gy, gx = np.meshgrid(grid, grid, indexing="ij")

    def encode(pos):
        ang = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([encode(gy), encode(gx)], axis=1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of continuous timesteps, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class Block(nn.Module):
    """Pre-norm attention + MLP block with 6-way adaptive modulation."""

    def __init__(self, hidden: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, 4 * hidden), nn.GELU(approximate="tanh"),
            nn.Linear(4 * hidden, hidden),
        )
        self.modulation = nn.Linear(hidden, 6 * hidden)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, h = x.shape
        d = h // self.n_heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.n_heads, d).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, h)
        return self.proj(out)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(cond).chunk(6, dim=1)
        h = self.norm1(x) * (1 + sc1[:, None]) + sh1[:, None]
        x = x + g1[:, None] * self.attention(h)
        h = self.norm2(x) * (1 + sc2[:, None]) + sh2[:, None]
        return x + g2[:, None] * self.mlp(h)


class VelocityNet(nn.Module):
    """Patch-transformer velocity predictor v(x_t, t; c)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        p, h = config.patch_size, config.hidden_size
        n_side = config.image_size // p
        self.patch_embed = nn.Linear(p * p, h)
        pos = sincos_pos_embedding(n_side, h)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float(), persistent=False)
        self.time_mlp = nn.Sequential(nn.Linear(h, h), nn.SiLU(), nn.Linear(h, h))
        # one extra row: the null (unconditional) label at index n_labels
        self.label_embed = nn.Embedding(config.n_labels + 1, h)
        nn.init.normal_(self.label_embed.weight, std=0.02)
        self.blocks = nn.ModuleList(Block(h, config.n_heads) for _ in range(config.depth))
        self.final_norm = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Linear(h, 2 * h)
        self.head = nn.Linear(h, p * p)
        nn.init.zeros_(self.final_modulation.weight)
        nn.init.zeros_(self.final_modulation.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        p = self.config.patch_size
        n_side = self.config.image_size // p
        x = x.reshape(b, n_side, p, n_side, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, n_side * n_side, p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        p = self.config.patch_size
        n_side = self.config.image_size // p
        x = tokens.reshape(b, n_side, n_side, p, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, n_side * p, n_side * p)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x_t.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, got "
                             f"{tuple(x_t.shape[-2:])}")
        if torch.any(c < 0) or torch.any(c > cfg.null_label):
            raise ValueError(f"labels must lie in [0, {cfg.null_label}]")
        tokens = self.patch_embed(self.patchify(x_t)) + self.pos_embed.to(x_t.dtype)
        cond = self.time_mlp(timestep_embedding(t, cfg.hidden_size)) + self.label_embed(c)
        for block in self.blocks:
            tokens = block(tokens, cond)
        shift, scale = self.final_modulation(cond).chunk(2, dim=1)
        tokens = self.final_norm(tokens) * (1 + scale[:, None]) + shift[:, None]
        return self.unpatchify(self.head(tokens))


def build_model(config: ModelConfig, seed: int | None = None) -> VelocityNet:
    """Construct a network; with a seed, initialization is reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return VelocityNet(config)


def schedule_coefficients(schedule: InterpolantSchedule, t: np.ndarray, dtype, device=None):
    """Interpolant coefficients at per-sample times, broadcastable over images."""
    vals = schedule_eval(schedule, np.asarray(t, dtype=np.float64))

    def lift(a):
        return torch.as_tensor(a, dtype=dtype, device=device).reshape(-1, 1, 1)

    return lift(vals.alpha), lift(vals.sigma), lift(vals.d_alpha), lift(vals.d_sigma)


def velocity_loss(model, x0: torch.Tensor, c: torch.Tensor, t: np.ndarray,
                  eps: torch.Tensor, schedule: InterpolantSchedule) -> torch.Tensor:
    """Mean per-pixel squared velocity regression error for one batch.

    `model` is any callable (x_t, t, c) -> v. The time argument is passed as
    a tensor matching x0's dtype.
    """
    alpha, sigma, d_alpha, d_sigma = schedule_coefficients(schedule, t, x0.dtype, x0.device)
    x_t = alpha * x0 + sigma * eps
    target = d_alpha * x0 + d_sigma * eps
    t_tensor = torch.as_tensor(np.asarray(t, dtype=np.float64), dtype=x0.dtype,
                               device=x0.device)
    v = model(x_t, t_tensor, c)
    return ((v - target) ** 2).mean()


def draw_training_inputs(rng: np.random.Generator, x0: torch.Tensor,
                         domain_ids: np.ndarray, null_label: int,
                         label_dropout_prob: float):
    """Sample (t, eps, labels) for a loss evaluation; dropout replaces a
    label with the null index."""
    n = x0.shape[0]
    t = rng.uniform(T_LO, 1.0 - T_LO, size=n)
    eps = torch.as_tensor(rng.standard_normal(size=tuple(x0.shape)), dtype=x0.dtype)
    labels = np.asarray(domain_ids, dtype=np.int64).copy()
    drop = rng.uniform(size=n) < label_dropout_prob
    labels[drop] = null_label
    return t, eps, torch.as_tensor(labels)


@dataclass
class AdamState:
    """First/second-moment accumulators, keyed by parameter name."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def train_step(model: nn.Module, state: AdamState, lr: float,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update from the gradients on `model`.

    A non-finite gradient rejects the whole step and raises, naming the
    offending parameter.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    for name, p in named:
        if not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in named:
            g = p.grad
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            state.m[name].mul_(b1).add_(g, alpha=1 - b1)
            state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = state.m[name] / bc1
            v_hat = state.v[name] / bc2
            p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
    return state


def train(x0: np.ndarray, domain_ids: np.ndarray, model_config: ModelConfig,
          train_config: TrainConfig, schedule: InterpolantSchedule,
          out_dir=None, log_path=None) -> tuple[VelocityNet, list]:
    """Velocity-matching training over shuffled mini-batches.

    x0 has shape (n, image_size, image_size); domain_ids holds one integer
    label per sample. Returns the trained model and the per-iteration loss
    history. Checkpoints and the loss CSV are written when paths are given.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    domain_ids = np.asarray(domain_ids, dtype=np.int64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise ValueError("x0 must be a nonempty stack of square images")
    if domain_ids.min(initial=0) < 0 or domain_ids.max(initial=0) >= model_config.n_labels:
        raise ValueError("domain ids must lie in [0, n_labels)")

    model = build_model(model_config, seed=train_config.seed)
    data = torch.as_tensor(x0, dtype=torch.float32)
    rng = np.random.default_rng(train_config.seed)
    state = AdamState()
    history = []
    order = rng.permutation(len(data))
    cursor = 0

    for it in range(train_config.n_iters):
        if cursor + train_config.batch_size > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        idx = order[cursor : cursor + train_config.batch_size]
        cursor += train_config.batch_size
        batch = data[idx]
        t, eps, labels = draw_training_inputs(
            rng, batch, domain_ids[idx], model_config.null_label,
            train_config.label_dropout_prob,
        )
        model.zero_grad(set_to_none=True)
        loss = velocity_loss(model, batch, labels, t, eps, schedule)
        loss.backward()
        state = train_step(model, state, train_config.learning_rate,
                           train_config.adam_beta)
        history.append((it, float(loss.detach())))
        if (out_dir is not None and train_config.checkpoint_every > 0
                and (it + 1) % train_config.checkpoint_every == 0):
            save_checkpoint(model, f"{out_dir}/ckpt_{it + 1:06d}.bin", iteration=it + 1)

    if out_dir is not None:
        save_checkpoint(model, f"{out_dir}/ckpt_final.bin", iteration=train_config.n_iters)
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "loss"])
            writer.writerows(history)
    return model, history


def parameter_count(config: ModelConfig) -> int:
    """Analytic learnable-parameter count for a given configuration."""
    h, p = config.hidden_size, config.patch_size
    patch = p * p * h + h
    time_mlp = 2 * (h * h + h)
    labels = (config.n_labels + 1) * h
    per_block = (6 * h * h + 6 * h) + (3 * h * h + 3 * h) + (h * h + h) \
        + (4 * h * h + 4 * h) + (4 * h * h + h)
    final = (2 * h * h + 2 * h) + (h * p * p + p * p)
    return patch + time_mlp + labels + config.depth * per_block + final


def save_checkpoint(model: VelocityNet, path, iteration: int = 0) -> None:
    """Binary checkpoint: magic, version, JSON header, named float32 tensors."""
    header = json.dumps(
        {"model_config": model.config.to_dict(), "iteration": iteration}
    ).encode("utf-8")
    tensors = [(n, p.detach().cpu().numpy().astype("<f4")) for n, p in
               model.named_parameters()]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Read a checkpoint back into a fresh model.

    Returns (model, iteration). An expected_config that differs from the
    stored one is a hard error rather than a silent reshape.
    """
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
        if expected_config is not None and config != expected_config:
            raise CheckpointError(
                f"config mismatch: checkpoint has {config}, expected {expected_config}"
            )
        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            raw = f.read(4 * int(np.prod(dims, dtype=np.int64)))
            if len(raw) != 4 * int(np.prod(dims, dtype=np.int64)):
                raise CheckpointError(f"truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    model = VelocityNet(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {name!r}")
            p.copy_(torch.from_numpy(tensors[name]))
    return model, int(header["iteration"])
