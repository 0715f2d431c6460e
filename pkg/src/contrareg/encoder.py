"""Per-modality image-to-image encoders, their training loop, checkpointing,
and full-image inference.

The network is a dense U-Net: an initial convolution, densely connected
blocks separated by pooling transitions on the way down, a dense bottleneck,
and interpolation-based upsampling transitions with skip concatenations on
the way up. No activation is applied to the final convolution, so the
representation values are unbounded reals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .contrastive import CriticSpec, EncodedBatch, LossConfig, encode_batch, infonce_from_similarity, similarity_matrix
from .data import AugmentationConfig, MultimodalSample, batch_seed, sample_batch
from .image import Image

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; training never continues silently."""


@dataclass
class EncoderConfig:
    in_channels: int = 1
    out_channels: int = 1
    first_conv_filters: int = 32
    num_blocks: int = 4  # dense blocks on each of the down and up paths
    block_depth: int = 6
    bottleneck_layers: int = 4
    growth_rate: int = 12
    compression: float = 0.75
    dropout: float = 0.2
    pooling: str = "max"
    upsampling: str = "bilinear"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError(f"compression must be in (0, 1], got {self.compression}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_blocks < 1 or self.block_depth < 1 or self.bottleneck_layers < 1:
            raise ValueError("block counts must be >= 1")
        if self.growth_rate < 1 or self.first_conv_filters < 1:
            raise ValueError("filter counts must be >= 1")
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")
        if self.upsampling not in ("bilinear", "nearest"):
            raise ValueError(f"upsampling must be 'bilinear' or 'nearest', got {self.upsampling!r}")

    @property
    def pad_multiple(self) -> int:
        return 2**self.num_blocks


class _DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth: int, dropout: float):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_ch)
        self.conv = nn.Conv2d(in_ch, growth, kernel_size=3, padding=1, bias=False)
        self.drop = nn.Dropout2d(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        return self.drop(self.conv(F.relu(self.norm(x))))


class _DenseBlock(nn.Module):
    """Densely connected stack; returns (full concat, new features only)."""

    def __init__(self, in_ch: int, depth: int, growth: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            _DenseLayer(in_ch + i * growth, growth, dropout) for i in range(depth)
        )
        self.new_channels = depth * growth
        self.out_channels = in_ch + depth * growth

    def forward(self, x):
        feats = []
        cur = x
        for layer in self.layers:
            y = layer(cur)
            feats.append(y)
            cur = torch.cat([cur, y], dim=1)
        return cur, torch.cat(feats, dim=1)


class _TransitionDown(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dropout: float, pooling: str):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=1, bias=False)
        self.drop = nn.Dropout2d(dropout) if dropout > 0 else nn.Identity()
        self.pool = nn.MaxPool2d(2) if pooling == "max" else nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.drop(self.conv(F.relu(self.norm(x)))))


class _TransitionUp(nn.Module):
    """Interpolation upsampling followed by a convolution (no transposed conv)."""

    def __init__(self, in_ch: int, out_ch: int, mode: str):
        super().__init__()
        self.mode = mode
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False)

    def forward(self, x, size):
        kwargs = {"align_corners": False} if self.mode == "bilinear" else {}
        return self.conv(F.interpolate(x, size=size, mode=self.mode, **kwargs))


class DenseUNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.first = nn.Conv2d(cfg.in_channels, cfg.first_conv_filters, kernel_size=3, padding=1)
        ch = cfg.first_conv_filters
        self.down_blocks = nn.ModuleList()
        self.down_transitions = nn.ModuleList()
        skip_channels = []
        for _ in range(cfg.num_blocks):
            block = _DenseBlock(ch, cfg.block_depth, cfg.growth_rate, cfg.dropout)
            self.down_blocks.append(block)
            skip_channels.append(block.out_channels)
            out_ch = max(1, math.floor(block.out_channels * cfg.compression))
            self.down_transitions.append(_TransitionDown(block.out_channels, out_ch, cfg.dropout, cfg.pooling))
            ch = out_ch
        self.bottleneck = _DenseBlock(ch, cfg.bottleneck_layers, cfg.growth_rate, cfg.dropout)
        carry = self.bottleneck.new_channels
        self.up_transitions = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for skip_ch in reversed(skip_channels):
            self.up_transitions.append(_TransitionUp(carry, carry, cfg.upsampling))
            block = _DenseBlock(carry + skip_ch, cfg.block_depth, cfg.growth_rate, cfg.dropout)
            self.up_blocks.append(block)
            carry = block.new_channels
        self.final = nn.Conv2d(self.up_blocks[-1].out_channels, cfg.out_channels, kernel_size=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        mult = self.cfg.pad_multiple
        if h < mult or w < mult:
            raise ValueError(f"input {h}x{w} smaller than the network minimum {mult}x{mult}")
        pad_h = (-h) % mult
        pad_w = (-w) % mult
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        cur = self.first(x)
        skips = []
        for block, trans in zip(self.down_blocks, self.down_transitions):
            full, _ = block(cur)
            skips.append(full)
            cur = trans(full)
        _, cur = self.bottleneck(cur)
        full = None
        for trans, block, skip in zip(self.up_transitions, self.up_blocks, reversed(skips)):
            up = trans(cur, size=skip.shape[-2:])
            full, cur = block(torch.cat([up, skip], dim=1))
        out = self.final(full)
        if pad_h or pad_w:
            out = out[..., :h, :w]
        return out

    def layer_list(self) -> list[str]:
        """Flat module inventory, recorded in checkpoints for auditability."""
        return [f"{name}: {type(mod).__name__}" for name, mod in self.named_modules() if name]


def build_encoder(cfg: EncoderConfig, seed: int) -> DenseUNet:
    """Construct an encoder; identical seeds yield identical parameters."""
    torch.manual_seed(int(seed))
    return DenseUNet(cfg)


@dataclass
class Representation:
    """Dense representation map produced by one modality's encoder."""

    values: np.ndarray  # (c, h, w) float32
    modality: str = ""
    checkpoint_id: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim == 2:
            vals = vals[None]
        if vals.ndim != 3:
            raise ValueError(f"values must be (c, h, w), got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("representation values must be finite")
        object.__setattr__(self, "values", vals.astype(np.float32))

    def as_image(self) -> Image:
        lo = float(self.values.min())
        hi = float(self.values.max())
        if hi <= lo:
            hi = lo + 1.0
        return Image(self.values, modality=self.modality, value_range=(lo, hi))


def forward_image(model: DenseUNet, img: Image, modality: str | None = None) -> Representation:
    """Deterministic full-image inference (eval mode, no dropout)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(img.pixels)).float().unsqueeze(0)
            y = model(x)[0].numpy()
    finally:
        model.train(was_training)
    return Representation(values=y, modality=modality if modality is not None else img.modality)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 1e-2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 8
    steps_per_epoch: int = 32
    epochs: int = 1
    temperature: float = 0.5
    critic: str = "mse"
    critic_reduction: str = "mean"
    group: str = "c4"
    grad_clip: float = 1.0
    activation_l1: float = 0.0
    activation_l2: float = 0.0
    patch_size: tuple[int, int] = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (the loss needs negatives)")
        if self.grad_clip <= 0:
            raise ValueError("gradient clip must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.critic not in ("mse", "cosine", "bilinear"):
            raise ValueError(f"unknown critic {self.critic!r}")
        if self.group not in ("c4", "trivial"):
            raise ValueError(f"group must be 'c4' or 'trivial', got {self.group!r}")


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float


@dataclass
class TrainResult:
    models: dict[str, DenseUNet]
    history: list[StepRecord]
    critic: CriticSpec
    encoder_configs: dict[str, EncoderConfig]
    train_config: TrainConfig


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _make_critic(cfg: TrainConfig, latent_dim: int) -> CriticSpec:
    if cfg.critic == "bilinear":
        return CriticSpec.bilinear(latent_dim, seed=cfg.seed)
    return CriticSpec(kind=cfg.critic, reduction=cfg.critic_reduction)


def train(
    samples: list[MultimodalSample],
    encoder_cfgs: dict[str, EncoderConfig],
    train_cfg: TrainConfig,
    aug_cfg: AugmentationConfig,
    step_callback=None,
) -> TrainResult:
    """Train one encoder per modality with the contrastive objective.

    Deterministic given the seed: model init, batch sampling, group draws,
    and dropout all derive from ``train_cfg.seed``. Aborts on a non-finite
    loss.
    """
    if not samples:
        raise ValueError("empty dataset")
    modalities = [img.modality for img in samples[0].images]
    missing = [m for m in modalities if m not in encoder_cfgs]
    if missing:
        raise ValueError(f"no encoder config for modalities {missing}")
    torch.manual_seed(train_cfg.seed)
    models = {m: build_encoder(encoder_cfgs[m], train_cfg.seed + i) for i, m in enumerate(modalities)}
    model_list = [models[m] for m in modalities]
    for mod in model_list:
        mod.train()

    h, w = train_cfg.patch_size
    latent_dim = encoder_cfgs[modalities[0]].out_channels * h * w
    critic = _make_critic(train_cfg, latent_dim)
    params = [p for mod in model_list for p in mod.parameters()]
    if critic.kind == "bilinear":
        params.append(critic.bilinear_weights)
    if train_cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    else:
        opt = torch.optim.SGD(
            params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay, momentum=train_cfg.momentum
        )
    loss_cfg = LossConfig(temperature=train_cfg.temperature, group=train_cfg.group, modalities=len(modalities))
    draw_rng = np.random.default_rng([train_cfg.seed, 0xC4])

    history: list[StepRecord] = []
    step = 0
    for _epoch in range(train_cfg.epochs):
        for _ in range(train_cfg.steps_per_epoch):
            tuples = sample_batch(
                samples, train_cfg.batch_size, train_cfg.patch_size, aug_cfg, batch_seed(train_cfg.seed, step)
            )
            encoded: EncodedBatch = encode_batch(model_list, tuples, loss_cfg, draw_rng)
            s = similarity_matrix(encoded.batch, critic, train_cfg.temperature)
            loss = infonce_from_similarity(s, encoded.batch.n_modalities, encoded.batch.n_tuples)
            lat = encoded.batch.latents
            if train_cfg.activation_l1 > 0:
                loss = loss + train_cfg.activation_l1 * lat.abs().mean()
            if train_cfg.activation_l2 > 0:
                loss = loss + train_cfg.activation_l2 * lat.pow(2).mean()
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at step {step} "
                    f"(similarity range [{float(s.min()):.4g}, {float(s.max()):.4g}])"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
            post_clip = _global_grad_norm(params)
            opt.step()
            history.append(StepRecord(step=step, loss=loss_val, grad_norm=post_clip))
            if step_callback is not None:
                step_callback(history[-1])
            step += 1
    return TrainResult(
        models=models,
        history=history,
        critic=critic,
        encoder_configs=dict(encoder_cfgs),
        train_config=train_cfg,
    )


def write_history_csv(history: list[StepRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "grad_norm"])
        for rec in history:
            writer.writerow([rec.step, repr(rec.loss), repr(rec.grad_norm)])


# ---------------------------------------------------------------------------
# Checkpointing


@dataclass
class Checkpoint:
    modalities: list[str]
    encoder_configs: dict[str, EncoderConfig]
    train_config: TrainConfig
    state_dicts: dict[str, dict]
    critic_kind: str
    critic_weights: torch.Tensor | None
    history: list[StepRecord]
    seed: int
    layer_lists: dict[str, list[str]]
    format_version: int = CHECKPOINT_FORMAT_VERSION
    _models: dict[str, DenseUNet] = field(default_factory=dict, repr=False)

    def model(self, modality: str) -> DenseUNet:
        if modality not in self.modalities:
            raise ValueError(f"checkpoint has no modality {modality!r}; available: {self.modalities}")
        if modality not in self._models:
            net = DenseUNet(self.encoder_configs[modality])
            net.load_state_dict(self.state_dicts[modality])
            net.eval()
            self._models[modality] = net
        return self._models[modality]


def save_checkpoint(result: TrainResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "modalities": list(result.models),
        "encoder_configs": {m: asdict(c) for m, c in result.encoder_configs.items()},
        "train_config": asdict(result.train_config),
        "state_dicts": {m: mod.state_dict() for m, mod in result.models.items()},
        "critic_kind": result.critic.kind,
        "critic_weights": (
            result.critic.bilinear_weights.detach() if result.critic.bilinear_weights is not None else None
        ),
        "history": [asdict(r) for r in result.history],
        "seed": result.train_config.seed,
        "layer_lists": {m: mod.layer_list() for m, mod in result.models.items()},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    train_cfg_raw = dict(payload["train_config"])
    train_cfg_raw["patch_size"] = tuple(train_cfg_raw["patch_size"])
    return Checkpoint(
        modalities=payload["modalities"],
        encoder_configs={m: EncoderConfig(**c) for m, c in payload["encoder_configs"].items()},
        train_config=TrainConfig(**train_cfg_raw),
        state_dicts=payload["state_dicts"],
        critic_kind=payload["critic_kind"],
        critic_weights=payload["critic_weights"],
        history=[StepRecord(**r) for r in payload["history"]],
        seed=payload["seed"],
        layer_lists=payload["layer_lists"],
    )


def infer_representation(checkpoint: Checkpoint, img: Image) -> Representation:
    """Full-image representation through the checkpointed encoder for the
    image's modality."""
    if img.modality not in checkpoint.modalities:
        raise ValueError(
            f"image modality {img.modality!r} not covered by checkpoint (has {checkpoint.modalities})"
        )
    rep = forward_image(checkpoint.model(img.modality), img)
    rep.checkpoint_id = f"v{checkpoint.format_version}-seed{checkpoint.seed}"
    return rep


# ---------------------------------------------------------------------------
# Visualization


def visualize(
    rep: Representation,
    mode: str = "logistic",
    temperature: float = 0.5,
    partner: Representation | None = None,
) -> Image:
    """Render a representation as an 8-bit image.

    ``logistic`` squashes values through 255 * sigmoid(v / T) (intended for
    single-channel maps); ``joint_percentile`` rescales by the 1st/99th
    percentile envelope shared with ``partner`` (intended for 3-channel
    maps). Quantization rounds half to even.
    """
    v = rep.values.astype(np.float64)
    if mode == "logistic":
        from scipy.special import expit

        scaled = 255.0 * expit(v / temperature)
    elif mode == "joint_percentile":
        other = partner.values.astype(np.float64) if partner is not None else v
        lo = max(np.percentile(v, 1.0), np.percentile(other, 1.0))
        hi = min(np.percentile(v, 99.0), np.percentile(other, 99.0))
        if hi <= lo:
            hi = lo + 1e-12
        scaled = 255.0 * np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    else:
        raise ValueError(f"unknown visualization mode {mode!r}")
    quantized = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return Image(quantized, modality=rep.modality, value_range=(0.0, 255.0))
