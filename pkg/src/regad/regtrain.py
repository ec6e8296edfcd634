"""Siamese feature-registration training.

A pair of same-category images goes through the shared feature network; the
stage-3 transformed maps are encoded (E) and one branch is passed through the
predictor (P). The loss is the symmetrized negative cosine similarity between
``P(E(a))`` and a stop-gradient ``E(b)``, averaged over spatial positions.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .dataio import IMAGENET_MEAN, IMAGENET_STD, ImageSample, preprocess, to_tensor
from .featnet import STAGE_CHANNELS, FeatureNet, stage_shapes

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
COLLAPSE_STD = 1e-4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine_single_cycle"
    seed: int = 0
    stn_mode: str = "rotation_scale"
    stn_chain: str = "pre"
    freeze_backbone: bool = False
    backbone: str = "imagenet"
    side: int = 224
    encoder_width: int = 256
    predictor_hidden: int = 64

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.schedule != "cosine_single_cycle":
            raise ValueError(f"unsupported schedule {self.schedule!r}")


class RegistrationHeads(nn.Module):
    """Encoder of three 1x1 convs and a bottleneck predictor of two; no pooling."""

    def __init__(self, in_channels: int = STAGE_CHANNELS[-1], width: int = 256,
                 hidden: int = 64):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, width, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 1),
        )
        self.predictor = nn.Sequential(
            nn.Conv2d(width, hidden, 1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, width, 1),
        )


class RegADModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.features = FeatureNet(cfg.stn_mode, cfg.backbone, cfg.stn_chain, cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 2)
            self.heads = RegistrationHeads(STAGE_CHANNELS[-1], cfg.encoder_width,
                                           cfg.predictor_hidden)
        self.cfg = cfg

    def encode(self, f3: torch.Tensor) -> torch.Tensor:
        return self.heads.encoder(f3)

    def forward_pair(self, xa: torch.Tensor, xb: torch.Tensor):
        """Returns (loss, z_a, z_b)."""
        x = torch.cat([xa, xb])
        f3 = self.features(x).post[2]
        z = self.heads.encoder(f3)
        p = self.heads.predictor(z)
        n = xa.shape[0]
        loss = registration_loss(p[:n], z[n:], p[n:], z[:n])
        return loss, z[:n], z[n:]


def cosine_distance(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity along channels, averaged over positions.

    Channels are dim 1 of a batch (dim 0 of a single map). ``z`` is detached.
    Positions with a zero vector contribute 0.
    """
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(z.shape)}")
    z = z.detach()
    dim = 1 if p.dim() == 4 else 0
    dot = (p * z).sum(dim)
    denom = p.norm(dim=dim).clamp(min=NORM_FLOOR) * z.norm(dim=dim).clamp(min=NORM_FLOOR)
    return -(dot / denom).mean()


def registration_loss(p_a, z_b, p_b, z_a) -> torch.Tensor:
    if p_a.shape != z_b.shape or p_b.shape != z_a.shape:
        raise ValueError("registration loss inputs must agree pairwise in shape")
    return 0.5 * (cosine_distance(p_a, z_b) + cosine_distance(p_b, z_a))


def _by_category(pool: Sequence[ImageSample]) -> Dict[str, List[int]]:
    groups = defaultdict(list)
    for i, s in enumerate(pool):
        groups[s.category].append(i)
    return {c: idx for c, idx in sorted(groups.items()) if len(idx) >= 2}


def sample_pair(pool: Sequence[ImageSample], rng: np.random.Generator,
                groups: Optional[Dict[str, List[int]]] = None) -> Tuple[int, int]:
    """Indices of two distinct same-category images.

    The category is uniform over categories holding at least two images,
    then the pair is uniform within it.
    """
    groups = _by_category(pool) if groups is None else groups
    if not groups:
        raise ValueError("no category has at least two images to pair")
    cats = list(groups)
    members = groups[cats[rng.integers(len(cats))]]
    i, j = rng.choice(len(members), size=2, replace=False)
    return members[i], members[j]


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total))


class TensorCache:
    """Preprocessed training images, keyed by pool index."""

    def __init__(self, pool: Sequence[ImageSample], side: int):
        self.pool = pool
        self.side = side
        self._items: Dict[int, torch.Tensor] = {}

    def batch(self, indices: Sequence[int]) -> torch.Tensor:
        out = []
        for i in indices:
            if i not in self._items:
                self._items[i] = to_tensor([preprocess(self.pool[i], self.side)])[0]
            out.append(self._items[i])
        return torch.stack(out)


@dataclass
class TrainResult:
    model: RegADModel
    log_rows: List[Tuple[int, int, float, float]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def _set_train_mode(model: RegADModel, cfg: TrainConfig) -> None:
    model.train()
    if cfg.freeze_backbone:
        model.features.stem.eval()
        model.features.stages.eval()


def _collapse_std(z: torch.Tensor) -> float:
    zn = nn.functional.normalize(z.detach(), dim=1)
    per_channel = zn.transpose(0, 1).reshape(zn.shape[1], -1).std(dim=1)
    return float(per_channel.mean())


def train(train_pool: Sequence[ImageSample], cfg: TrainConfig,
          out_dir: Optional[Path] = None, model: Optional[RegADModel] = None) -> TrainResult:
    """Aggregated registration training over every category in ``train_pool``.

    An epoch is ``ceil(len(pool) / batch_size)`` steps of ``batch_size``
    freshly drawn pairs. With ``out_dir`` the checkpoint and the CSV log
    ``train_log.csv`` (epoch,step,loss,lr) are written there.
    """
    groups = _by_category(train_pool)
    if not groups:
        raise ValueError("no category has at least two images to pair")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = RegADModel(cfg) if model is None else model
    if cfg.freeze_backbone:
        for p in model.features.backbone_parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    cache = TensorCache(train_pool, cfg.side)
    steps_per_epoch = math.ceil(len(train_pool) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    result = TrainResult(model)
    start = time.perf_counter()
    step = 0
    _set_train_mode(model, cfg)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps_per_epoch):
            lr = cosine_lr(cfg.lr, step, total)
            for group in opt.param_groups:
                group["lr"] = lr
            pairs = [sample_pair(train_pool, rng, groups) for _ in range(cfg.batch_size)]
            ia, ib = zip(*pairs)
            loss, za, _ = model.forward_pair(cache.batch(ia), cache.batch(ib))
            if not torch.isfinite(loss):
                ids = [(train_pool[a].source_path, train_pool[b].source_path) for a, b in pairs]
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g}); "
                    f"batch pairs: {ids[:4]}{' ...' if len(ids) > 4 else ''}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            std = _collapse_std(za)
            if std < COLLAPSE_STD:
                log.warning("possible representation collapse: z channel std %.2e", std)
            value = loss.item()
            result.log_rows.append((epoch, step, value, lr))
            losses.append(value)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.4f", epoch, cfg.epochs, result.epoch_losses[-1])
    result.seconds = time.perf_counter() - start
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, cfg, Path(out_dir), result.final_loss)
        write_train_log(Path(out_dir) / "train_log.csv", result.log_rows)
    return result


def write_train_log(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "lr"])
        for epoch, step, loss, lr in rows:
            writer.writerow([epoch, step, repr(loss), repr(lr)])


# -- checkpoints ---------------------------------------------------------------

MODEL_FILE = "model.pt"
META_FILE = "meta.txt"


def save_checkpoint(model: RegADModel, cfg: TrainConfig, out_dir: Path,
                    loss_final: float = float("nan")) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / MODEL_FILE)
    meta = {f"cfg.{k}": v for k, v in asdict(cfg).items()}
    meta.update({
        "stn_mode": cfg.stn_mode,
        "stn_chain": cfg.stn_chain,
        "widths": f"encoder={cfg.encoder_width},predictor_hidden={cfg.predictor_hidden}",
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "loss_final": repr(float(loss_final)),
        "side": cfg.side,
        "stage_shapes": ";".join("x".join(map(str, s)) for s in stage_shapes(cfg.side)),
        "norm_mean": ",".join(map(str, IMAGENET_MEAN)),
        "norm_std": ",".join(map(str, IMAGENET_STD)),
    })
    with open(out_dir / META_FILE, "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
    return out_dir


def read_meta(path: Path) -> Dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _cfg_from_meta(meta: Dict[str, str]) -> TrainConfig:
    fields = TrainConfig.__dataclass_fields__
    kwargs = {}
    for key, value in meta.items():
        if not key.startswith("cfg."):
            continue
        name = key[4:]
        if name not in fields:
            continue
        default = getattr(TrainConfig(), name)
        if isinstance(default, bool):
            kwargs[name] = value == "True"
        elif isinstance(default, int):
            kwargs[name] = int(value)
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return TrainConfig(**kwargs)


def load_checkpoint(ckpt_dir: Path) -> Tuple[RegADModel, TrainConfig, Dict[str, str]]:
    """Rebuild the model from ``ckpt_dir`` in inference mode."""
    ckpt_dir = Path(ckpt_dir)
    model_path, meta_path = ckpt_dir / MODEL_FILE, ckpt_dir / META_FILE
    if not model_path.is_file() or not meta_path.is_file():
        raise FileNotFoundError(f"checkpoint incomplete: expected {model_path} and {meta_path}")
    meta = read_meta(meta_path)
    cfg = _cfg_from_meta(meta)
    # Weights come from the state dict; skip the pretrained lookup.
    build_cfg = TrainConfig(**{**asdict(cfg), "backbone": "random"})
    model = RegADModel(build_cfg)
    model.load_state_dict(torch.load(model_path, map_location="cpu", weights_only=True))
    model.cfg = cfg
    model.eval()
    return model, cfg, meta


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
