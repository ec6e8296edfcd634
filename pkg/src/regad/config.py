"""Merged run configuration, loadable from YAML and echoed into outputs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .dataio import AugmentationConfig
from .evalkit import EvalConfig
from .normest import EstimateConfig
from .regtrain import TrainConfig
from .scoring import ScoreConfig


@dataclass
class RunConfig:
    data_root: Optional[str] = None
    dataset_kind: str = "mvtec"
    seed: int = 0
    jobs: int = 1
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["aug"]["translation_offsets"] = [list(o) for o in self.aug.translation_offsets]
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        cfg = cls()
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            current = getattr(cfg, key)
            if is_dataclass(current):
                section_fields = {f.name for f in fields(current)}
                bad = set(value or {}) - section_fields
                if bad:
                    raise ValueError(f"unknown keys in section {key!r}: {sorted(bad)}")
                merged = {**asdict(current), **(value or {})}
                setattr(cfg, key, type(current)(**merged))
            else:
                setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def write_run_files(out_dir: Path, cfg: RunConfig, artifacts) -> None:
    """Echo the resolved config and a manifest of produced files into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(cfg.dump())
    lines = sorted(str(Path(a)) for a in artifacts)
    (out_dir / "manifest.txt").write_text("".join(f"{line}\n" for line in lines))
