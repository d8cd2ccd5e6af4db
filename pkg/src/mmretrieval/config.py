"""Run configuration: one nested, fully-defaulted object per run.

Unknown keys anywhere are rejected so that a typo never silently falls back
to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data_org import OrgConfig, SyntheticSpec
from .encoders import ModelConfig
from .proxy_loss import LossConfig
from .training import CurriculumPhase, TrainConfig, default_plan


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plan: list[CurriculumPhase] = field(default_factory=default_plan)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    organization: OrgConfig = field(default_factory=OrgConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list[str] = field(default_factory=lambda: ["concept", "image_only", "average"])
    sample_caps: list[int] = field(default_factory=lambda: [2, 5, 10])

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.synthetic.validate()
        self.organization.validate()
        if self.train.lr < 0:
            raise ValueError("train.lr must be non-negative")
        if self.model.n_raw != self.synthetic.n_raw:
            raise ValueError("model.n_raw must equal synthetic.n_raw")
        if self.model.vocab < self.synthetic.vocab_size:
            raise ValueError("model.vocab must cover synthetic.vocab_size")
        if self.model.max_text_len < self.synthetic.text_len[1]:
            raise ValueError("model.max_text_len shorter than generated titles")
        for ph in self.plan:
            if ph.dataset not in ("medium", "large"):
                raise ValueError(f"phase {ph.name}: dataset must be 'medium' or 'large'")
            if ph.iterations < 0 or ph.batch_size < 2:
                raise ValueError(f"phase {ph.name}: needs iterations >= 0 and batch_size >= 2")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        _reject_unknown("config", d, cls)
        kw: dict[str, Any] = {}
        for name, sub in (("model", ModelConfig), ("loss", LossConfig), ("train", TrainConfig),
                          ("synthetic", SyntheticSpec), ("organization", OrgConfig)):
            if name in d:
                _reject_unknown(name, d[name], sub)
                vals = dict(d[name])
                for k, v in vals.items():
                    if isinstance(v, list):
                        vals[k] = tuple(v)
                kw[name] = sub(**vals)
        if "plan" in d:
            kw["plan"] = [CurriculumPhase.from_dict(p) for p in d["plan"]]
        for key in ("seeds", "variants", "sample_caps"):
            if key in d:
                kw[key] = list(d[key])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _reject_unknown(where: str, d: Any, cls) -> None:
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a mapping")
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def text_disambiguating_config() -> RunConfig:
    """Dataset where each doc image shows its product beside an object from
    another family; only the title says which object is being sold.

    Objects look the same in every grid patch, so attending to the right
    patches recovers the product exactly while pooling mixes in the distractor.
    Four families with family-level title tokens keep the concept small.
    """
    cfg = RunConfig()
    cfg.synthetic = SyntheticSpec(uniform_patches=True, products_per_family=50, clutter_patches=2,
                                  clicks_per_query=8, family_token_rate=0.8)
    cfg.organization = OrgConfig(clustering=None)
    cfg.validate()
    return cfg


PRESETS = {"default": RunConfig, "text_disambiguating": text_disambiguating_config}
