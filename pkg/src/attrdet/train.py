"""Training loop with stateless per-step randomness, so a resumed run
replays the uninterrupted one exactly."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .config import Config
from .loss import LossConfig, loss_total
from .model import ATTR, rasterize_targets
from .optim import AdamW
from .rng import derive_seed
from .synth import SceneSample, augment

CKPT_NAME = "last.ckpt"
LOG_NAME = "loss_log.txt"


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    lr_backbone: float
    terms: dict = field(default_factory=dict)

    def row(self) -> str:
        return f"{self.step}\t{self.loss:.6f}\t{self.lr:.3e}\t{self.lr_backbone:.3e}"


def make_optimizer(model: ATTR, cfg: Config) -> AdamW:
    return AdamW(dict(model.named_parameters()), cfg.lr, cfg.weight_decay, cfg.total_steps, model.param_groups())


def training_state(model: ATTR, opt: AdamW) -> dict[str, np.ndarray]:
    state = {f"model.{k}": v for k, v in model.state_dict().items()}
    state.update(opt.state_dict())
    return state


def restore_state(model: ATTR, opt: AdamW | None, blob: dict[str, np.ndarray]):
    model.load_state_dict({k[len("model."):]: v for k, v in blob.items() if k.startswith("model.")})
    if opt is not None:
        opt.load_state_dict(blob)


def load_model(path, cfg: Config) -> ATTR:
    model = ATTR(cfg)
    blob = checkpoint.load(path)
    restore_state(model, None, blob)
    return model


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def train_step(model: ATTR, opt: AdamW, samples: list[SceneSample], cfg: Config, step: int,
               loss_cfg: LossConfig) -> StepRecord:
    idx = batch_indices(cfg.seed, step, len(samples), cfg.batch_size)
    lrs = opt.group_lrs()
    total = 0.0
    terms: dict = {}
    loss_sum = None
    for b, i in enumerate(idx):
        item_seed = derive_seed(derive_seed(cfg.seed, step), b)
        sample = augment(samples[i], item_seed) if cfg.augment else samples[i]
        out = model(sample.image)
        gt = rasterize_targets(sample.instances, out.meta)
        rng = np.random.default_rng(item_seed)
        res = loss_total(out, gt, rng, loss_cfg)
        loss_sum = res.total if loss_sum is None else loss_sum + res.total
        total += float(res.total.data)
        for k, v in res.terms.items():
            terms[k] = terms.get(k, 0.0) + v / len(idx)
    opt.zero_grad()
    (loss_sum * (1.0 / len(idx))).backward()
    opt.step()
    return StepRecord(step, total / len(idx), lrs[0], lrs[-1], terms)


def train(cfg: Config, samples: list[SceneSample], out_dir: str | Path | None = None, resume: bool = False,
          stop_at: int | None = None, callback: Callable[[StepRecord], None] | None = None) -> tuple[ATTR, list[StepRecord]]:
    """Train for ``cfg.total_steps`` (or until ``stop_at``), checkpointing to
    ``out_dir`` every ``cfg.save_every`` steps and at the end."""
    if not samples:
        raise ValueError("no training samples")
    model = ATTR(cfg)
    opt = make_optimizer(model, cfg)
    loss_cfg = LossConfig.from_config(cfg)
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    log_rows: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / CKPT_NAME).exists():
            restore_state(model, opt, checkpoint.load(out / CKPT_NAME))
            start = opt.state.step
            if (out / LOG_NAME).exists():
                log_rows = (out / LOG_NAME).read_text().splitlines()[:start]
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    records = []

    def save():
        if out is None:
            return
        checkpoint.save(out / CKPT_NAME, training_state(model, opt))
        (out / LOG_NAME).write_text("".join(r + "\n" for r in log_rows))

    for step in range(start, end):
        rec = train_step(model, opt, samples, cfg, step, loss_cfg)
        records.append(rec)
        log_rows.append(rec.row())
        if callback is not None:
            callback(rec)
        if (step + 1) % cfg.save_every == 0:
            save()
    save()
    return model, records
