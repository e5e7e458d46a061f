"""Alternating adversarial min-max training, evaluation and the ablation ladder."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from .models import CUDGNet, TaskModelConfig
from .objectives import generator_adv_loss, info_nce, mc_task_loss, soft_cross_entropy, total_loss
from .transform import TCConfig, apply_tc_batch, bank_for

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATION_ROWS = ("Baseline", "+ G", "+ TC", "+ Style transfer", "+ Contrastive learning")


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    epochs: int = 20
    batch_size: int = 128
    lr_M: float = 0.1
    lr_G: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_phase_steps: int = 1
    min_phase_steps: int = 1
    # objective
    beta: float = 1.0
    w1: float = 0.1
    K: int = 2
    temperature: float = 0.1
    nce_variant: str = "all_but_self"
    kl_weight: float = 1.0
    smoothing: float = 0.1
    sigma_cap: float = 5.0
    # augmentation
    c: float = 0.1
    k_max: int = 2
    # model
    num_classes: int = 10
    depth: int = 16
    widen_factor: int = 4
    proj_dim: int = 128
    tap_stage: str = "after_block1"
    # component toggles (ablation ladder)
    use_generator: bool = True
    use_tc: bool = True
    use_style: bool = True
    use_contrastive: bool = True
    identity_generator: bool = False
    # data / run
    subset_size: int = 5000
    data_root: str | None = None
    eval_severities: tuple = (1, 3, 5)
    eval_batch_size: int = 500
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        positive = ("epochs", "batch_size", "lr_M", "lr_G", "max_phase_steps", "min_phase_steps", "K",
                    "temperature", "c", "sigma_cap", "eval_batch_size", "num_classes")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta", "w1", "kl_weight", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (style shuffling and InfoNCE need partners)")
        if not 0 <= self.k_max <= 10:
            raise ValueError("k_max must be in [0, 10]")
        self.eval_severities = tuple(int(s) for s in self.eval_severities)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval_severities"] = list(self.eval_severities)
        return d

    def model_config(self) -> TaskModelConfig:
        return TaskModelConfig(depth=self.depth, widen_factor=self.widen_factor, proj_dim=self.proj_dim,
                               tap_stage=self.tap_stage, num_classes=self.num_classes)

    def tc_config(self) -> TCConfig:
        return TCConfig(k_max=self.k_max, fractal_seed=self.seed)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(cfg: TrainConfig) -> CUDGNet:
    return CUDGNet(cfg.model_config(), c=cfg.c, smoothing=cfg.smoothing, sigma_cap=cfg.sigma_cap,
                   use_style=cfg.use_style)


@contextlib.contextmanager
def frozen(params):
    """Disable gradients for ``params`` for the duration of the block."""
    params = list(params)
    flags = [p.requires_grad for p in params]
    try:
        for p in params:
            p.requires_grad_(False)
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


@contextlib.contextmanager
def preserved_buffers(module):
    """Restore BatchNorm running statistics after the block."""
    saved = {k: v.clone() for k, v in module.named_buffers()}
    try:
        yield
    finally:
        own = dict(module.named_buffers())
        with torch.no_grad():
            for k, v in saved.items():
                own[k].copy_(v)


def _stats(t: torch.Tensor | None, prefix: str) -> dict:
    if t is None:
        return {}
    t = t.detach().float()
    return {f"{prefix}_mean": t.mean().item(), f"{prefix}_min": t.min().item(), f"{prefix}_max": t.max().item()}


class Trainer:
    """Owns the model, both optimisers and every random stream of one training run."""

    def __init__(self, cfg: TrainConfig, train_set, *, run_dir=None, log_path=None):
        self.cfg = cfg
        self.train_set = train_set
        self.device = torch.device(cfg.device)
        seed_everything(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.model = build_model(cfg).to(self.device)
        self.opt_M = torch.optim.SGD(self.model.task_parameters(), lr=cfg.lr_M, momentum=cfg.momentum,
                                     weight_decay=cfg.weight_decay, nesterov=cfg.momentum > 0)
        self.opt_G = torch.optim.Adam(self.model.generator_parameters(), lr=cfg.lr_G)
        self.sched = torch.optim.lr_scheduler.CosineAnnealingLR(self.opt_M, T_max=cfg.epochs)
        self.tc_cfg = cfg.tc_config()
        self.bank = None
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir else None
        self.log_path = Path(log_path) if log_path else (self.run_dir / "logs" / "metrics.jsonl" if self.run_dir else None)
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)

    # -- logging -----------------------------------------------------------

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record) + "\n")

    # -- batches -----------------------------------------------------------

    def _prepare(self, idx):
        x01, y = self.train_set.batch(idx)
        if self.cfg.use_tc:
            if self.bank is None:
                self.bank = bank_for(self.tc_cfg, x01.shape[-2:])
            x01 = apply_tc_batch(x01, self.tc_cfg, self.rng, self.bank)
        x = data_mod.normalize(torch.from_numpy(np.ascontiguousarray(x01))).to(self.device)
        y = torch.as_tensor(y, device=self.device)
        return x, y, F.one_hot(y, self.cfg.num_classes).float()

    def _gen_overrides(self, h) -> dict:
        """Forced generator inputs that make the perturbed path reproduce the clean one."""
        if not self.cfg.identity_generator:
            return {}
        return {"d": torch.ones(h.shape[0], device=h.device), "lam": 1.0, "fire": 0.0, "eps": torch.zeros_like(h)}

    # -- phases ------------------------------------------------------------

    def maximization_step(self, x, y1h) -> dict:
        """Update G (and its mixup head) to increase task loss on S+, M frozen."""
        cfg = self.cfg
        with frozen(self.model.task_parameters()), preserved_buffers(self.model.backbone):
            with torch.no_grad():
                clean = self.model(x)
            pert = self.model(mode="perturbed", y=y1h, h=clean.h, **self._gen_overrides(clean.h))
            loss = generator_adv_loss(pert.logits, pert.y_plus, clean.z, pert.z, cfg.beta)
            self.opt_G.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_G.step()
        rec = {"phase": "max", "adv_loss": loss.item(),
               "adv_ce": soft_cross_entropy(pert.logits.detach(), pert.y_plus.detach()).item()}
        rec.update(_stats(pert.params.mu, "mu"))
        rec.update(_stats(pert.params.sigma, "sigma"))
        rec.update(_stats(pert.lam, "lam"))
        return rec

    def minimization_step(self, x, y, y1h) -> dict:
        """Update M and P on the MC task objective plus the weighted contrastive loss, G frozen."""
        cfg = self.cfg
        with frozen(self.model.generator_parameters()):
            clean = self.model(x)
            task, parts = mc_task_loss(self.model, None, y1h, cfg.K, kl_weight=cfg.kl_weight, h=clean.h,
                                       **self._gen_overrides(clean.h))
            nce = torch.zeros((), device=self.device)
            if cfg.use_contrastive:
                nce = info_nce(clean.z, parts["outputs"][0].z, cfg.temperature, variant=cfg.nce_variant)
            loss = total_loss(task, nce, cfg.w1 if cfg.use_contrastive else 0.0)
            self.opt_M.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_M.step()
        params = parts["outputs"][0].params
        rec = {"phase": "min", "loss": loss.item(), "task_loss": task.item(), "ce": parts["ce"].item(),
               "kl": parts["kl"].item(), "nce": nce.item(),
               "clean_acc": (clean.logits.argmax(1) == y).float().mean().item()}
        rec.update(_stats(params.mu, "mu"))
        rec.update(_stats(params.sigma, "sigma"))
        return rec

    def erm_step(self, x, y) -> dict:
        logits = self.model(x).logits
        loss = F.cross_entropy(logits, y)
        self.opt_M.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_M.step()
        return {"phase": "erm", "loss": loss.item(), "ce": loss.item(),
                "clean_acc": (logits.argmax(1) == y).float().mean().item()}

    def _check_finite(self, rec: dict) -> None:
        bad = [k for k, v in rec.items() if isinstance(v, float) and not math.isfinite(v)]
        if bad:
            diag = {k: v for k, v in rec.items() if k.startswith(("mu_", "sigma_", "lam_"))}
            raise TrainingDivergedError(f"non-finite {bad} at epoch {self.epoch} step {self.step}; "
                                        f"perturbation stats: {json.dumps(diag)}")

    # -- loop --------------------------------------------------------------

    def train_epoch(self) -> dict:
        cfg = self.cfg
        self.model.train()
        n = len(self.train_set)
        order = self.rng.permutation(n)
        batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        batches = [b for b in batches if len(b) >= 2]
        correct = seen = 0
        t0 = time.perf_counter()
        for idx in batches:
            x, y, y1h = self._prepare(idx)
            records = []
            try:
                if cfg.use_generator:
                    for _ in range(cfg.max_phase_steps):
                        records.append(self.maximization_step(x, y1h))
                    for _ in range(cfg.min_phase_steps):
                        records.append(self.minimization_step(x, y, y1h))
                else:
                    records.append(self.erm_step(x, y))
            except ValueError as exc:
                # the style ops refuse NaN features; surface that as divergence
                if "NaN" not in str(exc):
                    raise
                raise TrainingDivergedError(f"non-finite features at epoch {self.epoch} step {self.step}: "
                                            f"{exc}") from exc
            for rec in records:
                rec = {"step": self.step, "epoch": self.epoch, **rec}
                self._check_finite(rec)
                self._log(rec)
                self.step += 1
                if "clean_acc" in rec:
                    correct += rec["clean_acc"] * len(idx)
                    seen += len(idx)
        self.sched.step()
        summary = {"phase": "epoch", "epoch": self.epoch, "train_acc": correct / max(seen, 1),
                   "lr_M": self.opt_M.param_groups[0]["lr"], "seconds": round(time.perf_counter() - t0, 3)}
        self.epoch += 1
        self._log({k: v for k, v in summary.items() if k != "seconds"})
        logger.info("epoch %d  train_acc %.4f  (%.1fs)", self.epoch, summary["train_acc"], summary["seconds"])
        return summary

    def fit(self, epochs: int | None = None) -> list[dict]:
        target = self.cfg.epochs if epochs is None else min(self.cfg.epochs, self.epoch + epochs)
        while self.epoch < target:
            self.train_epoch()
            if self.run_dir:
                self.save(self.run_dir / "checkpoints" / f"epoch_{self.epoch:03d}.pt")
                self.save(self.run_dir / "checkpoints" / "last.pt")
        return self.history

    # -- checkpoints -------------------------------------------------------

    def state(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "model": self.model.state_dict(),
            "opt_M": self.opt_M.state_dict(),
            "opt_G": self.opt_G.state_dict(),
            "sched": self.sched.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "rng": {
                "numpy": self.rng.bit_generator.state,
                "torch": torch.get_rng_state(),
                "python": random.getstate(),
            },
            "sigma_S_ref": getattr(self, "sigma_S_ref", None),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def resume(cls, path, train_set, **kwargs) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["config"]), train_set, **kwargs)
        trainer.model.load_state_dict(ckpt["model"])
        trainer.opt_M.load_state_dict(ckpt["opt_M"])
        trainer.opt_G.load_state_dict(ckpt["opt_G"])
        trainer.sched.load_state_dict(ckpt["sched"])
        trainer.epoch, trainer.step = ckpt["epoch"], ckpt["step"]
        trainer.rng.bit_generator.state = ckpt["rng"]["numpy"]
        torch.set_rng_state(ckpt["rng"]["torch"])
        random.setstate(ckpt["rng"]["python"])
        return trainer


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types on garbage input
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or not {"config", "model", "version"} <= set(ckpt):
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if ckpt["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ckpt['version']}")
    return ckpt


def model_from_checkpoint(path_or_ckpt, device="cpu") -> tuple[CUDGNet, dict]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, dict) else load_checkpoint(path_or_ckpt)
    cfg = TrainConfig.from_dict(ckpt["config"])
    model = build_model(cfg)
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not match its config: {exc}") from exc
    return model.to(device).eval(), ckpt


# ---------------------------------------------------------------------------
# entry points


def train(cfg: TrainConfig, train_set=None, *, run_dir=None, log_path=None) -> Trainer:
    """Train a model on the source set (loaded from ``cfg.data_root`` unless given)."""
    if train_set is None:
        train_set = data_mod.load_source(cfg.data_root, cfg.subset_size, cfg.seed)
    trainer = Trainer(cfg, train_set, run_dir=run_dir, log_path=log_path)
    trainer.fit()
    return trainer


@torch.no_grad()
def accuracy(model, dataset, batch_size: int = 500, device="cpu") -> float:
    """Clean-mode top-1 accuracy (%) in dataset order; no augmentation or sampling."""
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x01, y = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        x = data_mod.normalize(torch.from_numpy(np.ascontiguousarray(x01))).to(device)
        correct += (model(x).logits.argmax(1).cpu().numpy() == y).sum()
    return 100.0 * correct / len(dataset)


def evaluate(model_or_checkpoint, specs=None, root=None, batch_size: int = 500, device="cpu"):
    """Accuracy per corruption/severity on CIFAR-10-C, aggregated into an EvalReport."""
    if isinstance(model_or_checkpoint, torch.nn.Module):
        model = model_or_checkpoint.to(device).eval()
    else:
        model, _ = model_from_checkpoint(model_or_checkpoint, device)
    specs = data_mod.corruption_specs() if specs is None else [
        s if isinstance(s, data_mod.CorruptionSpec) else data_mod.CorruptionSpec(*s) for s in specs
    ]
    rows = []
    for spec, ds in data_mod.load_cifar10c(root, specs):
        acc = accuracy(model, ds, batch_size, device)
        rows.append((spec.name, spec.severity, acc))
        logger.info("%s-%d: %.2f%%", spec.name, spec.severity, acc)
    return data_mod.aggregate(rows, corruptions=sorted({s.name for s in specs}))


def ablation_variants(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The five cumulative component configurations, identical except for the toggles."""
    toggles = [
        dict(use_generator=False, use_tc=False, use_style=False, use_contrastive=False),
        dict(use_generator=True, use_tc=False, use_style=False, use_contrastive=False),
        dict(use_generator=True, use_tc=True, use_style=False, use_contrastive=False),
        dict(use_generator=True, use_tc=True, use_style=True, use_contrastive=False),
        dict(use_generator=True, use_tc=True, use_style=True, use_contrastive=True),
    ]
    return [(name, dataclasses.replace(cfg, **t)) for name, t in zip(ABLATION_ROWS, toggles)]


@dataclass
class AblationResult:
    name: str
    config: TrainConfig
    report: object
    history: list = field(default_factory=list)


def ablation_ladder(cfg: TrainConfig, train_set=None, specs=None, *, root=None, run_dir=None):
    """Train and evaluate every ablation row; returns a list of AblationResult in table order."""
    if train_set is None:
        train_set = data_mod.load_source(cfg.data_root, cfg.subset_size, cfg.seed)
    root = root if root is not None else cfg.data_root
    if specs is None:
        specs = data_mod.corruption_specs(severities=cfg.eval_severities)
    results = []
    for i, (name, vcfg) in enumerate(ablation_variants(cfg)):
        sub = Path(run_dir) / f"{i}_{name.strip('+ ').replace(' ', '_').lower()}" if run_dir else None
        trainer = train(vcfg, train_set, run_dir=sub)
        report = evaluate(trainer.model, specs, root, cfg.eval_batch_size, cfg.device)
        results.append(AblationResult(name, vcfg, report, trainer.history))
    return results


def ablation_table(results) -> list[dict]:
    return [{"Method": r.name, **r.report.table_row()} for r in results]
