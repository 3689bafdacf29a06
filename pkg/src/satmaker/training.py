"""Training loop over (image, DEM, prompt) triples.

Phase A is the usual noise-prediction objective. Phase B generates ``x_hat``
with a short differentiable DDIM chain and descends on
``L_recon + L_dis + lambda_style * L_style``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from satmaker import checkpoint as ckpt
from satmaker.denoiser import Arch, PromptSpec, init_denoiser, normalize_dem, prompt_vocab
from satmaker.diffusion import (
    ChainRequest,
    NoiseSchedule,
    ddim_timesteps,
    forward_diffuse,
    make_schedule,
    run_chain,
    start_step,
    to_model_space,
    from_model_space,
)
from satmaker.errors import ConfigError, DivergenceError, GeometryError
from satmaker.lora import attach_lora
from satmaker.perceptual import (
    LAMBDA_STYLE,
    FeatureExtractor,
    KernelConfig,
    extract_features,
    make_extractor,
    mmd,
    positions,
    style_loss,
)
from satmaker.raster_io import read_raster

LOG_FIELDS = ["step", "epoch", "phase", "recon", "dis", "style", "total"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 1
    batch: int = 8
    lambda_style: float = LAMBDA_STYLE
    phase_b_steps: int = 0
    phase_b_lr: float | None = None  # None: phase B uses ``lr``
    ddim_steps_train: int = 10
    train_strength: float = 0.5
    seed: int = 0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    optimizer: str = "sgd"
    cond_drop: float = 0.0
    lora_rank: int = 0
    arch: Arch = field(default_factory=Arch)
    checkpoint_every: int = 0
    T: int = 1000

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"learning rate must be a finite non-negative number, got {self.lr}")
        if self.phase_b_lr is not None and (not self.phase_b_lr >= 0 or not math.isfinite(self.phase_b_lr)):
            raise ConfigError(f"phase-B learning rate must be a finite non-negative number, got {self.phase_b_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0.0 <= self.cond_drop < 1.0:
            raise ConfigError("cond_drop must lie in [0, 1)")

    def lr_for(self, phase: str) -> float:
        return self.phase_b_lr if phase == "B" and self.phase_b_lr is not None else self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"]["widths"] = list(self.arch.widths)
        return d


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W) unit interval
    dem: np.ndarray  # (H, W) raw elevation in [0, 1]
    prompt: PromptSpec
    scene: str = ""
    previous: np.ndarray | None = None  # preceding frame of a time series, if any


@dataclass
class Batch:
    x: torch.Tensor  # model space, (B, 1, H, W)
    dem: torch.Tensor  # normalised, (B, 1, H, W)
    prompts: list

    def __len__(self):
        return self.x.shape[0]


def make_batch(samples, dtype=torch.float32) -> Batch:
    if not samples:
        raise ConfigError("batch must not be empty")
    x = torch.stack([torch.from_numpy(np.asarray(s.image, dtype=np.float32)) for s in samples])[:, None]
    d = torch.stack([torch.from_numpy(np.asarray(s.dem, dtype=np.float32)) for s in samples])[:, None]
    if x.shape != d.shape:
        raise GeometryError(f"image batch {tuple(x.shape)} and dem batch {tuple(d.shape)} differ")
    return Batch(to_model_space(x).to(dtype), normalize_dem(d.to(torch.float64)).to(dtype),
                 [s.prompt for s in samples])


@dataclass
class LossBreakdown:
    recon: float
    dis: float
    style: float
    total: float
    phase: str


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-image squared L2 error, normalised per pixel."""
    if x.shape != x_hat.shape:
        raise GeometryError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    x = torch.as_tensor(x)
    per_image = ((x - x_hat) ** 2).flatten(1).mean(dim=1) if x.dim() > 1 else (x - x_hat) ** 2
    return per_image.mean()


def step_generator(seed: int, step: int) -> torch.Generator:
    mixed = (int(seed) * 1_000_003 + int(step) * 7919 + 17) & (2**63 - 1)
    return torch.Generator().manual_seed(mixed)


def _check_finite(component: str, value: torch.Tensor):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise DivergenceError(component, v)


def _cond(batch: Batch, cfg: TrainConfig, gen: torch.Generator) -> torch.Tensor:
    if cfg.cond_drop <= 0:
        return batch.dem
    keep = (torch.rand((len(batch), 1, 1, 1), generator=gen) >= cfg.cond_drop).to(batch.dem.dtype)
    return batch.dem * keep


def phase_a_loss(model, batch: Batch, cfg: TrainConfig, sched: NoiseSchedule, gen: torch.Generator):
    t = torch.randint(0, sched.T, (len(batch),), generator=gen)
    eps = torch.randn(batch.x.shape, generator=gen, dtype=batch.x.dtype)
    ab = torch.as_tensor(sched.alpha_bar, dtype=batch.x.dtype)[t].view(-1, 1, 1, 1)
    x_t = ab.sqrt() * batch.x + (1.0 - ab).sqrt() * eps
    dem = _cond(batch, cfg, gen)
    eps_hat = model(x_t, t, dem, batch.prompts)
    return F.mse_loss(eps_hat, eps)


def generate(model, batch: Batch, cfg: TrainConfig, sched: NoiseSchedule, gen: torch.Generator) -> torch.Tensor:
    """Differentiable short-chain reconstruction ``x_hat = f_gen(x, c, p, theta)`` in unit space."""
    t_start = start_step(cfg.train_strength, sched.T)
    eps = torch.randn(batch.x.shape, generator=gen, dtype=batch.x.dtype)
    x_start = forward_diffuse(batch.x, t_start, eps, sched)
    req = ChainRequest(x_start, ddim_timesteps(cfg.ddim_steps_train, t_start), batch.dem, batch.prompts)
    out = run_chain(model, req, sched, 0.0, gen, grad=True)
    return from_model_space(out)


def phase_b_losses(model, batch: Batch, cfg: TrainConfig, sched: NoiseSchedule,
                   ex: FeatureExtractor, gen: torch.Generator):
    x = from_model_space(batch.x)
    x_hat = generate(model, batch, cfg, sched, gen)
    recon = recon_loss(x, x_hat)
    fg = extract_features(x_hat, ex)
    with torch.no_grad():
        fr = extract_features(x, ex)
    dis = mmd(positions(fg.content), positions(fr.content), cfg.kernel)
    style = style_loss(fg, fr)
    total = recon + dis + cfg.lambda_style * style
    return total, recon, dis, style


def _sgd_update(model, lr: float):
    with torch.no_grad():
        for p in model.parameters():
            if p.requires_grad and p.grad is not None:
                p.add_(p.grad, alpha=-lr)


def train_step(model, batch: Batch, cfg: TrainConfig, sched: NoiseSchedule | None = None,
               ex: FeatureExtractor | None = None, optimizer=None, step: int = 0,
               phase: str = "A") -> LossBreakdown:
    """One update of ``model`` in place. Without an optimizer this is plain SGD.

    The step size is ``cfg.lr_for(phase)``; an optimizer's groups are set to it.
    """
    if len(batch) == 0:
        raise ConfigError("batch must not be empty")
    sched = sched or make_schedule(cfg.T)
    gen = step_generator(cfg.seed, step)
    model.zero_grad(set_to_none=True)
    if phase == "A":
        loss = phase_a_loss(model, batch, cfg, sched, gen)
        _check_finite("recon", loss)
        parts = (float(loss.detach()), 0.0, 0.0)
        total = loss
    elif phase == "B":
        ex = ex or make_extractor()
        total, recon, dis, style = phase_b_losses(model, batch, cfg, sched, ex, gen)
        for name, v in (("recon", recon), ("dis", dis), ("style", style), ("total", total)):
            _check_finite(name, v)
        parts = (float(recon.detach()), float(dis.detach()), float(style.detach()))
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    total.backward()
    lr = cfg.lr_for(phase)
    if optimizer is None:
        _sgd_update(model, lr)
    else:
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
    return LossBreakdown(*parts, parts[0] + parts[1] + cfg.lambda_style * parts[2], phase)


# --- manifests and the epoch loop -------------------------------------------------

def load_samples(manifest_path) -> list[Sample]:
    """Resolve a dataset manifest; every unreadable entry is reported before aborting."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    entries = doc["entries"] if isinstance(doc, dict) else doc
    base = manifest_path.parent
    samples, problems = [], []
    for e in entries:
        try:
            img = read_raster(base / e["image"])
            dem = read_raster(base / e["dem"])
            band = e.get("band") or img.bands[0]
            samples.append(Sample(
                id=e["id"],
                image=img.band(band),
                dem=dem.data[0],
                prompt=PromptSpec.from_dict(e["prompt"]),
                scene=e.get("scene", ""),
                previous=read_raster(base / e["previous"]).data[0] if e.get("previous") else None,
            ))
        except Exception as exc:  # noqa: BLE001 - collected and re-raised below
            problems.append(f"{e.get('id', '?')}: {type(exc).__name__}: {exc}")
    if problems:
        raise ValueError("unreadable manifest entries:\n  " + "\n  ".join(problems))
    if not samples:
        raise ConfigError("manifest resolves to no samples")
    return samples


def manifest_vocab(manifest_path) -> list[str] | None:
    """Prompt vocabulary recorded in a dataset manifest, if any."""
    doc = json.loads(Path(manifest_path).read_text())
    return list(doc["vocab"]) if isinstance(doc, dict) and doc.get("vocab") else None


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return None


def _optimizer_tensors(opt, model) -> dict:
    if opt is None:
        return {}
    out = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"opt::{n}::exp_avg"] = st["exp_avg"]
            out[f"opt::{n}::exp_avg_sq"] = st["exp_avg_sq"]
            out[f"opt::{n}::step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def _restore_optimizer(opt, model, tensors: dict):
    if opt is None:
        return
    params = dict(model.named_parameters())
    for key, value in tensors.items():
        if not key.startswith("opt::"):
            continue
        _, name, slot = key.split("::")
        p = params[name]
        st = opt.state.setdefault(p, {})
        if slot == "step":
            st["step"] = torch.tensor(float(value[0]))
        else:
            st[slot] = value.clone()


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list = field(default_factory=list)
    checkpoint: Path | None = None
    adapters: dict | None = None


def run_training(samples, cfg: TrainConfig, out_dir=None, resume=None, init=None,
                 sched: NoiseSchedule | None = None, ex: FeatureExtractor | None = None,
                 stop_after_epoch: int | None = None, vocab=None) -> TrainResult:
    """Seeded epochs of shuffled batches; phase B fills the last ``phase_b_steps`` steps.

    ``samples`` is a list of :class:`Sample` or a manifest path. ``resume``
    restarts from a checkpoint written by this function; ``init`` loads base
    weights (required for LoRA mode, where only adapters train). A fresh
    model's prompt table covers ``vocab`` (by default the manifest's recorded
    vocabulary, else the training prompts).
    """
    if isinstance(samples, (str, Path)):
        vocab = vocab or manifest_vocab(samples)
        samples = load_samples(samples)
    if not samples:
        raise ConfigError("no training samples")
    sched = sched or make_schedule(cfg.T)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch, step = 0, 0
    extra = {}
    if resume is not None:
        model, head, extra = ckpt.load_model(resume)
        start_epoch = int(head["epoch"])
        step = int(head["step"])
    elif init is not None:
        model, _, _ = ckpt.load_model(init)
    else:
        model = init_denoiser(cfg.arch, vocab or prompt_vocab([s.prompt for s in samples]), cfg.seed)
    for s in samples:
        model.token_ids(s.prompt)  # fail early on unknown tokens

    adapters = None
    if cfg.lora_rank:
        if init is None and resume is None:
            raise ConfigError("LoRA training needs base weights (init checkpoint)")
        adapters = attach_lora(model, cfg.lora_rank, seed=cfg.seed)
        if resume is not None:
            with torch.no_grad():
                for t, a in adapters.items():
                    a.A.copy_(extra[f"lora::{t}::A"])
                    a.B.copy_(extra[f"lora::{t}::B"])
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = _make_optimizer(trainable, cfg)
    _restore_optimizer(opt, model, extra)

    n = len(samples)
    per_epoch = math.ceil(n / cfg.batch)
    total_steps = cfg.epochs * per_epoch
    b_from = total_steps - cfg.phase_b_steps
    log = []
    ex = ex if cfg.phase_b_steps else None
    log_path = out_dir / "train_log.csv" if out_dir is not None else None
    if log_path is not None and resume is None:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)

    last_ckpt = None
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        rows = []
        for i in range(0, n, cfg.batch):
            batch = make_batch([samples[j] for j in order[i:i + cfg.batch]])
            phase = "B" if step >= b_from else "A"
            if phase == "B" and ex is None:
                ex = make_extractor()
            lb = train_step(model, batch, cfg, sched, ex, opt, step, phase)
            rows.append([step, epoch, phase, lb.recon, lb.dis, lb.style, lb.total])
            step += 1
        log.extend(rows)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                w = csv.writer(fh)
                for r in rows:
                    w.writerow([r[0], r[1], r[2]] + [repr(float(v)) for v in r[3:]])
        done = epoch + 1
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            last_ckpt = out_dir / f"ckpt_epoch{done:04d}.smk"
            _save_training_checkpoint(model, last_ckpt, sched, cfg, done, step, opt, adapters)
        if stop_after_epoch is not None and done >= stop_after_epoch:
            break
    model.eval()
    final = None
    if out_dir is not None:
        final = out_dir / "model.smk"
        _save_training_checkpoint(model, final, sched, cfg, done, step, opt, adapters)
        if adapters:
            ckpt.save_adapters(adapters, out_dir / "adapters.smk", ckpt.weights_hash(model))
    return TrainResult(model, log, final or last_ckpt, adapters)


def _save_training_checkpoint(model, path, sched, cfg, epoch, step, opt, adapters):
    extra_t = _optimizer_tensors(opt, model)
    if adapters:
        for t, a in adapters.items():
            extra_t[f"lora::{t}::A"] = a.A
            extra_t[f"lora::{t}::B"] = a.B
    ckpt.save_model(model, path, sched, cfg.seed,
                    extra={"epoch": epoch, "step": step, "train_config": cfg.to_dict()},
                    extra_tensors=extra_t)
