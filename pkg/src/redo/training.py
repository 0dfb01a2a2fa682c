"""Alternating adversarial training: one discriminator update then one
generator update per step, with collapse detection, seeded auto-restart,
CSV metrics, and full-state checkpoints.

Update partition: the generator step touches the mask network, the region
generators and the latent regressor; the discriminator step touches only the
discriminator. Each network's spectral-norm vectors and batch statistics
advance only during its own update (other networks run with state frozen),
so the untouched side stays bit-identical, buffers included.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from .composition import redraw_one
from .evaluation import evaluate_mask_model
from .networks import ModelSet, NetworkConfig, build_models
from .objectives import (
    LossWeights,
    discriminator_hinge_loss,
    generator_adversarial_loss,
    information_conservation_loss,
)
from .primitives import frozen_state, set_state_frozen

METRICS_COLUMNS = ["step", "loss_d", "loss_g", "loss_z", "mask_mass_per_region",
                   "val_acc", "val_iou", "restarts", "wall_time_s"]


class TrainingError(RuntimeError):
    """Raised on non-finite losses; carries the step and loss values."""

    def __init__(self, step: int, **losses):
        self.step = step
        self.losses = losses
        detail = ", ".join(f"{k}={v:.4g}" for k, v in losses.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class TrainingFailedError(RuntimeError):
    """Raised when training collapses more than max_restarts times."""


@dataclass(frozen=True)
class RestartPolicy:
    max_restarts: int = 5
    collapse_epsilon: float = 1e-3
    collapse_patience: int = 100
    probe_window: int = 2000


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 25
    max_steps: int = 10000
    lr_f: float = 1e-5
    lr_gdd: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    weight_decay_f: float = 1e-4
    seed: int = 0
    restart: RestartPolicy = field(default_factory=RestartPolicy)
    checkpoint_every: int = 1000
    eval_every: int = 500
    panel_every: int = 0          # 0 disables sample panels
    target_val_iou: float | None = None   # early stop once validation IoU reaches this

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if self.lr_f <= 0 or self.lr_gdd <= 0:
            raise ValueError("learning rates must be > 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ValueError(f"adam betas must be in [0,1), got {b}")


def derive_seed(base_seed: int, restart_count: int) -> int:
    """Deterministic per-attempt seed; attempt 0 uses the base seed."""
    return (base_seed + 0x9E3779B1 * restart_count) % (2 ** 31)


def sample_latent(d: int, rng: torch.Generator, batch: int | None = None) -> Tensor:
    """Standard-normal latent codes, deterministic given the generator state."""
    if d < 1:
        raise ValueError(f"latent dimension must be >= 1, got {d}")
    shape = (d,) if batch is None else (batch, d)
    return torch.randn(shape, generator=rng)


def sample_region(n: int, rng: torch.Generator) -> int:
    """Uniform region index in 1..n; the background (n) is a legal target."""
    if n < 2:
        raise ValueError(f"need n >= 2 regions, got {n}")
    return int(torch.randint(1, n + 1, (1,), generator=rng).item())


# ---------------------------------------------------------------------------
# collapse detection
# ---------------------------------------------------------------------------

class CollapseMonitor:
    """Tracks consecutive below-threshold region masses inside the probe window."""

    def __init__(self, policy: RestartPolicy, n: int):
        self.policy = policy
        self.consecutive = [0] * n

    def record(self, step: int, masses) -> bool:
        p = self.policy
        for k, mass in enumerate(masses):
            if step <= p.probe_window and mass < p.collapse_epsilon:
                self.consecutive[k] += 1
            else:
                self.consecutive[k] = 0
        return any(c >= p.collapse_patience for c in self.consecutive)


def detect_collapse(mass_history, policy: RestartPolicy) -> bool:
    """Replay a [(step, per-region masses), ...] history through the rule:
    collapse iff some region stays below collapse_epsilon for
    collapse_patience consecutive logged steps within the probe window."""
    if not mass_history:
        return False
    monitor = CollapseMonitor(policy, len(mass_history[0][1]))
    return any(monitor.record(step, masses) for step, masses in mass_history)


# ---------------------------------------------------------------------------
# optimizers and state
# ---------------------------------------------------------------------------

def _make_optimizers(models: ModelSet, cfg: TrainConfig) -> dict[str, torch.optim.Adam]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return {
        "mask_net": torch.optim.Adam(models.mask_net.parameters(), lr=cfg.lr_f,
                                     betas=betas, eps=cfg.adam_eps,
                                     weight_decay=cfg.weight_decay_f),
        "generators": torch.optim.Adam(models.generators.parameters(), lr=cfg.lr_gdd,
                                       betas=betas, eps=cfg.adam_eps),
        "discriminator": torch.optim.Adam(models.discriminator.parameters(),
                                          lr=cfg.lr_gdd, betas=betas, eps=cfg.adam_eps),
        "regressor": torch.optim.Adam(models.regressor.parameters(), lr=cfg.lr_gdd,
                                      betas=betas, eps=cfg.adam_eps),
    }


@dataclass
class TrainState:
    models: ModelSet
    optimizers: dict
    rng: torch.Generator
    weights: LossWeights
    step: int = 0
    restart_count: int = 0
    base_seed: int = 0

    @classmethod
    def initialize(cls, net_config: NetworkConfig, train_config: TrainConfig,
                   weights: LossWeights, restart_count: int = 0) -> "TrainState":
        seed = derive_seed(train_config.seed, restart_count)
        models = build_models(net_config, seed)
        rng = torch.Generator().manual_seed(seed)
        return cls(models=models, optimizers=_make_optimizers(models, train_config),
                   rng=rng, weights=weights, restart_count=restart_count,
                   base_seed=train_config.seed)


# ---------------------------------------------------------------------------
# the two update functions
# ---------------------------------------------------------------------------

def _require_finite(step: int, **losses) -> None:
    values = {k: float(v.detach() if isinstance(v, Tensor) else v)
              for k, v in losses.items()}
    if any(not math.isfinite(v) for v in values.values()):
        raise TrainingError(step, **values)


def synthesize_redrawn(models: ModelSet, batch: Tensor, region: int, z: Tensor) -> tuple[Tensor, Tensor]:
    """Mask the batch, repaint one region, reassemble. Returns (image, masks)."""
    masks = models.mask_net(batch)
    appearance = models.generators(masks[:, region - 1:region], z, region)
    return redraw_one(batch, masks, appearance, region), masks


def generator_update(state: TrainState, batch: Tensor) -> dict:
    """One Algorithm-1 generator step: Adam on the mask network and all
    region generators from the adversarial + weighted conservation loss, and
    Adam on the latent regressor from the conservation loss alone. The
    discriminator is untouched."""
    models = state.models
    cfg = models.config
    region = sample_region(cfg.scene.n, state.rng)
    z = sample_latent(cfg.scene.latent_dim, state.rng, batch.shape[0])

    models.train()
    d_params = [p for p in models.discriminator.parameters()]
    delta_params = [p for p in models.regressor.parameters()]
    for p in d_params:
        p.requires_grad_(False)
    set_state_frozen(models.discriminator, True)
    try:
        redrawn, masks = synthesize_redrawn(models, batch, region, z)
        adv = generator_adversarial_loss(models.discriminator(redrawn))

        # conservation gradient for F/G flows through the regressor's input
        # only; the regressor itself trains on the detached image below
        for p in delta_params:
            p.requires_grad_(False)
        with frozen_state(models.regressor):
            info_gen = information_conservation_loss(models.regressor(redrawn, region), z)
        loss_g = adv + state.weights.lambda_z * info_gen

        state.optimizers["mask_net"].zero_grad(set_to_none=True)
        state.optimizers["generators"].zero_grad(set_to_none=True)
        loss_g.backward()
        state.optimizers["mask_net"].step()
        state.optimizers["generators"].step()

        for p in delta_params:
            p.requires_grad_(True)
        loss_z = information_conservation_loss(
            models.regressor(redrawn.detach(), region), z)
        state.optimizers["regressor"].zero_grad(set_to_none=True)
        loss_z.backward()
        state.optimizers["regressor"].step()
    finally:
        for p in d_params:
            p.requires_grad_(True)
        for p in delta_params:
            p.requires_grad_(True)
        set_state_frozen(models.discriminator, False)

    _require_finite(state.step, loss_g=loss_g, loss_z=loss_z)
    mask_mass = masks.detach().mean(dim=(0, 2, 3))
    return {
        "loss_g": float(loss_g.detach()), "loss_z": float(loss_z.detach()),
        "loss_g_adv": float(adv.detach()), "region": region,
        "mask_mass": [float(m) for m in mask_mass],
    }


def discriminator_update(state: TrainState, batch_real: Tensor,
                         batch_input: Tensor) -> dict:
    """One Algorithm-1 discriminator step: hinge loss on real scores vs the
    scores of images redrawn from an independent input batch; Adam on the
    discriminator only. The frozen generator path leaves the mask network,
    generators and regressor bit-identical, buffers included."""
    models = state.models
    cfg = models.config
    region = sample_region(cfg.scene.n, state.rng)
    z = sample_latent(cfg.scene.latent_dim, state.rng, batch_input.shape[0])

    models.train()
    with torch.no_grad(), frozen_state(models.mask_net, models.generators,
                                       models.regressor):
        redrawn, _ = synthesize_redrawn(models, batch_input, region, z)

    # one forward over real+fake so both halves share the same spectral step
    scores = models.discriminator(torch.cat([batch_real, redrawn.detach()], dim=0))
    score_real, score_fake = scores[:batch_real.shape[0]], scores[batch_real.shape[0]:]
    loss_d = discriminator_hinge_loss(score_real, score_fake)

    state.optimizers["discriminator"].zero_grad(set_to_none=True)
    loss_d.backward()
    state.optimizers["discriminator"].step()

    _require_finite(state.step, loss_d=loss_d)
    return {"loss_d": float(loss_d.detach()), "region": region,
            "score_real_mean": float(score_real.detach().mean()),
            "score_fake_mean": float(score_fake.detach().mean())}


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _optimizer_tensors(name: str, module, optimizer) -> dict[str, np.ndarray]:
    out = {}
    param_names = [k for k, _ in module.named_parameters()]
    params = list(module.parameters())
    for pname, p in zip(param_names, params):
        st = optimizer.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out[f"optim/{name}/{pname}/{key}"] = st[key].detach().cpu().numpy()
    return out


def train_state_tensors(state: TrainState) -> tuple[dict[str, np.ndarray], dict]:
    tensors: dict[str, np.ndarray] = {}
    for name, module in state.models.named().items():
        for key, value in module.state_dict().items():
            tensors[f"model/{name}/{key}"] = value.detach().cpu().numpy()
        tensors.update(_optimizer_tensors(name, module, state.optimizers[name]))
    tensors["rng/state"] = state.rng.get_state().numpy()
    tensors["meta/step"] = np.array(state.step, dtype=np.int64)
    tensors["meta/restart_count"] = np.array(state.restart_count, dtype=np.int64)
    tensors["meta/base_seed"] = np.array(state.base_seed, dtype=np.int64)
    return tensors, state.models.config.to_dict()


def save_train_checkpoint(state: TrainState, path) -> None:
    tensors, config = train_state_tensors(state)
    ckpt.save_tensors(path, tensors, config=config)


def _load_module_states(models: ModelSet, tensors: dict[str, np.ndarray], path) -> None:
    for name, module in models.named().items():
        prefix = f"model/{name}/"
        current = module.state_dict()
        expected = {prefix + k: tuple(v.shape) for k, v in current.items()}
        available = {k: v for k, v in tensors.items() if k.startswith(prefix)}
        ckpt.require_exact_names(available, expected, context=f"{path}:{name}")
        module.load_state_dict({
            k[len(prefix):]: torch.from_numpy(available[k].copy()).reshape(current[k[len(prefix):]].shape)
            for k in expected
        })


def load_model_checkpoint(path) -> tuple[ModelSet, dict]:
    """Rebuild networks from a checkpoint for inference; returns (models, meta)."""
    tensors, config = ckpt.load_tensors(path)
    net_config = NetworkConfig.from_dict(config)
    models = build_models(net_config, seed=0)
    _load_module_states(models, tensors, path)
    models.eval()
    meta = {
        "step": int(tensors.get("meta/step", np.array(0))),
        "restart_count": int(tensors.get("meta/restart_count", np.array(0))),
        "base_seed": int(tensors.get("meta/base_seed", np.array(0))),
    }
    return models, meta


def load_train_checkpoint(path, train_config: TrainConfig,
                          weights: LossWeights) -> TrainState:
    """Restore a full training state: weights, Adam moments, rng stream."""
    tensors, config = ckpt.load_tensors(path)
    net_config = NetworkConfig.from_dict(config)
    models = build_models(net_config, seed=0)
    _load_module_states(models, tensors, path)
    optimizers = _make_optimizers(models, train_config)
    for name, module in models.named().items():
        param_names = [k for k, _ in module.named_parameters()]
        for pname, p in zip(param_names, module.parameters()):
            key = f"optim/{name}/{pname}/exp_avg"
            if key not in tensors:
                continue
            optimizers[name].state[p] = {
                "step": torch.from_numpy(tensors[f"optim/{name}/{pname}/step"].copy()),
                "exp_avg": torch.from_numpy(tensors[key].copy()).reshape(p.shape),
                "exp_avg_sq": torch.from_numpy(
                    tensors[f"optim/{name}/{pname}/exp_avg_sq"].copy()).reshape(p.shape),
            }
    rng = torch.Generator()
    rng.set_state(torch.from_numpy(tensors["rng/state"].copy()))
    return TrainState(
        models=models, optimizers=optimizers, rng=rng, weights=weights,
        step=int(tensors["meta/step"]),
        restart_count=int(tensors["meta/restart_count"]),
        base_seed=int(tensors["meta/base_seed"]),
    )


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    best_checkpoint: Path | None
    best_val_iou: float
    best_step: int
    final_checkpoint: Path
    steps_run: int
    restarts: int
    metrics_path: Path


class Trainer:
    """Runs the alternating updates over an in-memory image tensor."""

    def __init__(self, net_config: NetworkConfig, train_config: TrainConfig,
                 weights: LossWeights, train_images: Tensor,
                 val_examples=None, out_dir=None, panel_fn=None):
        if train_images.dim() != 4 or train_images.shape[0] < 1:
            raise ValueError("train_images must be a non-empty (N,C,H,W) tensor")
        self.net_config = net_config
        self.train_config = train_config
        self.weights = weights
        self.images = train_images
        self.val_examples = val_examples or []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.panel_fn = panel_fn
        if self.out_dir is not None:
            (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.state = TrainState.initialize(net_config, train_config, weights)
        self.monitor = CollapseMonitor(train_config.restart, net_config.scene.n)
        self.last_real_indices: list[int] = []
        self.last_input_indices: list[int] = []

    def _sample_batch(self) -> tuple[Tensor, list[int]]:
        idx = torch.randint(self.images.shape[0], (self.train_config.batch_size,),
                            generator=self.state.rng)
        return self.images[idx], [int(i) for i in idx]

    def _restart(self):
        count = self.state.restart_count + 1
        if count > self.train_config.restart.max_restarts:
            raise TrainingFailedError(
                f"mask collapse persisted through {self.state.restart_count} restarts "
                f"(epsilon={self.train_config.restart.collapse_epsilon}, "
                f"patience={self.train_config.restart.collapse_patience})"
            )
        self.state = TrainState.initialize(self.net_config, self.train_config,
                                           self.weights, restart_count=count)
        self.monitor = CollapseMonitor(self.train_config.restart,
                                       self.net_config.scene.n)

    def _checkpoint_path(self, step: int) -> Path:
        return self.out_dir / "checkpoints" / f"step_{step:07d}.ckpt"

    def _evaluate(self):
        if not self.val_examples:
            return None
        return evaluate_mask_model(self.state.models.mask_net, self.val_examples)

    def run(self) -> TrainOutcome:
        cfg = self.train_config
        t0 = time.monotonic()
        best = {"iou": -1.0, "step": -1, "path": None}
        metrics_path = (self.out_dir / "metrics.csv") if self.out_dir else None
        writer = None
        metrics_file = None
        if metrics_path:
            metrics_file = open(metrics_path, "w", newline="")
            writer = csv.writer(metrics_file)
            writer.writerow(METRICS_COLUMNS)

        try:
            while self.state.step < cfg.max_steps:
                step = self.state.step + 1
                self.state.step = step

                batch_real, self.last_real_indices = self._sample_batch()
                batch_input, self.last_input_indices = self._sample_batch()
                d_logs = discriminator_update(self.state, batch_real, batch_input)
                batch_gen, _ = self._sample_batch()
                g_logs = generator_update(self.state, batch_gen)

                collapsed = self.monitor.record(step, g_logs["mask_mass"])
                if collapsed:
                    self._restart()
                    continue

                if self.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_train_checkpoint(self.state, self._checkpoint_path(step))
                if self.panel_fn and cfg.panel_every and step % cfg.panel_every == 0:
                    self.panel_fn(self, step)

                if cfg.eval_every and step % cfg.eval_every == 0:
                    result = self._evaluate()
                    if writer:
                        mass = ";".join(f"{m:.6f}" for m in g_logs["mask_mass"])
                        writer.writerow([
                            step, f"{d_logs['loss_d']:.6f}", f"{g_logs['loss_g']:.6f}",
                            f"{g_logs['loss_z']:.6f}", mass,
                            f"{result.acc:.6f}" if result else "",
                            f"{result.iou:.6f}" if result else "",
                            self.state.restart_count,
                            f"{time.monotonic() - t0:.3f}",
                        ])
                        metrics_file.flush()
                    if result and (result.iou, step) > (best["iou"], best["step"]):
                        best = {"iou": result.iou, "step": step, "path": None}
                        if self.out_dir:
                            path = self.out_dir / "checkpoints" / "best.ckpt"
                            save_train_checkpoint(self.state, path)
                            best["path"] = path
                            marker = self.out_dir / "checkpoints" / "best.json"
                            marker.write_text(
                                '{"step": %d, "val_iou": %.6f, "path": "best.ckpt"}\n'
                                % (step, result.iou))
                    if (cfg.target_val_iou is not None and result
                            and result.iou >= cfg.target_val_iou):
                        break
        finally:
            if metrics_file:
                metrics_file.close()

        final_path = None
        if self.out_dir:
            final_path = self._checkpoint_path(self.state.step)
            save_train_checkpoint(self.state, final_path)
            if best["path"] is None:
                best = {"iou": -1.0, "step": self.state.step, "path": final_path}
        return TrainOutcome(
            best_checkpoint=best["path"], best_val_iou=best["iou"],
            best_step=best["step"], final_checkpoint=final_path,
            steps_run=self.state.step, restarts=self.state.restart_count,
            metrics_path=metrics_path,
        )


def train(net_config: NetworkConfig, train_config: TrainConfig, weights: LossWeights,
          train_images: Tensor, val_examples=None, out_dir=None,
          panel_fn=None) -> TrainOutcome:
    return Trainer(net_config, train_config, weights, train_images,
                   val_examples=val_examples, out_dir=out_dir,
                   panel_fn=panel_fn).run()
