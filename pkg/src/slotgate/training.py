"""Config-driven training loop with gate warm-up and per-image selection."""

import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .decoders import GateConfig
from .model import ModelConfig, SlotAutoencoder
from .scenes import dataset_checksum, load_dataset, parse_key_values
from .selection import SelectionConfig, select_slots_batch

CHECKPOINT_LAST = "ckpt-last.pt"
CHECKPOINT_FINAL = "ckpt-final.pt"
LOG_NAME = "training_log.txt"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    # optimization
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 4e-4
    lr_warmup_steps: int = -1        # -1: 5% of total steps
    grad_clip: float = 1.0
    seed: int = 0
    # model
    k_max: int = 8
    decoder: str = "transformer"
    d_y: int = 64
    d_u: int = 64
    patch_size: int = 8
    sa_iters: int = 3
    dec_layers: int = 4
    dec_heads: int = 4
    dec_mlp_hidden: int = 128
    dec_mlp_layers: int = 3
    target_mode: str = "frozen-features"
    # selection
    warmup_gate: int = -1            # -1: 10% of epochs
    tau: float = 0.5
    rho: float = 0.8
    mu: float = 0.3
    selection_epsilon: float = 1e-12
    use_coverage: bool = True
    order_by_quality: bool = True
    # gates
    eps1: float = 1e-3
    eps2: float = 1e-6
    neg_const: float = 1e4
    # evaluation cadence
    val_fraction: float = 0.1
    val_every: int = 10
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.effective_warmup_gate() > max(self.epochs, 0) and self.epochs > 0:
            raise ValueError(
                f"warmup_gate {self.warmup_gate} exceeds epochs {self.epochs}"
            )

    def effective_warmup_gate(self) -> int:
        if self.warmup_gate >= 0:
            return self.warmup_gate
        return int(round(0.1 * self.epochs))

    def selection_config(self) -> SelectionConfig:
        return SelectionConfig(
            tau=self.tau, rho=self.rho, mu=self.mu,
            epsilon=self.selection_epsilon,
            use_coverage=self.use_coverage,
            order_by_quality=self.order_by_quality,
        )

    def gate_config(self) -> GateConfig:
        return GateConfig(eps1=self.eps1, eps2=self.eps2, neg_const=self.neg_const)

    def model_config(self, image_size: int) -> ModelConfig:
        return ModelConfig(
            image_size=image_size, patch_size=self.patch_size,
            d_y=self.d_y, d_u=self.d_u, k_max=self.k_max,
            sa_iters=self.sa_iters, decoder=self.decoder,
            dec_layers=self.dec_layers, dec_heads=self.dec_heads,
            dec_mlp_hidden=self.dec_mlp_hidden,
            dec_mlp_layers=self.dec_mlp_layers,
            target_mode=self.target_mode, gate=self.gate_config(),
        )

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, raw in kv.items():
            if key not in known:
                raise ValueError(f"unknown train config key: {key!r}")
            t = known[key]
            tname = t if isinstance(t, str) else t.__name__
            if tname == "bool":
                kwargs[key] = str(raw).lower() in ("true", "1", "yes")
            elif tname == "int":
                kwargs[key] = int(raw)
            elif tname == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in self.to_mapping().items():
                fh.write(f"{key}={value}\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_mapping(parse_key_values(fh.read()))


def reconstruction_loss(targets: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every entry of the N×d target block."""
    if targets.shape != y_hat.shape:
        raise ValueError(
            f"target shape {tuple(targets.shape)} != prediction shape "
            f"{tuple(y_hat.shape)}"
        )
    diff = y_hat - targets
    return (diff * diff).mean()


def samples_to_images(samples, device="cpu") -> torch.Tensor:
    """Stack scene samples into a (B, 3, H, W) float tensor."""
    arr = np.stack([s.image for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(device)


def lr_lambda_factory(total_steps: int, warmup_steps: int):
    """Linear warm-up to the peak rate, then cosine decay to zero."""
    warmup_steps = max(warmup_steps, 1)

    def lr_lambda(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        if total_steps <= warmup_steps:
            return 1.0
        t = (step - warmup_steps) / (total_steps - warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))

    return lr_lambda


def train_step(batch: torch.Tensor, model: SlotAutoencoder, optimizer,
               cfg: TrainConfig, epoch: int, batch_id: int = 0):
    """One optimization step over a batch of images.

    Before ``warmup_gate`` epochs every slot participates (no gating);
    afterwards masks come from per-image greedy selection on the
    detached attention map, so no gradient flows through selection.
    Returns (loss value, diagnostics dict).
    """
    model.train()
    slots, attn = model.group(batch)
    targets = model.targets(batch)

    k_max = model.cfg.k_max
    warm = epoch < cfg.effective_warmup_gate()
    if warm:
        mask = None
        diags = {
            "n_selected": np.full(batch.shape[0], k_max, dtype=np.int64),
            "mean_quality": np.full(batch.shape[0], np.nan),
            "coverage_at_stop": np.ones(batch.shape[0]),
            "warmup": True,
        }
    else:
        a = attn.detach().cpu().numpy()
        masks, sel_diags = select_slots_batch(a, cfg.selection_config())
        diags = dict(sel_diags)
        diags["warmup"] = False
        # the all-slots configuration decodes ungated
        mask = torch.from_numpy(masks) if cfg.use_coverage else None

    y_hat, _ = model.decode(slots, mask)
    loss = reconstruction_loss(targets, y_hat)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {batch_id}")

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            (p for p in model.parameters() if p.requires_grad), cfg.grad_clip
        )
    optimizer.step()
    return float(loss.detach()), diags


def _format_row(row: dict) -> str:
    parts = []
    for key, value in row.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def fit(data_dir, cfg: TrainConfig, out_dir, resume: bool = False):
    """Train on a dataset directory; returns (checkpoint path, log rows).

    Persists a per-epoch log, a rolling checkpoint (used to resume after
    an interrupt) and a final checkpoint that ties the parameters to the
    dataset checksum and every hyperparameter.
    """
    from .metrics import evaluate_model  # local import: metrics needs checkpoints

    os.makedirs(out_dir, exist_ok=True)
    spec, samples = load_dataset(data_dir)
    checksum = dataset_checksum(data_dir)
    if cfg.k_max < spec.n_max + 1:
        raise ValueError(
            f"k_max {cfg.k_max} violates dataset rule: needs >= n_max+1 = "
            f"{spec.n_max + 1}"
        )

    n_val = int(round(cfg.val_fraction * len(samples)))
    train_samples = samples[: len(samples) - n_val]
    val_samples = samples[len(samples) - n_val:]
    if not train_samples:
        raise ValueError("no training samples after validation split")

    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    model = SlotAutoencoder(cfg.model_config(spec.image_size)).to(device)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate)

    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = cfg.lr_warmup_steps
    if warmup_steps < 0:
        warmup_steps = max(10, int(0.05 * total_steps))
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda_factory(total_steps, warmup_steps)
    )

    images = samples_to_images(train_samples, device)
    log_rows = []
    start_epoch = 0

    last_path = os.path.join(out_dir, CHECKPOINT_LAST)
    if resume and os.path.exists(last_path):
        state = torch.load(last_path, map_location=device, weights_only=False)
        model.load_state_dict(state["model_state"])
        optimizer.load_state_dict(state["optimizer_state"])
        scheduler.load_state_dict(state["scheduler_state"])
        torch.set_rng_state(state["torch_rng"])
        start_epoch = state["epoch"] + 1
        log_rows = list(state.get("log_rows", []))

    def checkpoint_payload(epoch: int) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model_state": model.state_dict(),
            "model_config": asdict(cfg.model_config(spec.image_size)),
            "train_config": cfg.to_mapping(),
            "image_size": spec.image_size,
            "data_checksum": checksum,
            "epoch": epoch,
            "optimizer_state": optimizer.state_dict(),
            "scheduler_state": scheduler.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "log_rows": log_rows,
        }

    log_path = os.path.join(out_dir, LOG_NAME)
    log_mode = "a" if start_epoch > 0 else "w"
    with open(log_path, log_mode, encoding="utf-8") as log_fh:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(
                len(train_samples)
            )
            losses, n_sel, cov = [], [], []
            mean_q = []
            for bstart in range(0, len(order), cfg.batch_size):
                idx = order[bstart: bstart + cfg.batch_size]
                batch = images[torch.from_numpy(idx)]
                loss, diags = train_step(
                    batch, model, optimizer, cfg, epoch,
                    batch_id=bstart // cfg.batch_size,
                )
                scheduler.step()
                losses.append(loss)
                n_sel.append(diags["n_selected"].mean())
                cov.append(diags["coverage_at_stop"].mean())
                if not diags["warmup"]:
                    mean_q.append(np.nanmean(diags["mean_quality"]))

            row = {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "mean_selected": float(np.mean(n_sel)),
                "mean_quality": float(np.mean(mean_q)) if mean_q else float("nan"),
                "coverage_at_stop": float(np.mean(cov)),
                "lr": float(optimizer.param_groups[0]["lr"]),
            }
            snapshot_due = val_samples and (
                (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1
            )
            if snapshot_due:
                report = evaluate_model(model, val_samples, cfg.batch_size)
                row.update(
                    val_mbo_i=report.mbo_i, val_mbo_c=report.mbo_c,
                    val_miou=report.miou, val_mean_k=report.mean_inferred_k,
                )
            log_rows.append(row)
            log_fh.write(_format_row(row) + "\n")
            log_fh.flush()
            torch.save(checkpoint_payload(epoch), last_path)

    final_path = os.path.join(out_dir, CHECKPOINT_FINAL)
    torch.save(checkpoint_payload(cfg.epochs - 1), final_path)
    return final_path, log_rows


def load_checkpoint(path, device: str = "cpu"):
    """Rebuild the model from a checkpoint; returns (model, cfg, payload)."""
    payload = torch.load(path, map_location=device, weights_only=False)
    cfg = TrainConfig.from_mapping(payload["train_config"])
    model = SlotAutoencoder(cfg.model_config(payload["image_size"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg, payload
