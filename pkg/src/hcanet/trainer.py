"""Training loop: RMSprop over the combined loss, CSV logging, checkpointing,
and bitwise-reproducible resume.

Config files are flat UTF-8 text, one ``key = value`` per line, with keys
matching the dataclass field paths (``loss.lambda_sk = 2e-4``). Blank lines
and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import CheckpointError, ConfigurationError, InputError, TrainingDivergedError
from .evaluator import score_batch
from .heatmap_codec import HeatmapStack, KeypointSet
from .losses import LossConfig, total_loss_terms
from .mlka import LkaScaleSpec, MlkaConfig
from .network import DOWNSAMPLE, HCANet, ModelConfig, NetworkOutput, build_model
from .spine_data import SpineSample, prepare_batch

CHECKPOINT_VERSION = "hcanet-checkpoint-v1"
RMSPROP_DECAY = 0.99
RMSPROP_EPS = 1e-8
VAL_THRESHOLD = 0.25
OPTIMIZERS = ("rmsprop",)

LOG_HEADER = "epoch,train_loss,val_loss,val_dtt_px,val_fnr,val_fpr"


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    learning_rate: float = 2.5e-4
    optimizer: str = "rmsprop"
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 50
    seed: int = 0
    sigma_px: float = 2.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not self.sigma_px > 0:
            raise ConfigurationError(f"sigma_px must be > 0, got {self.sigma_px}")


@dataclass
class TrainReport:
    epochs_run: int
    final_train_loss: float
    final_val_loss: float
    final_val_dtt_px: float
    final_val_fnr_pct: float
    final_val_fpr_pct: float
    best_val_dtt_px: Optional[float]
    log_path: str
    last_checkpoint: str
    best_checkpoint: str


def _bool_from(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _size_from(text: str) -> tuple[int, int]:
    parts = text.replace("x", ",").split(",")
    if len(parts) != 2:
        raise ConfigurationError(f"expected 'H,W', got {text!r}")
    return int(parts[0]), int(parts[1])


def _scales_from(text: str) -> tuple[LkaScaleSpec, ...]:
    specs = []
    for item in text.split(","):
        k, _, d = item.partition(":")
        if not d:
            raise ConfigurationError(f"expected 'kernel:dilation' pairs, got {text!r}")
        specs.append(LkaScaleSpec(int(k), int(d)))
    return tuple(specs)


_CONFIG_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "optimizer": str,
    "checkpoint_every": int,
    "seed": int,
    "sigma_px": float,
    "loss.lambda_sk": float,
    "loss.beta": float,
    "loss.alpha": float,
    "loss.samples": int,
    "loss.prototype_mode": str,
    "loss.alpha_learnable": _bool_from,
    "model.stacks": int,
    "model.channels": int,
    "model.hourglass_depth": int,
    "model.num_discs": int,
    "model.input_size": _size_from,
    "model.seed": int,
    "model.mlka.channels": int,
    "model.mlka.scales": _scales_from,
}


def valid_config_keys() -> list[str]:
    return sorted(_CONFIG_KEYS)


def config_from_items(items: dict[str, str]) -> TrainConfig:
    """Build a TrainConfig from flat 'field.path' -> text items."""
    parsed: dict[str, object] = {}
    for key, raw in items.items():
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(
                f"unknown config key {key!r}; valid keys: {', '.join(valid_config_keys())}"
            )
        caster = _CONFIG_KEYS[key]
        try:
            parsed[key] = caster(raw)
        except ConfigurationError:
            raise
        except Exception as exc:
            raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from exc

    loss_kwargs = {k.split(".", 1)[1]: v for k, v in parsed.items() if k.startswith("loss.")}
    model_kwargs = {
        k.split(".", 1)[1]: v
        for k, v in parsed.items()
        if k.startswith("model.") and not k.startswith("model.mlka.")
    }
    mlka_kwargs = {k.split(".", 2)[2]: v for k, v in parsed.items() if k.startswith("model.mlka.")}
    top_kwargs = {k: v for k, v in parsed.items() if "." not in k}

    loss = LossConfig(**loss_kwargs)
    if mlka_kwargs:
        channels = mlka_kwargs.get("channels", model_kwargs.get("channels", ModelConfig.channels))
        scales = mlka_kwargs.get("scales")
        mlka = MlkaConfig(channels=channels, **({"scales": scales} if scales else {}))
        model_kwargs["mlka"] = mlka
    model = ModelConfig(**model_kwargs)
    return TrainConfig(loss=loss, model=model, **top_kwargs)


def parse_config_file(path) -> TrainConfig:
    """Parse a flat key = value config file; unspecified keys keep defaults."""
    path = Path(path)
    items: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        items[key.strip()] = value.strip()
    return config_from_items(items)


def config_to_flat_items(config: TrainConfig) -> dict[str, str]:
    """Flatten a TrainConfig back to config-file key/value text."""
    items = {
        "epochs": str(config.epochs),
        "batch_size": str(config.batch_size),
        "learning_rate": repr(config.learning_rate),
        "optimizer": config.optimizer,
        "checkpoint_every": str(config.checkpoint_every),
        "seed": str(config.seed),
        "sigma_px": repr(config.sigma_px),
        "loss.lambda_sk": repr(config.loss.lambda_sk),
        "loss.beta": repr(config.loss.beta),
        "loss.alpha": repr(config.loss.alpha),
        "loss.samples": str(config.loss.samples),
        "loss.prototype_mode": config.loss.prototype_mode,
        "loss.alpha_learnable": str(config.loss.alpha_learnable).lower(),
        "model.stacks": str(config.model.stacks),
        "model.channels": str(config.model.channels),
        "model.hourglass_depth": str(config.model.hourglass_depth),
        "model.num_discs": str(config.model.num_discs),
        "model.input_size": f"{config.model.input_size[0]},{config.model.input_size[1]}",
        "model.seed": str(config.model.seed),
        "model.mlka.scales": ",".join(
            f"{s.kernel}:{s.dilation}" for s in config.model.mlka.scales
        ),
    }
    return items


def train_config_from_dict(data: dict) -> TrainConfig:
    """Rebuild a TrainConfig from its (JSON-safe) asdict form."""
    loss = LossConfig(**data["loss"])
    model_data = dict(data["model"])
    mlka_data = model_data.pop("mlka")
    scales = tuple(LkaScaleSpec(**spec) for spec in mlka_data["scales"])
    model_data["mlka"] = MlkaConfig(channels=mlka_data["channels"], scales=scales)
    model_data["input_size"] = tuple(model_data["input_size"])
    model = ModelConfig(**model_data)
    top = {k: v for k, v in data.items() if k not in ("loss", "model")}
    return TrainConfig(loss=loss, model=model, **top)


def save_checkpoint(path, payload: dict) -> None:
    """Write atomically: a reader never sees a partially written archive."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(
            f"cannot read checkpoint {path} (expected format {CHECKPOINT_VERSION!r}): {exc}"
        ) from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(
            f"{path} has no format version; expected {CHECKPOINT_VERSION!r}"
        )
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} does not match expected {CHECKPOINT_VERSION!r}"
        )
    return payload


def load_model_from_checkpoint(path) -> tuple[HCANet, TrainConfig]:
    payload = load_checkpoint(path)
    config = train_config_from_dict(payload["train_config"])
    model = build_model(config.model)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, config


def _format_row(epoch: int, values: Sequence[float]) -> str:
    return ",".join([str(epoch)] + [repr(float(v)) for v in values])


def _check_finite(mse_term: torch.Tensor, sk_term: Optional[torch.Tensor], epoch: int) -> None:
    if not torch.isfinite(mse_term):
        raise TrainingDivergedError(f"non-finite L_v (heatmap MSE) at epoch {epoch}")
    if sk_term is not None and not torch.isfinite(sk_term):
        raise TrainingDivergedError(f"non-finite L_sk (skeleton loss) at epoch {epoch}")


def _validate(
    model: HCANet,
    images: torch.Tensor,
    targets: torch.Tensor,
    keypoints: list[KeypointSet],
    config: TrainConfig,
    alpha,
) -> tuple[float, float, float, float]:
    model.eval()
    losses = []
    dists: list[float] = []
    fn = fp = visible_slots = invisible_slots = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], config.batch_size):
            sel = slice(start, start + config.batch_size)
            fused, outs = model(images[sel])
            for bi, si in enumerate(range(*sel.indices(images.shape[0]))):
                out = NetworkOutput(
                    HeatmapStack(fused[bi]), [HeatmapStack(o[bi]) for o in outs]
                )
                mse_t, sk_t = total_loss_terms(
                    out, HeatmapStack(targets[si], role="target"), keypoints[si],
                    config.loss, alpha=alpha,
                )
                losses.append(float(mse_t if sk_t is None else mse_t + config.loss.lambda_sk * sk_t))
            records = score_batch(
                fused, keypoints[sel], threshold=VAL_THRESHOLD, scale_to_image=DOWNSAMPLE
            )
            for rec in records:
                dists.extend(rec.dist_px[rec.matched].tolist())
                fn += int(rec.false_neg.sum())
                fp += int(rec.false_pos.sum())
                visible_slots += int(rec.matched.sum()) + int(rec.false_neg.sum())
                invisible_slots += len(rec.matched) - int(rec.matched.sum()) - int(rec.false_neg.sum())
    val_loss = float(np.mean(losses))
    val_dtt = float(np.mean(dists)) if dists else math.nan
    val_fnr = 100.0 * fn / visible_slots if visible_slots else 0.0
    val_fpr = 100.0 * fp / invisible_slots if invisible_slots else 0.0
    return val_loss, val_dtt, val_fnr, val_fpr


def train(
    config: TrainConfig,
    train_set: Sequence[SpineSample],
    val_set: Sequence[SpineSample],
    out_dir,
    _resume_payload: Optional[dict] = None,
) -> TrainReport:
    """Run the optimization loop and leave checkpoints plus train_log.csv in out_dir.

    Fully deterministic for a fixed (config, data, platform): shuffling and
    stochastic sampling use dedicated generators whose states travel with the
    checkpoint, so a resumed run continues the exact same trajectory.
    """
    if len(train_set) == 0:
        raise InputError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    images, targets, keypoints, _ = prepare_batch(train_set, config.model, sigma=config.sigma_px)
    has_val = len(val_set) > 0
    if has_val:
        val_images, val_targets, val_keypoints, _ = prepare_batch(
            val_set, config.model, sigma=config.sigma_px
        )

    model = build_model(config.model)
    alpha_param: Optional[torch.nn.Parameter] = None
    params: list[torch.nn.Parameter] = list(model.parameters())
    if config.loss.alpha_learnable:
        alpha_param = torch.nn.Parameter(torch.tensor(float(config.loss.alpha)))
        params.append(alpha_param)
    optimizer = torch.optim.RMSprop(
        params, lr=config.learning_rate, alpha=RMSPROP_DECAY, eps=RMSPROP_EPS
    )
    shuffle_gen = torch.Generator().manual_seed(config.seed)
    loss_gen = torch.Generator().manual_seed(config.seed + 1)

    start_epoch = 0
    best_dtt = math.inf
    if _resume_payload is not None:
        model.load_state_dict(_resume_payload["model_state"])
        optimizer.load_state_dict(_resume_payload["optimizer_state"])
        shuffle_gen.set_state(_resume_payload["shuffle_rng"])
        loss_gen.set_state(_resume_payload["loss_rng"])
        start_epoch = int(_resume_payload["epoch"])
        stored_best = _resume_payload.get("best_val_dtt_px")
        best_dtt = math.inf if stored_best is None else float(stored_best)
        if alpha_param is not None and _resume_payload.get("alpha_param") is not None:
            with torch.no_grad():
                alpha_param.copy_(_resume_payload["alpha_param"])

    log_path = out / "train_log.csv"
    if _resume_payload is None or not log_path.exists():
        log_path.write_text(LOG_HEADER + "\n")

    def checkpoint_payload(epoch: int) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "train_config": json.loads(json.dumps(asdict(config))),
            "epoch": int(epoch),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "shuffle_rng": shuffle_gen.get_state(),
            "loss_rng": loss_gen.get_state(),
            "best_val_dtt_px": None if math.isinf(best_dtt) else float(best_dtt),
            "alpha_param": None if alpha_param is None else alpha_param.detach().clone(),
        }

    n = len(train_set)
    final_train = final_vloss = final_vdtt = final_vfnr = final_vfpr = math.nan
    best_path = out / "best.ckpt"
    alpha_arg = alpha_param  # None means: use the static config value

    for epoch in range(start_epoch + 1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffle_gen)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            sel = order[start : start + config.batch_size]
            fused, outs = model(images[sel])
            per_sample = []
            for bi, si in enumerate(sel.tolist()):
                out_s = NetworkOutput(
                    HeatmapStack(fused[bi]), [HeatmapStack(o[bi]) for o in outs]
                )
                mse_t, sk_t = total_loss_terms(
                    out_s, HeatmapStack(targets[si], role="target"), keypoints[si],
                    config.loss, rng=loss_gen, alpha=alpha_arg,
                )
                _check_finite(mse_t, sk_t, epoch)
                per_sample.append(
                    mse_t if sk_t is None else mse_t + config.loss.lambda_sk * sk_t
                )
            loss = torch.stack(per_sample).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if alpha_param is not None:
                with torch.no_grad():
                    alpha_param.clamp_(1e-4, 1.0)
            batch_losses.append(float(loss.detach()))
        final_train = float(np.mean(batch_losses))

        if has_val:
            final_vloss, final_vdtt, final_vfnr, final_vfpr = _validate(
                model, val_images, val_targets, val_keypoints, config, alpha_arg
            )
        with open(log_path, "a") as log:
            log.write(
                _format_row(epoch, (final_train, final_vloss, final_vdtt, final_vfnr, final_vfpr))
                + "\n"
            )

        metric = final_vdtt if (has_val and math.isfinite(final_vdtt)) else math.inf
        if metric < best_dtt:
            best_dtt = metric
            save_checkpoint(best_path, checkpoint_payload(epoch))
        if epoch % config.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{epoch:04d}.ckpt", checkpoint_payload(epoch))

    last_path = out / "last.ckpt"
    save_checkpoint(last_path, checkpoint_payload(max(start_epoch, config.epochs)))
    if not best_path.exists():
        save_checkpoint(best_path, checkpoint_payload(max(start_epoch, config.epochs)))

    return TrainReport(
        epochs_run=max(config.epochs - start_epoch, 0),
        final_train_loss=final_train,
        final_val_loss=final_vloss,
        final_val_dtt_px=final_vdtt,
        final_val_fnr_pct=final_vfnr,
        final_val_fpr_pct=final_vfpr,
        best_val_dtt_px=None if math.isinf(best_dtt) else best_dtt,
        log_path=str(log_path),
        last_checkpoint=str(last_path),
        best_checkpoint=str(best_path),
    )


def resume(
    checkpoint_path,
    train_set: Sequence[SpineSample],
    val_set: Sequence[SpineSample],
    out_dir=None,
    epochs: Optional[int] = None,
) -> TrainReport:
    """Continue a run from a checkpoint.

    Restores parameters, optimizer state, and generator states; training k
    epochs then resuming for k more matches 2k straight epochs bitwise on the
    same platform. ``epochs`` overrides the stored total epoch target.
    """
    payload = load_checkpoint(checkpoint_path)
    config = train_config_from_dict(payload["train_config"])
    if epochs is not None:
        config = replace(config, epochs=epochs)
    out = Path(out_dir) if out_dir is not None else Path(checkpoint_path).parent
    return train(config, train_set, val_set, out, _resume_payload=payload)
