"""Training loop, evaluation and checkpoint I/O for PolarNet."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rten
from . import tensor_core as tc
from .dataset import FrameSet
from .losses import N_CLASSES, compute_loss
from .metrics import ConfusionMatrix, frame_mean_iou
from .polarnet import ModelConfig, PolarNet, build_model, predict_mask, standardize

log = logging.getLogger(__name__)

# child-stream keys under SeedSequence(seed)
_INIT, _SHUFFLE, _DROPOUT = 0, 1, 2


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr0: float = 0.1
    decay_factor: float = 0.8
    decay_every_steps: int = 3500
    total_steps: int = 20_000
    loss: str = "smce_train"
    ra_mode: str = "max"
    input: str = "RA"
    seed: int = 0
    rho: float = tc.RMSPROP_RHO
    eps: float = tc.RMSPROP_EPS
    eval_every: int = 250
    log_every: int = 10

    def __post_init__(self):
        for name in ("batch_size", "lr0", "decay_factor", "decay_every_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Staircase decay: lr0 * decay_factor ** floor(step / decay_every_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_every_steps)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: PolarNet
    train_config: TrainConfig
    class_weights: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))
    opt_state: tc.RMSPropState = field(default_factory=tc.RMSPropState)
    step: int = 0

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.model.copy(), copy.deepcopy(self.train_config),
                          self.class_weights.copy(),
                          tc.RMSPropState({k: v.copy() for k, v in self.opt_state.accum.items()}),
                          self.step)


def init_checkpoint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Checkpoint:
    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([train_cfg.seed, _INIT])))
    return Checkpoint(build_model(model_cfg, init_rng), train_cfg)


def _step_rng(seed: int, key: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key, step])))


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Frames used at ``step``: consecutive slots of per-epoch permutations."""
    b = min(batch_size, n)
    slots = np.arange(step * b, (step + 1) * b)
    out = np.empty(b, dtype=np.int64)
    perms: dict[int, np.ndarray] = {}
    for k, slot in enumerate(slots):
        epoch, pos = divmod(int(slot), n)
        if epoch not in perms:
            perms[epoch] = _step_rng(seed, _SHUFFLE, epoch).permutation(n)
        out[k] = perms[epoch][pos]
    return out


def prepare_input(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    return standardize(x.astype(np.float64)).astype(dtype)


def train_step(ckpt: Checkpoint, x: np.ndarray, y: np.ndarray) -> float:
    """One optimiser step on a prepared batch; advances ``ckpt.step``."""
    cfg = ckpt.train_config
    model = ckpt.model
    rng = _step_rng(cfg.seed, _DROPOUT, ckpt.step)
    probs, caches = model.forward(x, "train", rng)
    loss, dp, dw = compute_loss(cfg.loss, probs.astype(np.float64), y, ckpt.class_weights)
    if not math.isfinite(loss):
        raise tc.NonFiniteError(f"loss is {loss}")
    grads = model.backward(dp.astype(model.dtype), caches)
    params = dict(model.params)
    grads = dict(grads)
    if cfg.loss == "smce_train":
        params["loss.class_weights"] = ckpt.class_weights
        grads["loss.class_weights"] = dw
    tc.rmsprop_step(params, grads, ckpt.opt_state, lr_at_step(ckpt.step, cfg), cfg.rho, cfg.eps)
    ckpt.step += 1
    return loss


def evaluate(frames: FrameSet, ckpt: Checkpoint | PolarNet, batch_size: int = 16,
             split: str | None = None) -> dict:
    """Infer-mode mIoU report: dataset-level (accumulated) and frame-averaged."""
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    cfg = model.config
    if frames.x.shape[1:] != (*cfg.input_size, cfg.input_channels):
        raise ValueError(f"frames of shape {frames.x.shape[1:]} do not fit model input "
                         f"{(*cfg.input_size, cfg.input_channels)}")
    cm = ConfusionMatrix()
    preds = []
    for i in range(0, len(frames), batch_size):
        x = prepare_input(frames.x[i:i + batch_size], model.dtype)
        probs, _ = model.forward(x, "infer")
        pred = predict_mask(probs)
        cm.accumulate(pred, frames.y[i:i + batch_size])
        preds.append(pred)
    iou = cm.iou()
    report = {
        "n_frames": len(frames),
        "miou": cm.mean_iou(),
        "iou_per_class": {"occupied": _nan_to_none(iou[0]), "open": _nan_to_none(iou[1])},
        "frame_mean_miou": frame_mean_iou(np.concatenate(preds), frames.y),
        "confusion_pred_by_actual": cm.counts.tolist(),
    }
    if split is not None:
        report["split"] = split
    return report


def _nan_to_none(v: float):
    return None if np.isnan(v) else float(v)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint | None
    best_miou: float | None
    history: list[dict]


def train(train_set: FrameSet, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir: str | Path | None = None, eval_set: FrameSet | None = None,
          ckpt: Checkpoint | None = None) -> TrainResult:
    """Run ``train_cfg.total_steps`` RMSProp steps, evaluating every ``eval_every``."""
    ckpt = ckpt or init_checkpoint(model_cfg, train_cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
        log_file = (out / "train_log.jsonl").open("a" if ckpt.step else "w")
    history: list[dict] = []
    best, best_miou = None, None
    n = len(train_set)
    x_all = prepare_input(train_set.x, ckpt.model.dtype)

    def record(entry: dict) -> None:
        history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()

    try:
        last_finite = ckpt.step
        while ckpt.step < train_cfg.total_steps:
            step = ckpt.step
            idx = batch_indices(step, n, train_cfg.batch_size, train_cfg.seed)
            try:
                loss = train_step(ckpt, x_all[idx], train_set.y[idx])
            except tc.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at step {step} ({exc}); "
                                       f"last finite step was {last_finite}") from exc
            last_finite = step
            if step % train_cfg.log_every == 0 or ckpt.step == train_cfg.total_steps:
                record({"step": step, "loss": loss, "lr": lr_at_step(step, train_cfg),
                        "class_weights": ckpt.class_weights.tolist()})
            if eval_set is not None and (ckpt.step % train_cfg.eval_every == 0
                                         or ckpt.step == train_cfg.total_steps):
                rep = evaluate(eval_set, ckpt)
                record({"step": ckpt.step, "eval_miou": rep["miou"]})
                log.info("step %d loss %.4f eval mIoU %.4f", step, loss, rep["miou"])
                if best_miou is None or rep["miou"] > best_miou:
                    best_miou, best = rep["miou"], ckpt.copy()
                    if out is not None:
                        save_checkpoint(best, out / "best")
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint")
    return TrainResult(ckpt, best, best_miou, history)


# ------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def _tensor_entries(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, v in ckpt.model.params.items():
        tensors[f"param/{name}"] = v
    for name, st in ckpt.model.bn_states.items():
        tensors[f"bn/{name}.running_mean"] = st.running_mean
        tensors[f"bn/{name}.running_var"] = st.running_var
    for name, v in ckpt.opt_state.accum.items():
        tensors[f"rmsprop/{name}"] = v
    tensors["loss/class_weights"] = np.asarray(ckpt.class_weights, dtype=np.float64)
    return tensors


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in _tensor_entries(ckpt).items():
        fname = name.replace("/", "__") + ".rten"
        blob = rten.to_bytes(arr)
        (d / fname).write_bytes(blob)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "bytes": len(blob),
                        "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {"format": "polarseg-checkpoint", "version": 1, "step": ckpt.step,
                "model_config": ckpt.model.config.to_dict(),
                "train_config": ckpt.train_config.to_dict(), "tensors": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory: str | Path) -> Checkpoint:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{d}: unreadable manifest ({exc})") from exc
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        path = d / e["file"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: missing tensor file") from exc
        if len(blob) != e["bytes"]:
            raise CheckpointError(f"{path}: size {len(blob)} != manifest {e['bytes']}")
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{path}: sha256 mismatch")
        arr = rten.from_bytes(blob, str(path))
        if list(arr.shape) != e["shape"]:
            raise CheckpointError(f"{path}: shape {arr.shape} != manifest {e['shape']}")
        tensors[e["name"]] = arr
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(model_cfg, np.random.default_rng(0))
    for name in model.params:
        model.params[name] = tensors[f"param/{name}"]
    for name, st in model.bn_states.items():
        st.running_mean = tensors[f"bn/{name}.running_mean"]
        st.running_var = tensors[f"bn/{name}.running_var"]
    accum = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("rmsprop/")}
    return Checkpoint(model, TrainConfig.from_dict(manifest["train_config"]),
                      tensors["loss/class_weights"], tc.RMSPropState(accum), manifest["step"])
