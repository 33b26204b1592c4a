"""AdaMax training loop, checkpoints and evaluation."""
from __future__ import annotations

import dataclasses
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .model import Inputs, MAEVINet, ModelConfig, prepare

log = logging.getLogger(__name__)

MAGIC = b"MAEVICKP"
VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.0016
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 60
    lr_decay: float = 0.95          # multiplicative, applied once per epoch
    max_steps: int = 0              # 0 = no cap
    alpha: float = 0.6
    loss_mode: str = "blended"      # "blended" or "split"
    seed: int = 0
    checkpoint_every: int = 0       # epochs; 0 = final only

    def validate(self):
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.loss_mode not in ("blended", "split"):
            raise ValueError(f"loss_mode must be 'blended' or 'split', got {self.loss_mode!r}")
        losses.LossConfig(self.alpha).validate()
        return self


# ---------------------------------------------------------------- optimiser

def adamax_step(param, grad, state, lr, beta1, beta2, t, eps=1e-8):
    """One in-place AdaMax update of ``param``; ``state`` holds ``m`` and ``u``."""
    if t < 1:
        raise ValueError("AdaMax step count starts at 1")
    m = state.setdefault("m", np.zeros_like(param))
    u = state.setdefault("u", np.zeros_like(param))
    m *= beta1
    m += (1.0 - beta1) * grad
    np.maximum(beta2 * u, np.abs(grad), out=u)
    param -= lr * m / ((1.0 - beta1 ** t) * (u + eps))
    return param, state


class AdaMax:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {k: {} for k in self.params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamax_step(p.data, g, self.state[name], lr, self.beta1, self.beta2, self.t, self.eps)


# ---------------------------------------------------------------- loss

def sample_loss(out, inp, cfg):
    """Training loss for one forward pass; returns ``(loss, L_filtered, L_full)`` tensors."""
    lc = losses.LossConfig(cfg.alpha)
    if cfg.loss_mode == "split":
        std = T.clamp(out.standard.fused)
        filt = T.clamp(out.filtered.fused)
        l_filt, _ = losses.loss_terms(filt, inp.ground_truth, inp.loss_filter)
        _, l_full = losses.loss_terms(std, inp.ground_truth, inp.loss_filter)
        loss = T.add(T.scale(l_filt, lc.alpha), T.scale(l_full, 1.0 - lc.alpha))
        return loss, l_filt, l_full
    l_filt, l_full = losses.loss_terms(out.final, inp.ground_truth, inp.loss_filter)
    loss = T.add(T.scale(l_filt, lc.alpha), T.scale(l_full, 1.0 - lc.alpha))
    return loss, l_filt, l_full


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    l_filtered: float
    l_full: float


@dataclass
class TrainResult:
    model: MAEVINet
    optimizer: AdaMax
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self):
        return [r.loss for r in self.history]


def _diagnose(model):
    bad = [name for name, p in model.named_parameters()
           if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all())]
    return ", ".join(bad) if bad else "no parameter is non-finite; the failing op is named above"


def train(samples, cfg=None, model_cfg=None, model=None, out_dir=None, callback=None):
    """Train on ``samples`` (SequenceSamples or prepared Inputs).

    Deterministic given ``cfg.seed``: it seeds both the initial weights (unless
    ``model`` is passed) and the per-epoch data order.
    """
    cfg = (cfg or TrainConfig()).validate()
    if model is None:
        model = MAEVINet(model_cfg or ModelConfig(), seed=cfg.seed)
    mcfg = model.cfg
    data = [s if isinstance(s, Inputs) else prepare(s, mcfg) for s in samples]
    if not data:
        raise ValueError("training needs at least one sample")
    if any(d.ground_truth is None for d in data):
        raise ValueError("training samples need a ground-truth middle frame")

    opt = AdaMax(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    order_rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(model, opt)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr0 * cfg.lr_decay ** epoch
        order = order_rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            tot = np.zeros(3)
            try:
                for i in batch:
                    loss, l_filt, l_full = sample_loss(model(data[i]), data[i], cfg)
                    tot += (loss.item(), l_filt.item(), l_full.item())
                    T.backward(T.scale(loss, 1.0 / len(batch)))
            except FloatingPointError as exc:
                raise TrainingError(f"step {step + 1}: {exc}; offending parameters: {_diagnose(model)}") from exc
            opt.step(lr)
            step += 1
            tot /= len(batch)
            bad = [n for n, p in model.named_parameters() if not np.isfinite(p.data).all()]
            if not np.isfinite(tot).all() or bad:
                raise TrainingError(f"step {step}: non-finite loss/parameters: {', '.join(bad) or 'loss'}")
            rec = StepRecord(step, epoch, lr, *tot.tolist())
            result.history.append(rec)
            if callback is not None and callback(rec, model) is False:
                return _finish(result, cfg, out_dir, epoch)
            if cfg.max_steps and step >= cfg.max_steps:
                return _finish(result, cfg, out_dir, epoch)
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:04d}.ckpt")
            save_checkpoint(path, model, opt, epoch + 1, cfg)
            result.checkpoints.append(path)
    return _finish(result, cfg, out_dir, cfg.epochs - 1)


def _finish(result, cfg, out_dir, epoch):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(path, result.model, result.optimizer, epoch + 1, cfg)
        result.checkpoints.append(path)
        with open(os.path.join(out_dir, "loss.tsv"), "w") as fh:
            fh.write("step\tepoch\tlr\tloss\tl_filtered\tl_full\n")
            for r in result.history:
                fh.write(f"{r.step}\t{r.epoch}\t{r.lr!r}\t{r.loss!r}\t{r.l_filtered!r}\t{r.l_full!r}\n")
    return result


# ---------------------------------------------------------------- checkpoints

def _encode_value(v):
    if isinstance(v, str):
        return np.frombuffer(v.encode(), dtype=np.uint8).astype(np.float64), "s"
    if isinstance(v, bool):
        return np.array(float(v)), "b"
    if isinstance(v, int):
        return np.array(float(v)), "i"
    if isinstance(v, tuple):
        kind = "ti" if all(isinstance(e, int) and not isinstance(e, bool) for e in v) else "tf"
        return np.array(v, dtype=np.float64), kind
    return np.array(float(v)), "f"


def _decode_value(arr, kind):
    if kind == "s":
        return bytes(arr.astype(np.uint8).tolist()).decode()
    if kind == "b":
        return bool(arr.item())
    if kind == "i":
        return int(arr.item())
    if kind == "ti":
        return tuple(int(e) for e in arr.tolist())
    if kind == "tf":
        return tuple(float(e) for e in arr.tolist())
    return float(arr.item())


def write_tensors(path, named):
    """Named-tensor container: magic, version, count, then per entry
    (u32 name length, name bytes, u32 rank, u32 dims, f64 values), little-endian."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return out


def save_checkpoint(path, model, optimizer=None, epoch=0, train_cfg=None):
    named = {}
    for k, v in model.named_parameters():
        named[f"param/{k}"] = v.data
    if optimizer is not None:
        for k, st in optimizer.state.items():
            if st:
                named[f"adamax.m/{k}"] = st["m"]
                named[f"adamax.u/{k}"] = st["u"]
        named["meta/step"] = np.array(float(optimizer.t))
    named["meta/epoch"] = np.array(float(epoch))
    for prefix, c in (("model", model.cfg), ("train", train_cfg)):
        if c is None:
            continue
        for f in dataclasses.fields(c):
            arr, kind = _encode_value(getattr(c, f.name))
            named[f"{prefix}.{kind}/{f.name}"] = arr
    write_tensors(path, named)


@dataclass
class Checkpoint:
    model: MAEVINet
    epoch: int
    step: int
    optimizer_state: dict
    train_config: TrainConfig | None


def load_checkpoint(path):
    named = read_tensors(path)
    fields = {"model": {}, "train": {}}
    for name, arr in named.items():
        head, _, key = name.partition("/")
        prefix, _, kind = head.partition(".")
        if prefix in fields and kind:
            fields[prefix][key] = _decode_value(arr, kind)
    mcfg = ModelConfig(**fields["model"])
    model = MAEVINet(mcfg, seed=0)
    model.load_state_dict({k[len("param/"):]: v for k, v in named.items() if k.startswith("param/")})
    state = {}
    for name, arr in named.items():
        for key in ("m", "u"):
            pre = f"adamax.{key}/"
            if name.startswith(pre):
                state.setdefault(name[len(pre):], {})[key] = arr.copy()
    tcfg = TrainConfig(**fields["train"]) if fields["train"] else None
    return Checkpoint(model, int(named.get("meta/epoch", 0)), int(named.get("meta/step", 0)), state, tcfg)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalRow:
    name: str
    psnr: float
    ssim: float
    masked_psnr: float


def predict(model, sample):
    inp = sample if isinstance(sample, Inputs) else prepare(sample, model.cfg)
    return model(inp), inp


def score(name, pred, gt, lf):
    """One metrics row; masked PSNR is NaN when the loss filter selects no pixel."""
    try:
        mp = losses.masked_psnr(pred, gt, lf)
    except ValueError:
        mp = float("nan")
    return EvalRow(name, losses.psnr(pred, gt), losses.ssim(pred, gt), mp)


def evaluate(model, samples):
    rows = []
    for s in samples:
        out, inp = predict(model, s)
        if inp.ground_truth is None:
            raise ValueError(f"sample {inp.name!r} has no ground truth")
        rows.append(score(inp.name, out.final.data, inp.ground_truth, inp.loss_filter))
    return rows
