"""Small convolutional sign classifier: forward, exact gradients, Adam, training, checkpoints.

The network is deliberately tiny (trains in seconds on CPU) but exposes
everything the attack code needs: probability outputs, exact input
gradients through autograd, and bit-reproducible training given a seed.
All randomness comes from explicitly seeded numpy generators; the global
torch RNG is never touched.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError

INPUT_HW = (32, 32)
NUM_CLASSES = 12

# Conv channel plans; "same" is the default classifier, the other two are
# the architecture-mismatch surrogates (one conv layer fewer / more).
ARCH_CONV_CHANNELS = {
    "smaller": (8,),
    "same": (8, 16),
    "larger": (8, 16, 32),
}
HIDDEN_UNITS = 128

CHECKPOINT_FORMAT = "sign-classifier-ckpt-v1"


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return (rng.random(shape, dtype=np.float64) * 2.0 - 1.0) * bound


class SignClassifier(torch.nn.Module):
    """Stack of 3x3 valid convs with ReLU + 2x2 max-pool, one hidden dense layer, softmax."""

    def __init__(
        self,
        num_classes: int = NUM_CLASSES,
        arch: str = "same",
        init_seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if arch not in ARCH_CONV_CHANNELS:
            raise ValueError(f"unknown arch {arch!r}, expected one of {sorted(ARCH_CONV_CHANNELS)}")
        self.num_classes = num_classes
        self.arch = arch
        self.init_seed = init_seed
        self.input_hw = INPUT_HW

        rng = np.random.default_rng(init_seed)
        convs = []
        in_ch = 3
        hw = INPUT_HW[0]
        for out_ch in ARCH_CONV_CHANNELS[arch]:
            conv = torch.nn.Conv2d(in_ch, out_ch, kernel_size=3)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(_he_uniform(rng, conv.weight.shape, fan_in)))
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
            hw = (hw - 2) // 2  # valid 3x3 conv then 2x2 pool
        self.convs = torch.nn.ModuleList(convs)
        flat = in_ch * hw * hw

        self.fc1 = torch.nn.Linear(flat, HIDDEN_UNITS)
        self.fc2 = torch.nn.Linear(HIDDEN_UNITS, num_classes)
        with torch.no_grad():
            self.fc1.weight.copy_(torch.from_numpy(_he_uniform(rng, self.fc1.weight.shape, flat)))
            self.fc1.bias.zero_()
            self.fc2.weight.copy_(torch.from_numpy(_he_uniform(rng, self.fc2.weight.shape, HIDDEN_UNITS)))
            self.fc2.bias.zero_()
        self.to(dtype)

    def _check_input(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1:] != (*self.input_hw, 3):
            raise ShapeError(
                f"expected batch of shape (N, {self.input_hw[0]}, {self.input_hw[1]}, 3), "
                f"got {tuple(images.shape)}"
            )
        return images.to(next(self.parameters()).dtype)

    def logits(self, images: torch.Tensor, check_finite: bool = False) -> torch.Tensor:
        """Images are (N, H, W, 3) in [0, 1]; returns (N, num_classes) logits."""
        x = self._check_input(images).permute(0, 3, 1, 2)
        for i, conv in enumerate(self.convs):
            x = F.max_pool2d(torch.relu(conv(x)), 2)
            if check_finite and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after conv layer {i + 1}")
        x = torch.relu(self.fc1(x.flatten(1)))
        if check_finite and not torch.isfinite(x).all():
            raise NumericError("non-finite activations after hidden dense layer")
        out = self.fc2(x)
        if check_finite and not torch.isfinite(out).all():
            raise NumericError("non-finite logits at output layer")
        return out

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Probability vectors, one row per image; every row sums to 1."""
        return torch.softmax(self.logits(images), dim=1)


def forward_probs(model: SignClassifier, images: np.ndarray) -> np.ndarray:
    """Numpy convenience wrapper around model.forward (no gradient tracking)."""
    single = images.ndim == 3
    batch = images[None] if single else images
    with torch.no_grad():
        probs = model(torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)))
    out = probs.numpy()
    return out[0] if single else out


def input_gradient(
    model: SignClassifier, image: np.ndarray, target: int, scale: float = 1.0
) -> np.ndarray:
    """Exact d(scale * NLL(f(image), target)) / d(image) via backprop."""
    if not 0 <= target < model.num_classes:
        raise ValueError(f"target class {target} outside [0, {model.num_classes})")
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image)).to(dtype)[None].requires_grad_(True)
    logits = model.logits(x, check_finite=True)
    probs = torch.softmax(logits, dim=1)
    loss = scale * -torch.log(probs[0, target].clamp_min(1e-12))
    (grad,) = torch.autograd.grad(loss, x)
    return grad[0].numpy()


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ValueError("adam_epsilon must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be positive and batch_size >= 1")


@dataclass
class AdamState:
    """First/second moment estimates plus the shared timestep."""

    step: int
    m: dict
    v: dict

    @classmethod
    def initial(cls, params: dict) -> "AdamState":
        zeros = lambda p: torch.zeros_like(p)
        return cls(step=0, m={k: zeros(p) for k, p in params.items()},
                   v={k: zeros(p) for k, p in params.items()})


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns fresh tensors, state timestep incremented."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {key!r}")
        m = beta1 * state.m[key] + (1.0 - beta1) * g
        v = beta2 * state.v[key] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[key] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def train(
    model: SignClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    log_every: int = 0,
) -> SignClassifier:
    """Minibatch Adam on cross entropy; bit-reproducible from (model init, data, config)."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.num_classes:
        raise ValueError(f"labels outside [0, {model.num_classes})")

    rng = np.random.default_rng(config.rng_seed)
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    y_all = torch.from_numpy(labels)
    params = dict(model.named_parameters())
    state = AdamState.initial(params)

    for epoch in range(config.epochs):
        perm = rng.permutation(len(images))
        epoch_loss = 0.0
        for start in range(0, len(images), config.batch_size):
            idx = torch.from_numpy(perm[start : start + config.batch_size])
            logits = model.logits(x_all[idx].to(next(model.parameters()).dtype))
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"training loss became non-finite at epoch {epoch}")
            grads = torch.autograd.grad(loss, list(params.values()))
            new_params, state = adam_step(
                params,
                dict(zip(params.keys(), grads)),
                state,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_epsilon,
            )
            with torch.no_grad():
                for key, p in params.items():
                    p.copy_(new_params[key])
            epoch_loss += loss.item()
        if log_every and (epoch + 1) % log_every == 0:
            print(f"  epoch {epoch + 1}/{config.epochs}  loss={epoch_loss / max(1, len(images) // config.batch_size):.4f}")
    return model


def accuracy(model: SignClassifier, images: np.ndarray, labels: np.ndarray, batch: int = 512) -> float:
    hits = 0
    with torch.no_grad():
        for start in range(0, len(images), batch):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch], dtype=np.float32))
            pred = model.logits(x).argmax(dim=1).numpy()
            hits += int((pred == labels[start : start + batch]).sum())
    return hits / len(images)


def save_checkpoint(model: SignClassifier, path: str, training_seed: int | None = None) -> None:
    """Versioned npz: architecture descriptor + parameter tensors + seeds."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "init_seed": model.init_seed,
        "training_seed": training_seed,
    }
    arrays = {f"param/{name}": p.detach().numpy() for name, p in model.named_parameters()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> SignClassifier:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise IOError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        model = SignClassifier(
            num_classes=meta["num_classes"], arch=meta["arch"], init_seed=meta["init_seed"], dtype=dtype
        )
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(data[f"param/{name}"]).to(dtype))
    return model


class BatchPredictor:
    """Fast no-grad probability queries, identical results regardless of batch splits.

    Every query is processed in fixed 512-image chunks (zero-padded), so the
    numeric result for an image never depends on what else shares its batch.
    torch.compile is used when available; set SIGNATTACK_DISABLE_COMPILE=1 to
    force plain eager execution.
    """

    CHUNK = 512

    def __init__(self, model: SignClassifier, use_compile: bool | None = None):
        model = model.eval()
        self.model = model
        self.num_classes = model.num_classes
        # channels_last weights make CPU convolution considerably faster
        self._weights = [
            (c.weight.detach().to(memory_format=torch.channels_last), c.bias.detach())
            for c in model.convs
        ]
        self._fc = [
            (model.fc1.weight.detach(), model.fc1.bias.detach()),
            (model.fc2.weight.detach(), model.fc2.bias.detach()),
        ]
        self._fn = self._forward
        if use_compile is None:
            use_compile = os.environ.get("SIGNATTACK_DISABLE_COMPILE", "") != "1"
        if use_compile:
            try:
                fn = torch.compile(self._forward)
                fn(torch.zeros(self.CHUNK, *model.input_hw, 3))  # trigger compilation now
                self._fn = fn
            except Exception as exc:  # pragma: no cover - environment dependent
                warnings.warn(f"torch.compile unavailable ({exc!r}); falling back to eager")

    def _forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2).contiguous(memory_format=torch.channels_last)
        for w, b in self._weights:
            x = F.max_pool2d(torch.relu(F.conv2d(x, w, b)), 2)
        x = torch.relu(F.linear(x.flatten(1), *self._fc[0]))
        return torch.softmax(F.linear(x, *self._fc[1]), dim=1)

    def probs(self, images: np.ndarray) -> np.ndarray:
        if images.ndim != 4 or images.shape[1:] != (*self.model.input_hw, 3):
            raise ShapeError(
                f"expected (N, {self.model.input_hw[0]}, {self.model.input_hw[1]}, 3), got {images.shape}"
            )
        n = len(images)
        out = np.empty((n, self.num_classes), dtype=np.float32)
        with torch.no_grad():
            for start in range(0, n, self.CHUNK):
                block = images[start : start + self.CHUNK]
                if len(block) < self.CHUNK:
                    padded = np.zeros((self.CHUNK, *images.shape[1:]), dtype=np.float32)
                    padded[: len(block)] = block
                    probs = self._fn(torch.from_numpy(padded))[: len(block)]
                else:
                    probs = self._fn(torch.from_numpy(np.ascontiguousarray(block, dtype=np.float32)))
                out[start : start + len(block)] = probs.numpy()
        return out
