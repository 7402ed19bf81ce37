"""Decoder-only transformer over hexagon tokens.

Pre-norm blocks with causal multi-head self-attention and a GELU
feed-forward, learned position embeddings, a final layer norm and an untied
linear head.  Training uses teacher forcing: the ground-truth window is the
input at every position and only positions after the observed prefix carry
loss.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import PAD, TrainingWindow
from .optim import AdamW, NonFiniteGradientError


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int
    embed_dim: int = 256
    layers: int = 8
    heads: int = 8
    dropout: float = 0.1
    seed: int = 0
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.vocab_size < 3 or self.context_len < 2 or self.layers < 1:
            raise ModelError("invalid model config")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kv = dict(line.split("=", 1) for line in text.splitlines() if line and not line.startswith("meta."))
        casts = {"int": int, "float": float, "str": str}
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                raise CheckpointError(f"config missing {f.name}")
            kwargs[f.name] = casts[f.type](kv[f.name])
        return cls(**kwargs)


def parameter_count(cfg: ModelConfig) -> int:
    V, H, C, L = cfg.vocab_size, cfg.embed_dim, cfg.context_len, cfg.layers
    per_layer = 4 * H * H + (H * 4 * H + 4 * H) + (4 * H * H + H) + 4 * H
    return V * H + C * H + L * per_layer + 2 * H + H * V + V


def _decayed(name: str) -> bool:
    # biases and layer-norm gains are exempt from weight decay
    return not (name.endswith(".b") or name.endswith(".g") or name.endswith("_b"))


class TransformerModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        dt = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        H, V = config.embed_dim, config.vocab_size

        def normal(*shape):
            return rng.normal(0.0, config.init_std, size=shape).astype(dt)

        def add(name, data):
            self.params[name] = T.Tensor(data, requires_grad=True)

        add("tok_emb", normal(V, H))
        add("pos_emb", normal(config.context_len, H))
        for i in range(config.layers):
            p = f"h{i}."
            add(p + "ln1.g", np.ones(H, dt))
            add(p + "ln1.b", np.zeros(H, dt))
            for w in ("wq", "wk", "wv", "wo"):
                add(p + "attn." + w, normal(H, H))
            add(p + "ln2.g", np.ones(H, dt))
            add(p + "ln2.b", np.zeros(H, dt))
            add(p + "ff.w1", normal(H, 4 * H))
            add(p + "ff.w1_b", np.zeros(4 * H, dt))
            add(p + "ff.w2", normal(4 * H, H))
            add(p + "ff.w2_b", np.zeros(H, dt))
        add("ln_f.g", np.ones(H, dt))
        add("ln_f.b", np.zeros(H, dt))
        add("head.w", normal(H, V))
        add("head.w_b", np.zeros(V, dt))
        self._mask_cache = {}

    # -- bookkeeping ---------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def context_len(self) -> int:
        return self.config.context_len

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def optimizer_params(self):
        return [(name, p, _decayed(name)) for name, p in self.params.items()]

    def state_copy(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict):
        for k, v in state.items():
            self.params[k].data = v.copy()

    def _causal_mask(self, n: int):
        if n not in self._mask_cache:
            m = np.triu(np.full((n, n), -np.inf, dtype=self.config.dtype), k=1)
            self._mask_cache[n] = m
        return self._mask_cache[n]

    # -- forward -------------------------------------------------------------

    def _check_ids(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ModelError(f"expected batch x T token ids, got shape {ids.shape}")
        if ids.shape[1] > self.config.context_len:
            raise ModelError(f"sequence length {ids.shape[1]} exceeds context {self.config.context_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ModelError("token id out of range")
        return ids

    def _run(self, ids, training=False, rng=None, keep_attention=False, positions=None):
        cfg = self.config
        P = self.params
        B, n = ids.shape
        A, dk, H = cfg.heads, cfg.head_dim, cfg.embed_dim
        p_drop = cfg.dropout if training else 0.0
        mask = self._causal_mask(n)
        attention = []

        x = T.embedding(P["tok_emb"], ids) + P["pos_emb"][:n]
        x = T.dropout(x, p_drop, rng, training)
        for i in range(cfg.layers):
            p = f"h{i}."
            h = T.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"])

            q, k, v = (
                (h @ P[p + "attn." + w]).reshape(B, n, A, dk).transpose(0, 2, 1, 3) for w in ("wq", "wk", "wv")
            )
            scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
            att = T.softmax(scores, axis=-1, mask=mask)
            if keep_attention:
                attention.append(att.data.copy())
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, H) @ P[p + "attn.wo"]
            x = x + T.dropout(y, p_drop, rng, training)
            h2 = T.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            f = T.gelu(h2 @ P[p + "ff.w1"] + P[p + "ff.w1_b"]) @ P[p + "ff.w2"] + P[p + "ff.w2_b"]
            x = x + T.dropout(f, p_drop, rng, training)
        if positions is not None:
            # only these positions are read out; skip the head elsewhere
            x = x[np.arange(B), positions]
        x = T.layernorm(x, P["ln_f.g"], P["ln_f.b"])
        logits = x @ P["head.w"] + P["head.w_b"]
        return logits, attention

    def forward(self, ids, training=False, rng=None) -> T.Tensor:
        """Logits of shape ``batch x T x V``; dropout is active only when training."""
        ids = self._check_ids(ids)
        return self._run(ids, training=training, rng=rng)[0]

    def logits(self, ids) -> np.ndarray:
        with T.no_grad():
            return self.forward(ids).data

    def forward_with_attention(self, ids, layer: int = -1):
        """Logits plus attention maps.

        Returns ``(logits, per_layer, heads, aggregate)`` where ``per_layer``
        holds ``batch x A x T x T`` arrays for every layer, ``heads`` is the
        designated layer and ``aggregate`` its elementwise max over heads.
        """
        ids = self._check_ids(ids)
        with T.no_grad():
            logits, attention = self._run(ids, keep_attention=True)
        chosen = attention[layer]
        return logits.data, attention, chosen, chosen.max(axis=1)

    def next_log_probs(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities (float64, ``n x V``) of the next token after each context."""
        lengths = [len(c) for c in contexts]
        if not lengths or min(lengths) < 1:
            raise ModelError("contexts must be non-empty")
        n = max(lengths)
        batch = np.full((len(contexts), n), PAD, dtype=np.int64)
        for row, c in enumerate(contexts):
            batch[row, : len(c)] = c
        ids = self._check_ids(batch)
        with T.no_grad():
            last = self._run(ids, positions=np.asarray(lengths) - 1)[0].data.astype(np.float64)
        return T.log_softmax_np(last)

    def next_block_distribution(self, prefix: Sequence[int]) -> np.ndarray:
        return np.exp(self.next_log_probs([list(prefix)])[0])


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr_start: float = 5e-3
    lr_end: float = 5e-7
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TrainingReport:
    epoch_loss: list = field(default_factory=list)
    val_acc1: list = field(default_factory=list)
    first_batch_loss: float = float("nan")
    steps: int = 0


def collate(windows: Sequence[TrainingWindow]):
    """Pad to a batch; returns ``(inputs, targets, mask)`` for next-token training."""
    m = max(len(w.ids) for w in windows)
    ids = np.full((len(windows), m), PAD, dtype=np.int64)
    sup = np.zeros((len(windows), m), dtype=bool)
    for row, w in enumerate(windows):
        ids[row, : len(w.ids)] = w.ids
        sup[row, : len(w.ids)] = w.loss_mask
    return ids[:, :-1], ids[:, 1:], sup[:, 1:]


def batch_loss(model: TransformerModel, windows, training=False, rng=None) -> T.Tensor:
    inputs, targets, mask = collate(windows)
    logits = model.forward(inputs, training=training, rng=rng)
    return T.cross_entropy(logits, targets, mask)


def train(model: TransformerModel, windows: Sequence[TrainingWindow], cfg: TrainConfig,
          validate: Callable[[TransformerModel], float] | None = None,
          on_epoch: Callable[[int, TrainingReport], None] | None = None) -> TrainingReport:
    """Teacher-forced minibatch training with AdamW; returns the loss curve.

    On a non-finite loss or gradient the parameters are rolled back to the
    end of the last complete epoch and :class:`TrainingDivergedError` is raised.
    """
    if not windows:
        raise ModelError("no training windows")
    windows = list(windows)
    n_batches = math.ceil(len(windows) / cfg.batch_size)
    opt = AdamW(model.optimizer_params(), lr_start=cfg.lr_start, lr_end=cfg.lr_end,
                total_steps=cfg.epochs * n_batches, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    report = TrainingReport()
    last_good = model.state_copy()
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(windows))
        total, count = 0.0, 0
        for b in range(n_batches):
            batch = [windows[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            opt.zero_grad()
            loss = batch_loss(model, batch, training=True, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                model.load_state(last_good)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b}", report)
            if report.steps == 0:
                report.first_batch_loss = value
            loss.backward()
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                model.load_state(last_good)
                raise TrainingDivergedError(str(exc), report) from exc
            report.steps += 1
            total += value * len(batch)
            count += len(batch)
        report.epoch_loss.append(total / count)
        if validate is not None:
            report.val_acc1.append(float(validate(model)))
        last_good = model.state_copy()
        if on_epoch is not None:
            on_epoch(epoch, report)
    return report


def teacher_forced_accuracy(model: TransformerModel, windows: Sequence[TrainingWindow], batch_size=256) -> float:
    """Next-token argmax accuracy on supervised positions, ground truth as input."""
    hit = tot = 0
    for b in range(0, len(windows), batch_size):
        inputs, targets, mask = collate(windows[b:b + batch_size])
        pred = model.logits(inputs).argmax(axis=-1)
        hit += int(((pred == targets) & mask).sum())
        tot += int(mask.sum())
    return hit / max(tot, 1)


# -- checkpoints --------------------------------------------------------------

MAGIC = b"TJL1"
VERSION = 1


def _u32(n):
    return struct.pack("<I", n)


def save_checkpoint(model: TransformerModel, path, meta: dict | None = None):
    """Binary checkpoint: magic, version, config text, then float32 tensors."""
    text = model.config.to_text()
    if meta:
        text += "\n" + "\n".join(f"meta.{k}={v}" for k, v in sorted(meta.items()))
    blob = text.encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(blob)), blob, _u32(len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        parts += [_u32(len(nb)), nb, _u32(p.data.ndim)]
        parts += [struct.pack("<Q", d) for d in p.data.shape]
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> tuple[TransformerModel, dict]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    text = r.take(r.u32()).decode("utf-8")
    config = ModelConfig.from_text(text)
    meta = {
        line[5:].split("=", 1)[0]: line.split("=", 1)[1]
        for line in text.splitlines() if line.startswith("meta.")
    }
    model = TransformerModel(config)
    count = r.u32()
    if count != len(model.params):
        raise CheckpointError(f"{path}: expected {len(model.params)} tensors, found {count}")
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        dims = tuple(r.u64() for _ in range(r.u32()))
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name not in model.params or model.params[name].shape != dims:
            raise CheckpointError(f"{path}: unexpected tensor {name} {dims}")
        model.params[name].data = data.astype(config.dtype)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return model, meta
