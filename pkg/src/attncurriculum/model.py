"""Small pre-LayerNorm decoder-only transformer with attention capture.

Parameter count for ``L`` layers, width ``d``, feed-forward width ``f``,
vocabulary ``V`` and context ``S``::

    V*d                       token embedding
  + S*d                       positional embedding
  + L*(4*d*d + 2*d*f + 9*d + f)
        2d  ln1 gain/bias     3(d*d + d)  q/k/v projections
        d*d + d  output proj  2d  ln2     d*f + f, f*d + d  feed-forward
  + 2*d                       final layer norm
  + d*V + V                   output projection

Checkpoint file layout (little-endian)::

    b"ATTNCKPT" | u32 version | u64 header length | header JSON | tensor bytes

The header holds the config, step counter, tensor names/shapes/dtypes in
storage order, and the SHA-256 of the tensor bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError

CHECKPOINT_MAGIC = b"ATTNCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {"double": torch.float64, "single": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_seq: int = 128
    vocab_size: int = 1024
    precision: str = "single"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.max_seq < 2:
            raise DataError("max_seq must be >= 2")
        if self.d_model % self.n_heads:
            raise DataError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.precision not in _DTYPES:
            raise DataError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    def parameter_count(self) -> int:
        d, f, V, S, L = self.d_model, self.d_ff, self.vocab_size, self.max_seq, self.n_layers
        return V * d + S * d + L * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d + d * V + V


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, key_logit_shift=None):
        B, T, D = x.shape
        H = self.n_heads
        hd = D // H
        q = self.q(x).view(B, T, H, hd).transpose(1, 2)
        k = self.k(x).view(B, T, H, hd).transpose(1, 2)
        v = self.v(x).view(B, T, H, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if key_logit_shift is not None:
            scores = scores + key_logit_shift
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        y = (probs @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y), probs


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x, key_logit_shift=None):
        a, probs = self.attn(self.ln1(x), key_logit_shift)
        x = x + a
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x, probs


class DecoderLM(nn.Module):
    """The model state: parameters plus an optimizer step counter."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.step = 0
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.to(cfg.dtype)

    def forward(self, tokens: torch.Tensor, key_logit_shift=None):
        """tokens: (B, T) int64. Returns logits (B, T, V) and per-layer (B, H, T, T) probabilities."""
        T = tokens.shape[1]
        if T > self.config.max_seq:
            raise DataError(f"sequence length {T} exceeds max_seq {self.config.max_seq}")
        pos = torch.arange(T, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        captured = []
        for block in self.blocks:
            x, probs = block(x, key_logit_shift)
            captured.append(probs)
        return self.head(self.ln_f(x)), captured


ModelState = DecoderLM


def init_model(config: ModelConfig, seed: int) -> DecoderLM:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit LN gains.

    Embeddings draw from Uniform(-1, 1). Draws come from one seeded
    torch generator in parameter registration order.
    """
    model = DecoderLM(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("emb.weight"):
                bound = 1.0
            elif isinstance(_owner(model, name), nn.LayerNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            elif name.endswith("bias"):
                p.zero_()
                continue
            else:
                bound = 1.0 / math.sqrt(p.shape[1])
            p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
    return model


def _owner(model: nn.Module, param_name: str) -> nn.Module:
    return model.get_submodule(param_name.rsplit(".", 1)[0])


def with_precision(state: DecoderLM, precision: str) -> DecoderLM:
    """Copy of ``state`` with parameters cast to ``precision``."""
    cfg = ModelConfig(**{**asdict(state.config), "precision": precision})
    out = DecoderLM(cfg)
    out.load_state_dict({k: v.to(cfg.dtype) for k, v in state.state_dict().items()})
    out.step = state.step
    return out


@dataclass
class ForwardResult:
    logits: torch.Tensor  # (T, V)
    per_token_nll: torch.Tensor  # (T-1,), entry t scores tokens[t+1]
    capture: list[np.ndarray] | None = None  # per layer (H, T, T)


def _as_tensor(tokens: Sequence[int], cfg: ModelConfig) -> torch.Tensor:
    t = torch.as_tensor(list(tokens), dtype=torch.long)
    if t.ndim != 1 or len(t) == 0:
        raise DataError("tokens must be a non-empty 1-d sequence")
    if len(t) > cfg.max_seq:
        raise DataError(f"sequence length {len(t)} exceeds max_seq {cfg.max_seq}")
    if int(t.min()) < 0 or int(t.max()) >= cfg.vocab_size:
        raise DataError("token id out of vocabulary range")
    return t


def forward(state: DecoderLM, tokens: Sequence[int], capture_attention: bool = False) -> ForwardResult:
    t = _as_tensor(tokens, state.config)
    with torch.no_grad():
        logits, probs = state(t[None])
    logits = logits[0]
    nll = -torch.log_softmax(logits[:-1], dim=-1).gather(1, t[1:, None])[:, 0]
    capture = [p[0].numpy().copy() for p in probs] if capture_attention else None
    return ForwardResult(logits, nll, capture)


def _answer_positions(n_predicted: int, answer_start: int) -> slice:
    if answer_start < 1:
        raise DataError("answer_start must be >= 1")
    if answer_start > n_predicted:
        raise DataError("no answer tokens to score")
    return slice(answer_start - 1, n_predicted)


def masked_loss(result: ForwardResult, answer_start: int, reduction: str = "sum") -> float:
    """Cross-entropy over positions t with t + 1 >= answer_start."""
    nll = result.per_token_nll[_answer_positions(len(result.per_token_nll), answer_start)]
    if reduction == "sum":
        return float(nll.sum())
    if reduction == "mean":
        return float(nll.mean())
    raise DataError(f"unknown reduction {reduction!r}")


def answer_loss(state: DecoderLM, tokens: torch.Tensor, answer_start: int) -> torch.Tensor:
    """Differentiable summed answer-span cross-entropy for one sequence."""
    logits, _ = state(tokens[None])
    sl = _answer_positions(len(tokens) - 1, answer_start)
    return F.cross_entropy(logits[0, sl], tokens[1:][sl], reduction="sum")


def backward(state: DecoderLM, tokens: Sequence[int], answer_start: int) -> dict[str, torch.Tensor]:
    """Gradients of the summed answer loss for every parameter; parameters are not modified."""
    t = _as_tensor(tokens, state.config)
    names, params = zip(*state.named_parameters())
    with torch.enable_grad():
        loss = answer_loss(state, t, answer_start)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}


def batch_answer_nll(state: DecoderLM, batch: Sequence[tuple[Sequence[int], int]]):
    """Summed answer-span NLL over a right-padded batch and the answer-token count.

    Padding sits after each sequence, so causal attention never sees it.
    """
    T = max(len(toks) for toks, _ in batch)
    x = torch.zeros(len(batch), T, dtype=torch.long)
    mask = torch.zeros(len(batch), T - 1, dtype=torch.bool)
    for i, (toks, start) in enumerate(batch):
        x[i, : len(toks)] = torch.as_tensor(list(toks))
        if start < 1 or start >= len(toks):
            raise DataError("no answer tokens to score")
        mask[i, start - 1 : len(toks) - 1] = True
    logits, _ = state(x)
    nll = F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]), x[:, 1:].reshape(-1), reduction="none"
    ).view(len(batch), T - 1)
    return (nll * mask).sum(), int(mask.sum())


def _tensor_items(state: DecoderLM):
    return [(k, v.detach().contiguous()) for k, v in state.state_dict().items()]


def fingerprint(state: DecoderLM) -> str:
    """SHA-256 over config and parameter bytes (step counter excluded)."""
    h = hashlib.sha256(json.dumps(asdict(state.config), sort_keys=True).encode())
    for name, t in _tensor_items(state):
        h.update(name.encode())
        h.update(t.numpy().astype(t.numpy().dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def checkpoint_bytes(state: DecoderLM) -> bytes:
    payload = bytearray()
    tensors = []
    for name, t in _tensor_items(state):
        arr = t.numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        payload += arr.tobytes()
    header = json.dumps(
        {
            "config": asdict(state.config),
            "step": state.step,
            "tensors": tensors,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + bytes(payload)


def checkpoint_digest(state: DecoderLM) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()


def save_checkpoint(state: DecoderLM, path: str | Path) -> str:
    """Write ``state``; returns the SHA-256 of the file."""
    blob = checkpoint_bytes(state)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> DecoderLM:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if len(blob) < 20:
        raise DataError(f"{path}: truncated checkpoint")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt checkpoint header (digest mismatch)") from None
    payload = blob[20 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise DataError(f"{path}: payload digest mismatch")
    cfg = ModelConfig(**header["config"])
    if expect_config is not None and cfg != expect_config:
        raise DataError(f"{path}: config mismatch ({cfg} != {expect_config})")
    state = DecoderLM(cfg)
    tensors = {}
    off = 0
    for spec in header["tensors"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(payload[off : off + n], dtype=dt).reshape(spec["shape"])
        tensors[spec["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        off += n
    state.load_state_dict(tensors)
    state.step = header["step"]
    return state


def checkpoint_roundtrip(state: DecoderLM, path: str | Path) -> DecoderLM:
    save_checkpoint(state, path)
    return load_checkpoint(path, expect_config=state.config)
