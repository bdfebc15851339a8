"""Small decoder-only autoregressive transformer.

Pre-norm residual blocks, learned absolute positional embeddings, GELU
MLP with a 4x hidden width, untied output head. The activation is kept
smooth on purpose: the theory oracles lean on finite-difference checks,
and a kinked MLP would poison them near the kink. Token ids 0 and 1 are
reserved everywhere in this package: 0 pads batches, 1 ends a response.

Checkpoint file layout (little-endian throughout):

    magic           8 bytes  b"DFTCKPT1"
    config_len      uint32
    config          config_len bytes of UTF-8 JSON (ModelConfig fields)
    n_params        uint32
    per parameter, in canonical order:
        name_len    uint32
        name        name_len bytes UTF-8
        ndim        uint32
        dims        ndim * uint64
        data        product(dims) * float64

Canonical parameter order is the insertion order of ``Model.params``:
wte, wpe, per-layer blocks (ln1, attention, ln2, mlp), final norm, head.
Flat gradient vectors used by the theory oracles concatenate in this
same order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    embedding,
    gather,
    gelu,
    layer_norm,
    log,
    mask_fill,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)

PAD_ID = 0
EOS_ID = 1

_CKPT_MAGIC = b"DFTCKPT1"
_MASK_FILL_VALUE = -1e30  # finite stand-in for -inf; softmax maps it to exactly 0


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_length: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for field in ("d_model", "n_layers", "n_heads", "context_length"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config.

    V*D (token emb) + T*D (pos emb) + L*(12*D^2 + 13*D) per block
    + 2*D (final norm) + D*V + V (head).
    """
    v, d, t, layers = (
        config.vocab_size,
        config.d_model,
        config.context_length,
        config.n_layers,
    )
    return v * d + t * d + layers * (12 * d * d + 13 * d) + 2 * d + d * v + v


class Model:
    """Decoder-only transformer; owns named parameter tensors."""

    def __init__(self, config: ModelConfig, _init: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        if _init:
            self._init_params()

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        c = self.config
        d, ff = c.d_model, 4 * c.d_model

        def w(name, shape):
            self.params[name] = Tensor(
                rng.normal(0.0, 0.02, size=shape), requires_grad=True
            )

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        w("wte", (c.vocab_size, d))
        w("wpe", (c.context_length, d))
        for i in range(c.n_layers):
            p = f"layers.{i}."
            ones(p + "ln1.weight", (d,))
            zeros(p + "ln1.bias", (d,))
            for mat in ("wq", "wk", "wv", "wo"):
                w(p + "attn." + mat, (d, d))
            for vec in ("bq", "bk", "bv", "bo"):
                zeros(p + "attn." + vec, (d,))
            ones(p + "ln2.weight", (d,))
            zeros(p + "ln2.bias", (d,))
            w(p + "mlp.w1", (d, ff))
            zeros(p + "mlp.b1", (ff,))
            w(p + "mlp.w2", (ff, d))
            zeros(p + "mlp.b2", (d,))
        ones("lnf.weight", (d,))
        zeros("lnf.bias", (d,))
        w("head.w", (d, c.vocab_size))
        zeros("head.b", (c.vocab_size,))

    def named_parameters(self):
        return list(self.params.items())

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def flat_grad(self) -> np.ndarray:
        """Concatenated gradients in canonical parameter order (zeros where unset)."""
        chunks = []
        for t in self.params.values():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            chunks.append(g.reshape(-1))
        return np.concatenate(chunks)

    def detached(self) -> "Model":
        """Gradient-free view sharing this model's parameter arrays."""
        view = Model(self.config, _init=False)
        view.params = {k: Tensor(t.data) for k, t in self.params.items()}
        return view

    def copy(self) -> "Model":
        """Independent trainable clone with copied parameter arrays."""
        clone = Model(self.config, _init=False)
        clone.params = {
            k: Tensor(t.data.copy(), requires_grad=True)
            for k, t in self.params.items()
        }
        return clone

    # --- forward paths ---

    def forward(self, token_ids: np.ndarray) -> Tensor:
        """Logits (batch, length, vocab) for a (batch, length) int matrix.

        Causal: position t sees tokens at positions <= t only.
        """
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise ValueError(f"forward expects a 2-D id matrix, got shape {ids.shape}")
        b, t = ids.shape
        c = self.config
        if t > c.context_length:
            raise ValueError(
                f"sequence length {t} exceeds context_length {c.context_length}"
            )
        if t == 0:
            raise ValueError("forward on empty sequence")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise ValueError(
                f"token id out of vocab (size {c.vocab_size}): "
                f"range [{ids.min()}, {ids.max()}]"
            )
        p = self.params
        h = c.n_heads
        hd = c.d_model // h

        x = add(embedding(p["wte"], ids), embedding(p["wpe"], np.arange(t)))
        causal = ~np.tril(np.ones((t, t), dtype=bool))

        for i in range(c.n_layers):
            pre = f"layers.{i}."
            ln1 = layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"])

            def heads(mat, bias):
                y = add(matmul(ln1, p[pre + "attn." + mat]), p[pre + "attn." + bias])
                return transpose(reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

            q = heads("wq", "bq")
            k = heads("wk", "bk")
            v = heads("wv", "bv")
            att = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
            att = mask_fill(att, causal, _MASK_FILL_VALUE)
            out = matmul(softmax(att), v)
            out = reshape(transpose(out, (0, 2, 1, 3)), (b, t, c.d_model))
            out = add(matmul(out, p[pre + "attn.wo"]), p[pre + "attn.bo"])
            x = add(x, out)

            ln2 = layer_norm(x, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
            m = gelu(add(matmul(ln2, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
            m = add(matmul(m, p[pre + "mlp.w2"]), p[pre + "mlp.b2"])
            x = add(x, m)

        x = layer_norm(x, p["lnf.weight"], p["lnf.bias"])
        return add(matmul(x, p["head.w"]), p["head.b"])

    def token_log_probs(self, prompt_ids, response_ids) -> Tensor:
        """Per-token log prob of each response token given its true prefix.

        Entry t is log softmax(logits at the position preceding response
        token t), indexed at that token. All entries are <= 0.
        """
        prompt = list(prompt_ids)
        response = list(response_ids)
        if not response:
            raise ValueError("empty response")
        if not prompt:
            raise ValueError("empty prompt")
        ids = np.array(prompt + response, dtype=np.int64)
        if len(ids) > self.config.context_length:
            raise ValueError(
                f"prompt+response length {len(ids)} exceeds context_length "
                f"{self.config.context_length}"
            )
        logits = self.forward(ids[None, :-1])
        flat = reshape(logits, (len(ids) - 1, self.config.vocab_size))
        rows = embedding(flat, np.arange(len(prompt) - 1, len(ids) - 1))
        probs = softmax(rows)
        return log(gather(probs, np.array(response, dtype=np.int64)))

    # --- sampling ---

    def sample(
        self,
        prompt_ids,
        max_new: int,
        temperature: float = 1.0,
        seed: int = 0,
        greedy: bool = False,
    ) -> list:
        """Sample a completion; stops at EOS_ID or after max_new tokens.

        Returns generated ids only (terminal EOS included when emitted).
        ``greedy`` implements the temperature -> 0 limit as argmax.
        """
        return sample_batch(self, [list(prompt_ids)], max_new, temperature, [seed], greedy)[0]


def sample_batch(
    model: Model,
    prompts: list,
    max_new: int,
    temperature: float,
    seeds: list,
    greedy: bool = False,
) -> list:
    """Sample one completion per prompt, each from its own seeded stream.

    Prompts are grouped by length so rows stay position-aligned (the model
    has no pad-aware attention); per-prompt streams make the output
    independent of grouping.
    """
    if len(prompts) != len(seeds):
        raise ValueError("prompts and seeds must align")
    if not greedy and temperature <= 0:
        raise ValueError("temperature must be > 0 (use greedy for the argmax limit)")
    for prompt in prompts:
        if len(prompt) == 0:
            raise ValueError("empty prompt")

    net = model.detached()
    results: list = [None] * len(prompts)
    by_len: dict[int, list] = {}
    for idx, prompt in enumerate(prompts):
        by_len.setdefault(len(prompt), []).append(idx)

    for plen, indices in sorted(by_len.items()):
        cur = np.array([prompts[i] for i in indices], dtype=np.int64)
        rngs = [np.random.default_rng(seeds[i]) for i in indices]
        nrows = len(indices)
        outs = [[] for _ in range(nrows)]
        done = np.zeros(nrows, dtype=bool)
        limit = min(max_new, model.config.context_length - plen)
        for _ in range(limit):
            logits = net.forward(cur).data[:, -1, :]
            if greedy:
                tokens = np.argmax(logits, axis=-1)
            else:
                z = logits / temperature
                z -= z.max(axis=-1, keepdims=True)
                e = np.exp(z)
                probs = e / e.sum(axis=-1, keepdims=True)
                cdf = np.cumsum(probs, axis=-1)
                tokens = np.empty(nrows, dtype=np.int64)
                for r in range(nrows):
                    if done[r]:
                        tokens[r] = PAD_ID
                        continue
                    u = rngs[r].random()
                    tokens[r] = min(
                        int(np.searchsorted(cdf[r], u, side="right")),
                        model.config.vocab_size - 1,
                    )
            col = np.where(done, PAD_ID, tokens)
            for r in range(nrows):
                if done[r]:
                    continue
                outs[r].append(int(col[r]))
                if col[r] == EOS_ID:
                    done[r] = True
            if done.all():
                break
            cur = np.concatenate([cur, col[:, None]], axis=1)
        for r, idx in enumerate(indices):
            results[idx] = outs[r]
    return results


def batch_token_log_probs(model: Model, ids: np.ndarray) -> Tensor:
    """Teacher-forced log prob of ids[:, 1:] given prefixes, shape (B, L-1).

    Rows are padded sequences; the caller masks out pad and prompt
    positions. Matches token_log_probs on each unpadded row.
    """
    ids = np.asarray(ids, dtype=np.int64)
    logits = model.forward(ids[:, :-1])
    return log(gather(softmax(logits), ids[:, 1:]))


# --- checkpoint io ---


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.data.ndim))
            for dim in t.data.shape:
                f.write(struct.pack("<Q", dim))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = ModelConfig.from_dict(json.loads(f.read(cfg_len).decode()))
        model = Model(config)
        (n_params,) = struct.unpack("<I", f.read(4))
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = tuple(
                struct.unpack("<Q", f.read(8))[0] for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            if name not in model.params:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            if model.params[name].data.shape != shape:
                raise ValueError(
                    f"{path}: shape {shape} for {name!r} does not match config"
                )
            model.params[name] = Tensor(data.copy(), requires_grad=True)
    return model
